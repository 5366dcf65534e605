use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint, time-ordered snapshot ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn part_of(&self, t: u32) -> Option<SplitPart> {
        if self.train.contains(&t) {
            Some(SplitPart::Train)
        } else if self.val.contains(&t) {
            Some(SplitPart::Val)
        } else if self.test.contains(&t) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }

    pub fn snapshots(&self, part: SplitPart) -> &[u32] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Splits snapshots `0..n` into leading train, middle validation and final
/// test ranges. Validation and test get `max(1, floor(f·n))` snapshots each;
/// train keeps the remainder.
pub fn time_split(n_snapshots: u32, fractions: (f64, f64, f64)) -> Result<Split> {
    if n_snapshots < 3 {
        return Err(Error::Invalid(format!(
            "time_split needs >= 3 snapshots, got {n_snapshots}"
        )));
    }
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = n_snapshots as f64;
    // The epsilon absorbs products like 0.1 * 30 landing just under an integer.
    let count = |f: f64| ((f * n + 1e-9).floor() as u32).max(1);
    let (n_val, n_test) = (count(fv), count(fs));
    if n_val + n_test >= n_snapshots {
        return Err(Error::Config(format!(
            "split leaves no training snapshots out of {n_snapshots}"
        )));
    }
    let n_train = n_snapshots - n_val - n_test;
    Ok(Split {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n_snapshots).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const F: (f64, f64, f64) = (0.8, 0.1, 0.1);

    #[test]
    fn ten_snapshots() {
        let s = time_split(10, F).unwrap();
        assert_eq!(s.train, (0..8).collect::<Vec<_>>());
        assert_eq!(s.val, vec![8]);
        assert_eq!(s.test, vec![9]);
    }

    #[test]
    fn minimum_case() {
        let s = time_split(3, F).unwrap();
        assert_eq!((s.train, s.val, s.test), (vec![0], vec![1], vec![2]));
        assert!(time_split(2, F).is_err());
    }

    #[test]
    fn counts_cover_every_snapshot() {
        for n in 3..=100 {
            let s = time_split(n, F).unwrap();
            assert_eq!((s.train.len() + s.val.len() + s.test.len()) as u32, n);
            assert!(s.train.last() < s.val.first());
            assert!(s.val.last() < s.test.first());
            assert_eq!(*s.test.last().unwrap(), n - 1);
        }
    }
}

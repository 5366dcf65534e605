use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pairwise comparison: P(positive outscores negative), ties ½.
pub fn auc_oracle(s: &[f64], y: &[u8]) -> f64 {
    let mut num = 0.0;
    let (mut np, mut nn) = (0.0, 0.0);
    for i in 0..s.len() {
        if y[i] == 1 {
            np += 1.0;
        } else {
            nn += 1.0;
        }
    }
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / (np * nn)
}

/// Enumerates each distinct score as a threshold and counts directly.
pub fn ap_oracle(s: &[f64], y: &[u8]) -> f64 {
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for th in thresholds {
        let tp = (0..s.len()).filter(|&i| s[i] >= th && y[i] == 1).count();
        let k = (0..s.len()).filter(|&i| s[i] >= th).count();
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / n_pos as f64 * (tp as f64 / k as f64);
        }
        prev_tp = tp;
    }
    ap
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.gen_range(2..=20);
        // Few distinct levels so ties are common.
        let levels = rng.gen_range(1..=6);
        let s: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / 7.0)
            .collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        if y.contains(&0) && y.contains(&1) {
            return (s, y);
        }
    }
}

//! Feature-only MLP baseline trained with the LNN head's loss and optimizer.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{average_precision, Split, SplitPart};
use crate::error::{Error, Result};
use crate::lnn::{EpochRecord, PosWeight, TrainConfig};
use crate::nn::{sigmoid, AdamConfig, AdamState, Mlp, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpBaselineConfig {
    pub hidden_dims: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpBaselineConfig {
    fn default() -> Self {
        MlpBaselineConfig {
            hidden_dims: vec![64, 32],
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Per-order inputs shared by the feature-only baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderTable {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<u8>>,
    pub snapshots: Vec<u32>,
}

impl OrderTable {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Indices of labeled orders in one split part, with their labels.
    pub fn labeled(&self, split: &Split, part: SplitPart) -> (Vec<usize>, Vec<u8>) {
        self.labels
            .iter()
            .zip(&self.snapshots)
            .enumerate()
            .filter_map(|(i, (l, &t))| match l {
                Some(l) if split.part_of(t) == Some(part) => Some((i, *l)),
                _ => None,
            })
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaseline {
    pub mlp: Mlp,
    pub params: ParamStore,
}

impl MlpBaseline {
    pub fn predict(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.mlp.dims[0];
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let x = tape.constant(Tensor::new(rows.len(), d, rows.concat())?)?;
        let y = self.mlp.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().iter().map(|&z| sigmoid(z)).collect())
    }
}

/// Mini-batch training on train-split orders with early stopping on
/// validation AP; returns the best-validation model and the epoch log.
pub fn mlp_baseline_train(
    table: &OrderTable,
    split: &Split,
    cfg: &MlpBaselineConfig,
    train_cfg: &TrainConfig,
) -> Result<(MlpBaseline, Vec<EpochRecord>)> {
    train_cfg.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let d = table.features.first().map_or(0, Vec::len);
    let (train_idx, train_y) = table.labeled(split, SplitPart::Train);
    let (val_idx, val_y) = table.labeled(split, SplitPart::Val);
    let n_pos = train_y.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::Invalid(
            "training split has no positive labels".into(),
        ));
    }
    if !val_y.contains(&1) {
        return Err(Error::Invalid(
            "validation split has no positive labels".into(),
        ));
    }
    let pos_weight = match train_cfg.pos_weight {
        PosWeight::Balanced => {
            ((train_y.len() - n_pos) as f64 / n_pos as f64).max(f64::MIN_POSITIVE)
        }
        PosWeight::Unweighted => 1.0,
        PosWeight::Fixed(w) => w,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(1);
    let mlp = Mlp::new(&mut params, "mlp", &dims, &mut rng);
    let mut model = MlpBaseline { mlp, params };
    let mut adam = AdamState::new(
        AdamConfig {
            lr: train_cfg.lr,
            ..AdamConfig::default()
        },
        model.params.values(),
    );
    let val_rows: Vec<&[f64]> = val_idx
        .iter()
        .map(|&i| table.features[i].as_slice())
        .collect();

    let mut best = (f64::NEG_INFINITY, model.params.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(train_cfg.batch_seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = chunk
                .iter()
                .flat_map(|&k| table.features[train_idx[k]].iter().copied())
                .collect();
            let y: Rc<[f64]> = chunk
                .iter()
                .map(|&k| train_y[k] as f64)
                .collect::<Vec<_>>()
                .into();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape)?;
            let xv = tape.constant(Tensor::new(chunk.len(), d, x)?)?;
            let logits = model.mlp.forward(&mut tape, &p, xv)?;
            let loss = tape.bce(logits, y, pos_weight)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = p
                .iter()
                .zip(model.params.values())
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            adam.step(model.params.values_mut(), &gs)?;
        }
        let val_ap = average_precision(&model.predict(&val_rows)?, &val_y)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_ap,
        });
        if val_ap > best.0 {
            best = (val_ap, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn table(n_per_snapshot: usize, separable: bool, seed: u64) -> OrderTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = OrderTable {
            features: vec![],
            labels: vec![],
            snapshots: vec![],
        };
        for s in 0..10u32 {
            for _ in 0..n_per_snapshot {
                let y = u8::from(rng.gen_bool(0.2));
                let x0: f64 = rng.gen_range(0.0..1.0);
                let x0 = if separable { x0 + 2.0 * y as f64 } else { x0 };
                t.features.push(vec![x0, rng.gen_range(-1.0..1.0)]);
                t.labels.push(Some(y));
                t.snapshots.push(s);
            }
        }
        t
    }

    #[test]
    fn separable_features_give_high_ap() {
        let t = table(60, true, 1);
        let split = crate::eval::time_split(10, (0.8, 0.1, 0.1)).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let (m, _) = mlp_baseline_train(&t, &split, &MlpBaselineConfig::default(), &cfg).unwrap();
        let (idx, y) = t.labeled(&split, SplitPart::Test);
        let rows: Vec<&[f64]> = idx.iter().map(|&i| t.features[i].as_slice()).collect();
        assert!(average_precision(&m.predict(&rows).unwrap(), &y).unwrap() > 0.95);
    }

    #[test]
    fn deterministic_per_seed() {
        let t = table(30, false, 2);
        let split = crate::eval::time_split(10, (0.8, 0.1, 0.1)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = mlp_baseline_train(&t, &split, &MlpBaselineConfig::default(), &cfg).unwrap();
        let b = mlp_baseline_train(&t, &split, &MlpBaselineConfig::default(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LnnGraph, LnnInputs, LnnModel};
use crate::dds::DdsGraph;
use crate::error::{Error, Result};
use crate::eval::{average_precision, Split, SplitPart};
use crate::ingest::StaticGraph;
use crate::nn::{AdamConfig, AdamState, Tape, Tensor};
use crate::partition::{community_batches, PartitionAssignment};

/// Positive-class weight in the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosWeight {
    /// `n_neg / n_pos` over the training split.
    #[default]
    Balanced,
    Unweighted,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many evaluations without a validation AP improvement.
    pub patience: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffle of community batches.
    pub batch_seed: u64,
    pub pos_weight: PosWeight,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            patience: 10,
            lr: 0.002,
            batch_seed: 0,
            pos_weight: PosWeight::Balanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if let PosWeight::Fixed(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config("fixed pos_weight must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-order training loss over the epoch.
    pub train_loss: f64,
    pub val_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
    pub pos_weight: f64,
    /// Every order that entered a loss term (static-graph indices).
    pub loss_orders: BTreeSet<u32>,
}

struct Batch {
    graph: LnnGraph,
    inputs: LnnInputs,
    rows: Rc<[u32]>,
    labels: Rc<[f64]>,
}

/// Labeled stage-2 rows whose snapshot falls in `part` of the split.
fn labeled_rows(graph: &LnnGraph, split: &Split, part: SplitPart) -> (Vec<u32>, Vec<u8>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, (&t, &l)) in graph
        .order_snapshots()
        .iter()
        .zip(graph.order_labels())
        .enumerate()
    {
        if let Some(l) = l {
            if split.part_of(t) == Some(part) {
                rows.push(r as u32);
                labels.push(l);
            }
        }
    }
    (rows, labels)
}

/// Trains on community batches, one Adam step per batch, evaluating
/// validation AP on the full snapshot graph after every epoch. The model
/// ends holding the best-validation parameters.
pub fn train(
    model: &mut LnnModel,
    g: &StaticGraph,
    parts: &PartitionAssignment,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    parts.validate(g.n_vertices())?;
    let features = model.order_features(g)?;

    let (n_pos, n_neg) = g
        .orders
        .iter()
        .filter(|o| split.part_of(o.snapshot) == Some(SplitPart::Train))
        .filter_map(|o| o.label)
        .fold((0usize, 0usize), |(p, n), l| {
            if l == 1 {
                (p + 1, n)
            } else {
                (p, n + 1)
            }
        });
    if n_pos == 0 {
        return Err(Error::Invalid(
            "training split has no positive labels".into(),
        ));
    }
    let pos_weight = match cfg.pos_weight {
        PosWeight::Balanced => (n_neg as f64 / n_pos as f64).max(f64::MIN_POSITIVE),
        PosWeight::Unweighted => 1.0,
        PosWeight::Fixed(w) => w,
    };

    let mut batches = Vec::new();
    let mut loss_orders = BTreeSet::new();
    for cb in community_batches(g, parts, cfg.batch_seed) {
        let dds = DdsGraph::build(g, &cb.vertices(), model.config.dds)?;
        let graph = LnnGraph::new(&dds)?;
        let (rows, labels) = labeled_rows(&graph, split, SplitPart::Train);
        if rows.is_empty() {
            continue;
        }
        loss_orders.extend(rows.iter().map(|&r| graph.order_bases()[r as usize]));
        let inputs = LnnInputs::new(&graph, &dds, &features, 0.0)?;
        batches.push(Batch {
            graph,
            inputs,
            rows: rows.into(),
            labels: labels.iter().map(|&l| l as f64).collect::<Vec<_>>().into(),
        });
    }

    let full = DdsGraph::build_full(g, model.config.dds)?;
    let full_graph = LnnGraph::new(&full)?;
    let full_inputs = LnnInputs::new(&full_graph, &full, &features, 0.0)?;
    let (val_rows, val_labels) = labeled_rows(&full_graph, split, SplitPart::Val);
    if !val_labels.contains(&1) {
        return Err(Error::Invalid(
            "validation split has no positive labels".into(),
        ));
    }

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params().values());
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_ap: f64::NEG_INFINITY,
        pos_weight,
        loss_orders,
    };
    let mut best_params = model.params().clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_seen) = (0.0, 0usize);
        for &b in &order {
            let batch = &batches[b];
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape)?;
            let logits = model.logits_tape(
                &mut tape,
                &p,
                &batch.graph,
                &batch.inputs,
                Some(batch.rows.clone()),
            )?;
            let loss = tape.bce(logits, batch.labels.clone(), pos_weight)?;
            loss_sum += tape.value(loss).data()[0] * batch.rows.len() as f64;
            n_seen += batch.rows.len();
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = p
                .iter()
                .zip(model.params().values())
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            adam.step(model.params_mut().values_mut(), &gs)?;
        }
        let scores = model.forward_inputs(&full_graph, &full_inputs)?;
        let val_scores: Vec<f64> = val_rows.iter().map(|&r| scores[r as usize]).collect();
        let val_ap = average_precision(&val_scores, &val_labels)?;
        let train_loss = loss_sum / n_seen.max(1) as f64;
        log::info!("epoch {epoch}: train_loss={train_loss:.5} val_ap={val_ap:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_ap,
        });
        if val_ap > history.best_val_ap {
            history.best_val_ap = val_ap;
            history.best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(history)
}

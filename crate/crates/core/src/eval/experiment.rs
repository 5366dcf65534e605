//! The comparison harness: MLP, GBDT and both LNN variants on one split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    average_precision, mlp_baseline_train, roc_auc, time_split, GbdtConfig, GbdtModel,
    MlpBaselineConfig, OrderTable, Split, SplitPart,
};
use crate::error::{Error, Result};
use crate::ingest::{SnapshotIndex, StaticGraph, TransactionRecord, DAY_SECONDS};
use crate::lnn::{train, FeatureMode, LnnConfig, LnnModel, TrainConfig, TrainHistory};
use crate::nn::LayerKind;
use crate::partition::{
    pic_cluster, refine_partition, PartitionAssignment, PicConfig, RefineConfig,
};
use crate::DdsGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Snapshot origin; the earliest event time when absent.
    pub origin_time: Option<i64>,
    pub snapshot_seconds: i64,
    pub split_fractions: (f64, f64, f64),
    pub seeds: Vec<u64>,
    pub feature_mode: FeatureMode,
    pub gbdt: GbdtConfig,
    pub mlp: MlpBaselineConfig,
    /// Layer kind and seed are set per run.
    pub lnn: LnnConfig,
    /// Batch seed is set per run.
    pub train: TrainConfig,
    pub pic: PicConfig,
    pub refine: RefineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            origin_time: None,
            snapshot_seconds: DAY_SECONDS,
            split_fractions: (0.8, 0.1, 0.1),
            seeds: vec![0, 1, 2],
            feature_mode: FeatureMode::Raw,
            gbdt: GbdtConfig::default(),
            mlp: MlpBaselineConfig::default(),
            lnn: LnnConfig::default(),
            train: TrainConfig::default(),
            pic: PicConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

/// Static graph over `records` with the configured snapshot grid. The
/// origin defaults to the earliest event time.
pub fn build_graph(records: &[TransactionRecord], cfg: &ExperimentConfig) -> Result<StaticGraph> {
    let origin = match cfg.origin_time {
        Some(t) => t,
        None => records
            .iter()
            .map(|r| r.event_time)
            .min()
            .ok_or_else(|| Error::Invalid("no records".into()))?,
    };
    let index = SnapshotIndex::covering(records, origin, cfg.snapshot_seconds)?;
    StaticGraph::build(records, index)
}

/// Everything derived from the records once, shared by every run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: StaticGraph,
    pub split: Split,
    pub parts: PartitionAssignment,
    pub raw: OrderTable,
    /// Trained on the raw train split; also the feature encoder when the
    /// feature mode asks for one.
    pub gbdt: GbdtModel,
}

impl Dataset {
    pub fn prepare(records: &[TransactionRecord], cfg: &ExperimentConfig) -> Result<Self> {
        let graph = build_graph(records, cfg)?;
        let coarse = pic_cluster(&graph, &cfg.pic)?;
        let parts = refine_partition(&graph, &coarse, &cfg.refine)?;
        Self::from_parts(graph, parts, cfg)
    }

    /// Same as [`Dataset::prepare`] from an already built graph and partition.
    pub fn from_parts(
        graph: StaticGraph,
        parts: PartitionAssignment,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        parts.validate(graph.n_vertices())?;
        let split = time_split(graph.index.n_snapshots, cfg.split_fractions)?;
        let raw = OrderTable {
            features: graph.orders.iter().map(|o| o.features.clone()).collect(),
            labels: graph.orders.iter().map(|o| o.label).collect(),
            snapshots: graph.orders.iter().map(|o| o.snapshot).collect(),
        };
        let (idx, y) = raw.labeled(&split, SplitPart::Train);
        if idx.is_empty() {
            return Err(Error::Invalid(
                "training split has no labeled orders".into(),
            ));
        }
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| raw.features[i].clone()).collect();
        let (gbdt, _) = GbdtModel::fit(&x, &y, &cfg.gbdt)?;
        Ok(Dataset {
            graph,
            split,
            parts,
            raw,
            gbdt,
        })
    }

    pub fn encoder(&self, mode: FeatureMode) -> Option<GbdtModel> {
        (mode != FeatureMode::Raw).then(|| self.gbdt.clone())
    }

    /// Builds and trains one LNN.
    pub fn train_lnn(
        &self,
        cfg: &ExperimentConfig,
        kind: LayerKind,
        seed: u64,
    ) -> Result<(LnnModel, TrainHistory)> {
        let lnn_cfg = LnnConfig {
            layer_kind: kind,
            seed,
            feature_mode: cfg.feature_mode,
            ..cfg.lnn.clone()
        };
        let mut model = LnnModel::new(
            lnn_cfg,
            self.graph.feature_dim,
            self.encoder(cfg.feature_mode),
        )?;
        let train_cfg = TrainConfig {
            batch_seed: seed,
            ..cfg.train.clone()
        };
        let history = train(
            &mut model,
            &self.graph,
            &self.parts,
            &self.split,
            &train_cfg,
        )?;
        Ok((model, history))
    }

    /// Test-split labeled orders: static-graph indices and labels.
    pub fn test_orders(&self) -> (Vec<usize>, Vec<u8>) {
        self.raw.labeled(&self.split, SplitPart::Test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub roc_auc: f64,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub runs: Vec<RunMetrics>,
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ModelRow>,
    pub seeds: Vec<u64>,
    pub feature_mode: FeatureMode,
    pub test_snapshots: Vec<u32>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ModelRow {
    fn new(model: &str, runs: Vec<RunMetrics>) -> Self {
        let (roc_auc_mean, roc_auc_std) =
            mean_std(&runs.iter().map(|r| r.roc_auc).collect::<Vec<_>>());
        let (ap_mean, ap_std) =
            mean_std(&runs.iter().map(|r| r.average_precision).collect::<Vec<_>>());
        ModelRow {
            model: model.to_string(),
            runs,
            roc_auc_mean,
            roc_auc_std,
            ap_mean,
            ap_std,
        }
    }
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Model | ROC AUC | AP |\n|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.4}±{:.4} | {:.4}±{:.4} |",
                r.model, r.roc_auc_mean, r.roc_auc_std, r.ap_mean, r.ap_std
            );
        }
        let _ = writeln!(
            s,
            "\nTest snapshots {:?}: {} positive, {} negative orders. Features: {}.",
            self.test_snapshots,
            self.n_pos,
            self.n_neg,
            serde_json::to_string(&self.feature_mode)
                .unwrap_or_default()
                .trim_matches('"'),
        );
        let _ = writeln!(
            s,
            "± is the sample standard deviation across {} seeds {:?}.",
            self.seeds.len(),
            self.seeds
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const MODEL_NAMES: [&str; 4] = ["MLP", "GBDT", "LNN (GCN)", "LNN (GAT)"];

fn metrics(seed: u64, scores: &[f64], labels: &[u8]) -> Result<RunMetrics> {
    Ok(RunMetrics {
        seed,
        roc_auc: roc_auc(scores, labels)?,
        average_precision: average_precision(scores, labels)?,
    })
}

/// Trains every model for every seed on one split and tabulates test metrics.
pub fn run_experiment(records: &[TransactionRecord], cfg: &ExperimentConfig) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let data = Dataset::prepare(records, cfg)?;
    run_on_dataset(&data, cfg)
}

/// [`run_experiment`] on a prepared dataset.
pub fn run_on_dataset(data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let (test_idx, test_y) = data.test_orders();
    if !test_y.contains(&1) || !test_y.contains(&0) {
        return Err(Error::Invalid("test split needs both classes".into()));
    }

    let encoded = match data.encoder(cfg.feature_mode) {
        None => data.raw.clone(),
        Some(_) => {
            let probe = LnnModel::new(
                LnnConfig {
                    feature_mode: cfg.feature_mode,
                    ..cfg.lnn.clone()
                },
                data.graph.feature_dim,
                data.encoder(cfg.feature_mode),
            )?;
            OrderTable {
                features: data
                    .raw
                    .features
                    .iter()
                    .map(|f| probe.encode(f))
                    .collect::<Result<_>>()?,
                ..data.raw.clone()
            }
        }
    };
    let test_rows: Vec<&[f64]> = test_idx
        .iter()
        .map(|&i| encoded.features[i].as_slice())
        .collect();
    let test_orders: Vec<u32> = test_idx.iter().map(|&i| i as u32).collect();
    let full = DdsGraph::build_full(&data.graph, cfg.lnn.dds)?;

    let mut runs: [Vec<RunMetrics>; 4] = Default::default();
    for &seed in &cfg.seeds {
        log::info!("seed {seed}: mlp");
        let mlp_cfg = MlpBaselineConfig {
            seed,
            ..cfg.mlp.clone()
        };
        let train_cfg = TrainConfig {
            batch_seed: seed,
            ..cfg.train.clone()
        };
        let (mlp, _) = mlp_baseline_train(&encoded, &data.split, &mlp_cfg, &train_cfg)?;
        runs[0].push(metrics(seed, &mlp.predict(&test_rows)?, &test_y)?);

        let gbdt_scores: Vec<f64> = test_idx
            .iter()
            .map(|&i| data.gbdt.predict_proba(&data.raw.features[i]))
            .collect();
        runs[1].push(metrics(seed, &gbdt_scores, &test_y)?);

        for (slot, kind) in [(2, LayerKind::Gcn), (3, LayerKind::Gat)] {
            log::info!("seed {seed}: lnn {kind}");
            let (model, _) = data.train_lnn(cfg, kind, seed)?;
            let features = model.order_features(&data.graph)?;
            let scores = model.forward_full(&full, &features, &test_orders)?;
            runs[slot].push(metrics(seed, &scores, &test_y)?);
        }
    }
    let rows = MODEL_NAMES
        .iter()
        .zip(runs)
        .map(|(name, r)| ModelRow::new(name, r))
        .collect();
    Ok(EvalReport {
        rows,
        seeds: cfg.seeds.clone(),
        feature_mode: cfg.feature_mode,
        test_snapshots: data.split.test.clone(),
        n_pos: test_y.iter().filter(|&&y| y == 1).count(),
        n_neg: test_y.iter().filter(|&&y| y == 0).count(),
    })
}

//! Metrics, time splits, baselines and the experiment harness.

mod baseline;
mod experiment;
mod gbdt;
mod metrics;
mod split;

pub use baseline::{mlp_baseline_train, MlpBaseline, MlpBaselineConfig, OrderTable};
pub use experiment::{
    build_graph, run_experiment, run_on_dataset, Dataset, EvalReport, ExperimentConfig, ModelRow, RunMetrics, MODEL_NAMES,
};
pub use gbdt::{GbdtConfig, GbdtModel, Node, Tree};
pub use metrics::{average_precision, log_loss, roc_auc};
pub use split::{time_split, Split, SplitPart};

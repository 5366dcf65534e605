use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dds_core::datagen::GenConfig;
use dds_core::eval::ExperimentConfig;
use serde::{Deserialize, Serialize};

/// Where each pipeline stage reads and writes its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Transaction log, JSONL or CSV by extension.
    pub records: PathBuf,
    pub graph: PathBuf,
    pub partition: PathBuf,
    pub dds: PathBuf,
    pub model: PathBuf,
    pub store: PathBuf,
    /// Receives `report.md` and `report.json`.
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let dir = PathBuf::from("work");
        Paths {
            records: dir.join("records.jsonl"),
            graph: dir.join("graph.ddsg"),
            partition: dir.join("partition.ddsp"),
            dds: dir.join("dds.ddst"),
            model: dir.join("model.ddsm"),
            store: dir.join("store.ddse"),
            report_dir: dir.join("report"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "127.0.0.1:7878".into(),
        }
    }
}

/// The whole pipeline in one file. Snapshot grid, split, partitioning,
/// DDS history window, model shape, training and seeds all live under
/// `experiment`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub datagen: GenConfig,
    pub experiment: ExperimentConfig,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    /// Snapshot grid aligned with the generator's origin.
    fn default() -> Self {
        let datagen = GenConfig::default();
        let experiment = ExperimentConfig {
            origin_time: Some(datagen.origin_time),
            snapshot_seconds: datagen.snapshot_seconds,
            ..ExperimentConfig::default()
        };
        PipelineConfig {
            paths: Paths::default(),
            datagen,
            experiment,
            serve: ServeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

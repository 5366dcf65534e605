//! Leakage-safe snapshot graphs and a two-stage GNN for checkout fraud scoring.
//!
//! The pipeline runs ingestion → partitioning → snapshot-graph construction →
//! training → entity embedding export → one-hop scoring against the exported
//! embedding store.

mod codec;
pub mod datagen;
pub mod dds;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod lnn;
pub mod nn;
pub mod partition;
pub mod serve;

pub use dds::{audit_no_future, DdsConfig, DdsGraph};
pub use error::{Error, Result};
pub use ingest::{EntityKey, EntityType, SnapshotIndex, StaticGraph, TransactionRecord};
pub use lnn::{EntityEmbedding, LnnConfig, LnnModel, TrainConfig};

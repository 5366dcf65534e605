//! Embedding store files and the one-hop scoring service.

mod service;
mod store;

pub use service::{
    latency_report, percentile, serve_lines, ErrorBody, ErrorResponse, LatencyReport, ScoreRequest,
    ScoreResponse, Scorer, TcpService, MIN_LATENCY_SAMPLES,
};
pub use store::{store_write, EmbeddingStore, StoreHeader, LATEST};

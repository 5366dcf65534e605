#![allow(dead_code)]

pub mod oracles;

use dds_core::datagen::GenConfig;
use dds_core::ingest::{EntityType, SnapshotIndex, StaticGraph, TransactionRecord, DAY_SECONDS};

/// Two orders one day apart sharing a single email.
pub fn two_order_records() -> Vec<TransactionRecord> {
    let mk = |id: &str, day: i64, features: Vec<f64>| TransactionRecord {
        order_id: id.into(),
        event_time: day * DAY_SECONDS + 3600,
        entities: [(EntityType::Email, "e1@example.com".to_string())]
            .into_iter()
            .collect(),
        features,
        label: Some(day as u8),
    };
    vec![
        mk("order_0", 0, vec![0.4, -1.2, 0.7]),
        mk("order_1", 1, vec![-0.3, 0.8, 1.5]),
    ]
}

pub fn static_graph(records: &[TransactionRecord], origin: i64) -> StaticGraph {
    let idx = SnapshotIndex::covering(records, origin, DAY_SECONDS).unwrap();
    StaticGraph::build(records, idx).unwrap()
}

/// A dataset small enough for debug-speed tests.
pub fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        n_snapshots: 10,
        legit_orders_per_snapshot: 30,
        n_rings: 10,
        ring_size: 8,
        ring_span: 3,
        feature_dim: 6,
        seed,
        ..GenConfig::default()
    }
}

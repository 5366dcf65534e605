mod common;

use std::collections::BTreeMap;

use dds_core::datagen::{generate, GenConfig};
use dds_core::dds::{audit_no_future, DdsConfig, DdsGraph, DdsVertexKind, EdgeKind, HistoryMode};
use dds_core::ingest::{EntityType, StaticGraph, TransactionRecord, DAY_SECONDS};
use proptest::prelude::*;

type Named = (EdgeKind, String, String);

fn name(dds: &DdsGraph, g: &StaticGraph, v: u32) -> String {
    let x = dds.vertex(v);
    match x.kind {
        DdsVertexKind::EffectiveOrder => format!("order_{}", x.t),
        DdsVertexKind::ShadowOrder => format!("os_{}", x.t),
        DdsVertexKind::EntitySnapshot => {
            assert_eq!(g.entities[x.base as usize].value, "e1@example.com");
            format!("e1_{}", x.t)
        }
    }
}

fn named_edges(dds: &DdsGraph, g: &StaticGraph) -> Vec<Named> {
    let mut out: Vec<Named> = EdgeKind::ALL
        .iter()
        .flat_map(|&k| {
            dds.edges(k)
                .iter()
                .map(move |&(s, d)| (k, name(dds, g, s), name(dds, g, d)))
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort();
    out
}

#[test]
fn two_orders_one_email() {
    let recs = common::two_order_records();
    let g = common::static_graph(&recs, 0);
    let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
    assert_eq!(dds.n_vertices(), 6);
    assert_eq!(dds.n_edges(), 8);

    let mut kinds: BTreeMap<DdsVertexKind, usize> = BTreeMap::new();
    for v in dds.vertices() {
        *kinds.entry(v.kind).or_default() += 1;
    }
    assert_eq!(kinds.values().copied().collect::<Vec<_>>(), vec![2, 2, 2]);

    let s = |x: &str| x.to_string();
    let mut expected = vec![
        (EdgeKind::ShadowToEntity, s("os_0"), s("e1_0")),
        (EdgeKind::EntityToShadow, s("e1_0"), s("os_0")),
        (EdgeKind::ShadowToEntity, s("os_1"), s("e1_1")),
        (EdgeKind::EntityToShadow, s("e1_1"), s("os_1")),
        (EdgeKind::EntityToEntity, s("e1_0"), s("e1_1")),
        (EdgeKind::EntityToEntity, s("e1_0"), s("e1_0")),
        (EdgeKind::EntityToEntity, s("e1_1"), s("e1_1")),
        (EdgeKind::EffectiveEntityToOrder, s("e1_0"), s("order_1")),
    ];
    expected.sort();
    assert_eq!(named_edges(&dds, &g), expected);

    // Labels sit on effective orders only.
    for (&v, _) in dds.labels() {
        assert_eq!(dds.vertex(v).kind, DdsVertexKind::EffectiveOrder);
    }
    assert!(audit_no_future(&dds).ok);
}

#[test]
fn injected_future_edge_is_caught() {
    let recs = common::two_order_records();
    let g = common::static_graph(&recs, 0);
    let mut dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
    let (eff0, _) = dds.order_vertices()[&0];
    let e1_1 = dds.entity_activity(0)[1].1;
    dds.push_edge_unchecked(EdgeKind::EffectiveEntityToOrder, e1_1, eff0);
    let report = audit_no_future(&dds);
    assert!(!report.ok);
    assert_eq!(report.violations.len(), 1);
    assert_eq!(report.violations[0].order, eff0);
}

/// Reverse BFS from every labeled order, written independently of the library.
fn reverse_bfs_ok(dds: &DdsGraph) -> bool {
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); dds.n_vertices()];
    for k in EdgeKind::ALL {
        for &(s, d) in dds.edges(k) {
            preds[d as usize].push(s);
        }
    }
    dds.labels().keys().all(|&o| {
        let t = dds.vertex(o).t;
        let mut seen = vec![false; dds.n_vertices()];
        let mut stack = preds[o as usize].clone();
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u as usize], true) {
                continue;
            }
            if dds.vertex(u).t >= t {
                return false;
            }
            stack.extend(preds[u as usize].iter().copied());
        }
        true
    })
}

fn arb_gen() -> impl Strategy<Value = (GenConfig, Option<u32>, bool)> {
    (
        2u32..12,
        5usize..40,
        0usize..8,
        2usize..10,
        1usize..4,
        0.0f64..0.3,
        any::<u64>(),
        prop::option::of(1u32..6),
        any::<bool>(),
    )
        .prop_map(
            |(n, legit, rings, size, pool, reuse, seed, window, all_pairs)| {
                let cfg = GenConfig {
                    n_snapshots: n,
                    legit_orders_per_snapshot: legit,
                    n_rings: rings,
                    ring_size: size,
                    ring_entity_pool: pool,
                    ring_span: n.min(3),
                    entity_reuse_prob_legit: reuse,
                    feature_dim: 2,
                    seed,
                    ..GenConfig::default()
                };
                (cfg, window, all_pairs)
            },
        )
        .prop_filter("valid config", |(c, _, _)| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn random_datasets_pass_audit((cfg, window, all_pairs) in arb_gen()) {
        let recs = generate(&cfg).unwrap();
        let g = common::static_graph(&recs, cfg.origin_time);
        let dc = DdsConfig {
            history_window: window,
            history_mode: if all_pairs { HistoryMode::AllPairs } else { HistoryMode::Consecutive },
        };
        let dds = DdsGraph::build_full(&g, dc).unwrap();
        let report = audit_no_future(&dds);
        prop_assert!(report.ok, "{:?}", report.violations.first());
        prop_assert!(reverse_bfs_ok(&dds));
        prop_assert_eq!(report.checked_orders, g.n_orders());

        // One effective edge per linked entity with earlier activity, never more.
        let mut per_order: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, d) in dds.edges(EdgeKind::EffectiveEntityToOrder) {
            *per_order.entry(d).or_default() += 1;
        }
        for (&base, &(eff, _)) in dds.order_vertices() {
            let n = per_order.get(&eff).copied().unwrap_or(0);
            prop_assert!(n <= g.order_entities(base as usize).len());
        }
    }
}

#[test]
fn text_dump_lists_every_edge() {
    let recs = common::two_order_records();
    let g = common::static_graph(&recs, 0);
    let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
    let mut buf = Vec::new();
    dds.write_text(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.contains("effective_entity_to_order 0 0 1 1"));
}

#[test]
fn binary_round_trip() {
    let cfg = common::small_gen(3);
    let recs = generate(&cfg).unwrap();
    let g = common::static_graph(&recs, cfg.origin_time);
    let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.ddst");
    dds.save(&p).unwrap();
    assert_eq!(DdsGraph::load(&p).unwrap(), dds);
}

#[test]
fn partition_subgraph_keeps_only_its_orders() {
    let mk = |id: &str, day: i64, email: &str| TransactionRecord {
        order_id: id.into(),
        event_time: day * DAY_SECONDS,
        entities: [(EntityType::Email, email.to_string())]
            .into_iter()
            .collect(),
        features: vec![1.0],
        label: Some(0),
    };
    let recs = vec![mk("a", 0, "x"), mk("b", 1, "x"), mk("c", 2, "y")];
    let g = common::static_graph(&recs, 0);
    // Orders a and b plus entity x (unified index 3).
    let dds = DdsGraph::build(&g, &[0, 1, 3], DdsConfig::default()).unwrap();
    assert_eq!(dds.order_vertices().len(), 2);
    assert_eq!(dds.edges(EdgeKind::EffectiveEntityToOrder).len(), 1);
}

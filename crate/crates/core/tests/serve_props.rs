mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use dds_core::datagen::generate;
use dds_core::dds::{DdsConfig, DdsGraph};
use dds_core::ingest::{EntityKey, EntityType};
use dds_core::lnn::{EntityEmbedding, LnnConfig, LnnModel};
use dds_core::nn::LayerKind;
use dds_core::serve::{
    serve_lines, store_write, EmbeddingStore, ErrorResponse, ScoreRequest, ScoreResponse, Scorer,
    TcpService, LATEST,
};
use dds_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> LnnModel {
    let cfg = LnnConfig {
        layer_kind: LayerKind::Gcn,
        hidden_dim: 8,
        head_dims: vec![8],
        seed,
        ..LnnConfig::default()
    };
    LnnModel::new(cfg, 6, None).unwrap()
}

#[test]
fn hundred_thousand_keys_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embs: Vec<EntityEmbedding> = (0..100_000)
        .map(|i| EntityEmbedding {
            key: EntityKey::new(
                EntityType::ALL[i % 7],
                &format!("k{}-{}", i, rng.gen::<u32>()),
            )
            .unwrap(),
            vector: (0..4).map(|_| rng.gen_range(-1e3..1e3)).collect(),
            snapshot: rng.gen_range(0..50),
            model_version: 42,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("big.ddse");
    store_write(&p, 4, 42, LATEST, &embs).unwrap();
    let store = EmbeddingStore::open(&p).unwrap();
    assert_eq!(store.len(), embs.len());
    for e in &embs {
        assert_eq!(store.get(&e.key).as_ref(), Some(e));
    }
    assert!(!p.with_extension("ddse.tmp").exists());
}

fn scorer_for_small() -> (
    Arc<Scorer>,
    Vec<dds_core::TransactionRecord>,
    tempfile::TempDir,
) {
    let cfg = common::small_gen(4);
    let recs = generate(&cfg).unwrap();
    let g = common::static_graph(&recs, cfg.origin_time);
    let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
    let m = model(1);
    let embs = m.infer_entity_embeddings(&g, &dds, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ddse");
    store_write(&p, m.embedding_dim(), m.version(), LATEST, &embs).unwrap();
    let scorer = Scorer::new(m, EmbeddingStore::open(&p).unwrap()).unwrap();
    (Arc::new(scorer), recs, dir)
}

#[test]
fn mismatched_store_refuses_to_start() {
    let (scorer, _, dir) = scorer_for_small();
    let store = EmbeddingStore::open(&dir.path().join("s.ddse")).unwrap();
    let other = model(2);
    assert!(matches!(
        Scorer::new(other, store),
        Err(Error::VersionMismatch { .. })
    ));
    assert!(scorer.store().len() > 0);
}

#[test]
fn tcp_isolates_malformed_lines() {
    let (scorer, recs, _dir) = scorer_for_small();
    let svc = TcpService::start(scorer.clone(), "127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(svc.local_addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut line = String::new();

    writeln!(w, "{{not json").unwrap();
    r.read_line(&mut line).unwrap();
    let err: ErrorResponse = serde_json::from_str(&line).unwrap();
    assert_eq!(err.error.kind, "json");

    let req = ScoreRequest::from(&recs[5]);
    line.clear();
    writeln!(w, "{}", serde_json::to_string(&req).unwrap()).unwrap();
    r.read_line(&mut line).unwrap();
    let ok: ScoreResponse = serde_json::from_str(&line).unwrap();
    assert_eq!(ok.order_id, req.order_id);
    assert!((0.0..=1.0).contains(&ok.score));

    // Wrong feature width is a scoring error, not a dropped connection.
    line.clear();
    let bad = ScoreRequest {
        features: vec![1.0],
        ..req.clone()
    };
    writeln!(w, "{}", serde_json::to_string(&bad).unwrap()).unwrap();
    r.read_line(&mut line).unwrap();
    let err: ErrorResponse = serde_json::from_str(&line).unwrap();
    assert_eq!(err.order_id.as_deref(), Some(req.order_id.as_str()));
    assert_eq!(err.error.kind, "shape");

    // Unknown entities fall back to the cold path.
    line.clear();
    let cold = ScoreRequest {
        entities: [(EntityType::Email, "nobody@nowhere".to_string())]
            .into_iter()
            .collect(),
        ..req.clone()
    };
    writeln!(w, "{}", serde_json::to_string(&cold).unwrap()).unwrap();
    r.read_line(&mut line).unwrap();
    let resp: ScoreResponse = serde_json::from_str(&line).unwrap();
    assert!(resp.used_entities.is_empty());
    let direct = scorer.model().score_encoded(&req.features, &[]).unwrap();
    assert_eq!(resp.score, direct);
    drop(w);
    svc.shutdown();
}

#[test]
fn stdio_transport_answers_every_line() {
    let (scorer, recs, _dir) = scorer_for_small();
    let mut input = String::new();
    for r in recs.iter().take(5) {
        input.push_str(&serde_json::to_string(&ScoreRequest::from(r)).unwrap());
        input.push('\n');
    }
    input.push_str("[]\n");
    let mut out = Vec::new();
    serve_lines(&scorer, input.as_bytes(), &mut out).unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
    assert_eq!(lines.len(), 6);
    for (l, r) in lines[..5].iter().zip(&recs) {
        let resp: ScoreResponse = serde_json::from_str(l).unwrap();
        assert_eq!(resp.order_id, r.order_id);
    }
    assert!(serde_json::from_str::<ErrorResponse>(lines[5]).is_ok());
}

#[test]
fn reload_swaps_store_and_fences_versions() {
    let (scorer, _recs, dir) = scorer_for_small();
    let p = dir.path().join("next.ddse");
    store_write(
        &p,
        scorer.model().embedding_dim(),
        scorer.model().version(),
        3,
        &[],
    )
    .unwrap();
    scorer.reload(&p).unwrap();
    assert!(scorer.store().is_empty());
    assert_eq!(scorer.store().header().snapshot, 3);
    let stale = dir.path().join("stale.ddse");
    store_write(&stale, scorer.model().embedding_dim(), 1, 3, &[]).unwrap();
    assert!(scorer.reload(&stale).is_err());
}

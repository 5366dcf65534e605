//! Directed dynamic snapshot graphs.
//!
//! Every order becomes an *effective* copy (labeled, scored) and a *shadow*
//! copy (unlabeled, talks to same-snapshot entities). Entities are split into
//! one vertex per active snapshot. Information only flows forward in time:
//! an effective order at snapshot `t` receives exactly one edge per entity
//! type, from that entity's latest snapshot strictly before `t`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::ingest::{EntityKey, StaticGraph, VertexKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DdsVertexKind {
    EffectiveOrder,
    ShadowOrder,
    EntitySnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DdsVertex {
    pub kind: DdsVertexKind,
    /// Order index or entity index into the static graph.
    pub base: u32,
    pub t: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    ShadowToEntity,
    EntityToShadow,
    EntityToEntity,
    EffectiveEntityToOrder,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::ShadowToEntity,
        EdgeKind::EntityToShadow,
        EdgeKind::EntityToEntity,
        EdgeKind::EffectiveEntityToOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::ShadowToEntity => "shadow_to_entity",
            EdgeKind::EntityToShadow => "entity_to_shadow",
            EdgeKind::EntityToEntity => "entity_to_entity",
            EdgeKind::EffectiveEntityToOrder => "effective_entity_to_order",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How historical entity snapshots are chained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Link consecutive active snapshots only; older history flows transitively.
    #[default]
    Consecutive,
    /// Link every earlier active snapshot inside the window.
    AllPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdsConfig {
    /// Maximum snapshot gap for entity history edges; `None` is unbounded.
    pub history_window: Option<u32>,
    pub history_mode: HistoryMode,
}

impl Default for DdsConfig {
    fn default() -> Self {
        DdsConfig {
            history_window: Some(8),
            history_mode: HistoryMode::Consecutive,
        }
    }
}

impl DdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_window == Some(0) {
            return Err(Error::Config("history_window must be >= 1".into()));
        }
        Ok(())
    }

    fn in_window(&self, from: u32, to: u32) -> bool {
        self.history_window.map_or(true, |h| to - from <= h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdsGraph {
    pub config: DdsConfig,
    vertices: Vec<DdsVertex>,
    edges: [Vec<(u32, u32)>; 4],
    labels: BTreeMap<u32, u8>,
    /// Effective and shadow vertex per order base.
    order_vertices: BTreeMap<u32, (u32, u32)>,
    /// Active (snapshot, vertex) pairs per entity base, ascending by snapshot.
    activity: BTreeMap<u32, Vec<(u32, u32)>>,
}

impl DdsGraph {
    fn empty(config: DdsConfig) -> Self {
        DdsGraph {
            config,
            vertices: Vec::new(),
            edges: Default::default(),
            labels: BTreeMap::new(),
            order_vertices: BTreeMap::new(),
            activity: BTreeMap::new(),
        }
    }

    /// Builds the snapshot graph of the subgraph induced by `part_vertices`
    /// (unified static-graph indices).
    pub fn build(g: &StaticGraph, part_vertices: &[usize], config: DdsConfig) -> Result<Self> {
        config.validate()?;
        let in_part: HashSet<usize> = part_vertices.iter().copied().collect();
        let mut orders: Vec<u32> = part_vertices
            .iter()
            .filter(|&&v| g.vertex_kind(v) == VertexKind::Order)
            .map(|&v| v as u32)
            .collect();
        orders.sort_unstable();
        orders.dedup();
        let linked = |o: u32| {
            g.order_entities(o as usize)
                .iter()
                .copied()
                .filter(|&e| in_part.contains(&g.entity_vertex(e)))
        };

        let mut dds = DdsGraph::empty(config);
        // Steps 1 and 2: effective order with label, unlabeled shadow clone.
        for &o in &orders {
            let ov = &g.orders[o as usize];
            let eff = dds.push_vertex(DdsVertexKind::EffectiveOrder, o, ov.snapshot);
            let sh = dds.push_vertex(DdsVertexKind::ShadowOrder, o, ov.snapshot);
            if let Some(l) = ov.label {
                dds.labels.insert(eff, l);
            }
            dds.order_vertices.insert(o, (eff, sh));
        }
        // Step 3: sparse entity snapshots.
        let mut active: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &o in &orders {
            let t = g.orders[o as usize].snapshot;
            for e in linked(o) {
                active.entry(e).or_default().push(t);
            }
        }
        let mut entity_vertex: HashMap<(u32, u32), u32> = HashMap::new();
        for (&e, ts) in active.iter_mut() {
            ts.sort_unstable();
            ts.dedup();
            let mut acts = Vec::with_capacity(ts.len());
            for &t in ts.iter() {
                let v = dds.push_vertex(DdsVertexKind::EntitySnapshot, e, t);
                entity_vertex.insert((e, t), v);
                acts.push((t, v));
            }
            dds.activity.insert(e, acts);
        }
        // Step 4: shadow ↔ entity within the same snapshot.
        for &o in &orders {
            let t = g.orders[o as usize].snapshot;
            let sh = dds.order_vertices[&o].1;
            for e in linked(o) {
                let ev = entity_vertex[&(e, t)];
                dds.edges[0].push((sh, ev));
                dds.edges[1].push((ev, sh));
            }
        }
        // Step 5: entity history edges, including self-loops.
        let mut hist = Vec::new();
        for acts in dds.activity.values() {
            for (j, &(t, v)) in acts.iter().enumerate() {
                hist.push((v, v));
                let earlier = &acts[..j];
                match config.history_mode {
                    HistoryMode::Consecutive => {
                        if let Some(&(tp, vp)) = earlier.last() {
                            if config.in_window(tp, t) {
                                hist.push((vp, v));
                            }
                        }
                    }
                    HistoryMode::AllPairs => {
                        for &(tp, vp) in earlier {
                            if config.in_window(tp, t) {
                                hist.push((vp, v));
                            }
                        }
                    }
                }
            }
        }
        dds.edges[2] = hist;
        // Step 6: one edge per entity type from the effective entity.
        for &o in &orders {
            let t = g.orders[o as usize].snapshot;
            let eff = dds.order_vertices[&o].0;
            for e in linked(o) {
                if let Some(src) = dds.effective_entity_of(e, t) {
                    dds.edges[3].push((src, eff));
                }
            }
        }
        Ok(dds)
    }

    /// Whole-graph convenience for [`DdsGraph::build`].
    pub fn build_full(g: &StaticGraph, config: DdsConfig) -> Result<Self> {
        let all: Vec<usize> = (0..g.n_vertices()).collect();
        Self::build(g, &all, config)
    }

    fn push_vertex(&mut self, kind: DdsVertexKind, base: u32, t: u32) -> u32 {
        self.vertices.push(DdsVertex { kind, base, t });
        (self.vertices.len() - 1) as u32
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn vertices(&self) -> &[DdsVertex] {
        &self.vertices
    }

    pub fn vertex(&self, v: u32) -> DdsVertex {
        self.vertices[v as usize]
    }

    /// `(src, dst)` pairs of one edge kind.
    pub fn edges(&self, kind: EdgeKind) -> &[(u32, u32)] {
        &self.edges[kind as usize]
    }

    pub fn labels(&self) -> &BTreeMap<u32, u8> {
        &self.labels
    }

    /// `(effective, shadow)` vertex ids for every order base, ascending by base.
    pub fn order_vertices(&self) -> &BTreeMap<u32, (u32, u32)> {
        &self.order_vertices
    }

    /// Active `(snapshot, vertex)` pairs of an entity, ascending.
    pub fn entity_activity(&self, entity: u32) -> &[(u32, u32)] {
        self.activity.get(&entity).map_or(&[], Vec::as_slice)
    }

    pub fn entities(&self) -> impl Iterator<Item = (u32, &[(u32, u32)])> {
        self.activity.iter().map(|(&e, a)| (e, a.as_slice()))
    }

    /// The entity's latest active snapshot strictly before `t`.
    pub fn effective_entity_of(&self, entity: u32, t: u32) -> Option<u32> {
        let acts = self.activity.get(&entity)?;
        let idx = acts.partition_point(|&(s, _)| s < t);
        idx.checked_sub(1).map(|i| acts[i].1)
    }

    pub fn effective_entity_for_key(
        &self,
        g: &StaticGraph,
        key: &EntityKey,
        t: u32,
    ) -> Option<u32> {
        self.effective_entity_of(g.entity_index(key)?, t)
    }

    /// Appends an edge without any temporal checks. Used to exercise the auditor.
    pub fn push_edge_unchecked(&mut self, kind: EdgeKind, src: u32, dst: u32) {
        self.edges[kind as usize].push((src, dst));
    }

    /// One line per edge: `kind src_t src_base dst_t dst_base`.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        for kind in EdgeKind::ALL {
            for &(s, d) in self.edges(kind) {
                let (s, d) = (self.vertex(s), self.vertex(d));
                writeln!(w, "{kind} {} {} {} {}", s.t, s.base, d.t, d.base)?;
            }
        }
        Ok(())
    }

    const MAGIC: [u8; 4] = *b"DDST";
    const VERSION: u16 = 1;

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, &Self::MAGIC, Self::VERSION)?;
        w.write_u32::<LE>(self.config.history_window.unwrap_or(0))?;
        w.write_u8(match self.config.history_mode {
            HistoryMode::Consecutive => 0,
            HistoryMode::AllPairs => 1,
        })?;
        w.write_u64::<LE>(self.vertices.len() as u64)?;
        for v in &self.vertices {
            w.write_u8(v.kind as u8)?;
            w.write_u32::<LE>(v.base)?;
            w.write_u32::<LE>(v.t)?;
        }
        for list in &self.edges {
            w.write_u64::<LE>(list.len() as u64)?;
            for &(s, d) in list {
                w.write_u32::<LE>(s)?;
                w.write_u32::<LE>(d)?;
            }
        }
        w.write_u64::<LE>(self.labels.len() as u64)?;
        for (&v, &l) in &self.labels {
            w.write_u32::<LE>(v)?;
            w.write_u8(l)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, &Self::MAGIC, Self::VERSION)?;
        let window = r.read_u32::<LE>()?;
        let history_mode = match r.read_u8()? {
            0 => HistoryMode::Consecutive,
            1 => HistoryMode::AllPairs,
            m => return Err(Error::Format(format!("bad history mode {m}"))),
        };
        let mut dds = DdsGraph::empty(DdsConfig {
            history_window: (window > 0).then_some(window),
            history_mode,
        });
        let n = r.read_u64::<LE>()? as usize;
        for _ in 0..n {
            let kind = match r.read_u8()? {
                0 => DdsVertexKind::EffectiveOrder,
                1 => DdsVertexKind::ShadowOrder,
                2 => DdsVertexKind::EntitySnapshot,
                k => return Err(Error::Format(format!("bad vertex kind {k}"))),
            };
            let base = r.read_u32::<LE>()?;
            let t = r.read_u32::<LE>()?;
            let v = dds.push_vertex(kind, base, t);
            match kind {
                DdsVertexKind::EffectiveOrder => {
                    dds.order_vertices
                        .entry(base)
                        .or_insert((u32::MAX, u32::MAX))
                        .0 = v
                }
                DdsVertexKind::ShadowOrder => {
                    dds.order_vertices
                        .entry(base)
                        .or_insert((u32::MAX, u32::MAX))
                        .1 = v
                }
                DdsVertexKind::EntitySnapshot => dds.activity.entry(base).or_default().push((t, v)),
            }
        }
        if dds
            .order_vertices
            .values()
            .any(|&(e, s)| e == u32::MAX || s == u32::MAX)
        {
            return Err(Error::Format(
                "order without both effective and shadow vertex".into(),
            ));
        }
        for acts in dds.activity.values_mut() {
            acts.sort_unstable();
        }
        for list in dds.edges.iter_mut() {
            let m = r.read_u64::<LE>()? as usize;
            list.reserve(m);
            for _ in 0..m {
                let s = r.read_u32::<LE>()?;
                let d = r.read_u32::<LE>()?;
                if s as usize >= n || d as usize >= n {
                    return Err(Error::Format(format!("edge ({s}, {d}) out of range")));
                }
                list.push((s, d));
            }
        }
        let nl = r.read_u64::<LE>()? as usize;
        for _ in 0..nl {
            let v = r.read_u32::<LE>()?;
            let l = r.read_u8()?;
            dds.labels.insert(v, l);
        }
        Ok(dds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Labeled effective order that can see the future.
    pub order: u32,
    /// An ancestor with snapshot ≥ the order's snapshot.
    pub ancestor: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub ok: bool,
    pub checked_orders: usize,
    pub violations: Vec<Violation>,
}

/// Checks that every labeled effective order only has ancestors from
/// strictly earlier snapshots. One violation is reported per offending order.
pub fn audit_no_future(dds: &DdsGraph) -> AuditReport {
    let n = dds.n_vertices();
    // Latest snapshot among each vertex's ancestors (itself included).
    let mut latest: Vec<u32> = dds.vertices.iter().map(|v| v.t).collect();
    loop {
        let mut changed = false;
        for list in &dds.edges {
            for &(s, d) in list {
                if latest[s as usize] > latest[d as usize] {
                    latest[d as usize] = latest[s as usize];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut in_adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for list in &dds.edges {
        for &(s, d) in list {
            in_adj[d as usize].push(s);
        }
    }
    let mut violations = Vec::new();
    for &o in dds.labels.keys() {
        let t = dds.vertex(o).t;
        if in_adj[o as usize].iter().all(|&u| latest[u as usize] < t) {
            continue;
        }
        // Walk back to name the nearest offending ancestor.
        let mut seen = vec![false; n];
        let mut q: VecDeque<u32> = in_adj[o as usize].iter().copied().collect();
        while let Some(u) = q.pop_front() {
            if std::mem::replace(&mut seen[u as usize], true) {
                continue;
            }
            if dds.vertex(u).t >= t {
                violations.push(Violation {
                    order: o,
                    ancestor: u,
                });
                break;
            }
            q.extend(in_adj[u as usize].iter().copied());
        }
    }
    AuditReport {
        ok: violations.is_empty(),
        checked_orders: dds.labels.len(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EntityType, SnapshotIndex, TransactionRecord, DAY_SECONDS};

    fn rec(id: &str, day: i64, email: &str) -> TransactionRecord {
        TransactionRecord {
            order_id: id.into(),
            event_time: day * DAY_SECONDS + 60,
            entities: [(EntityType::Email, email.to_string())]
                .into_iter()
                .collect(),
            features: vec![0.5],
            label: Some(0),
        }
    }

    fn graph(recs: &[TransactionRecord]) -> StaticGraph {
        StaticGraph::build(recs, SnapshotIndex::covering(recs, 0, DAY_SECONDS).unwrap()).unwrap()
    }

    #[test]
    fn single_cold_order_has_no_effective_edge() {
        let g = graph(&[rec("o", 0, "e")]);
        let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
        assert_eq!(dds.n_vertices(), 3);
        assert!(dds.edges(EdgeKind::EffectiveEntityToOrder).is_empty());
        assert!(audit_no_future(&dds).ok);
    }

    #[test]
    fn window_limits_history_but_not_effective_edge() {
        let g = graph(&[rec("a", 0, "e"), rec("b", 5, "e")]);
        let cfg = DdsConfig {
            history_window: Some(3),
            ..Default::default()
        };
        let dds = DdsGraph::build_full(&g, cfg).unwrap();
        let hist: Vec<_> = dds
            .edges(EdgeKind::EntityToEntity)
            .iter()
            .map(|&(s, d)| (dds.vertex(s).t, dds.vertex(d).t))
            .collect();
        assert_eq!(hist, vec![(0, 0), (5, 5)]);
        let eff = dds.edges(EdgeKind::EffectiveEntityToOrder);
        assert_eq!(eff.len(), 1);
        assert_eq!(dds.vertex(eff[0].0).t, 0);
        assert_eq!(dds.vertex(eff[0].1).t, 5);

        let unbounded = DdsGraph::build_full(
            &g,
            DdsConfig {
                history_window: None,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(unbounded.edges(EdgeKind::EntityToEntity).len(), 3);
    }

    #[test]
    fn all_pairs_mode_links_every_earlier_snapshot() {
        let g = graph(&[rec("a", 0, "e"), rec("b", 1, "e"), rec("c", 2, "e")]);
        let cons = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
        let all = DdsGraph::build_full(
            &g,
            DdsConfig {
                history_mode: HistoryMode::AllPairs,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cons.edges(EdgeKind::EntityToEntity).len(), 3 + 2);
        assert_eq!(all.edges(EdgeKind::EntityToEntity).len(), 3 + 3);
    }

    #[test]
    fn effective_entity_is_latest_strictly_prior() {
        let g = graph(&[rec("a", 0, "e"), rec("b", 2, "e")]);
        let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
        let v = dds.effective_entity_of(0, 3).unwrap();
        assert_eq!(dds.vertex(v).t, 2);
        assert_eq!(dds.vertex(dds.effective_entity_of(0, 2).unwrap()).t, 0);
        assert_eq!(dds.effective_entity_of(0, 0), None);
        assert_eq!(dds.effective_entity_of(99, 5), None);
        let key = EntityKey::new(EntityType::Email, "E").unwrap();
        assert_eq!(dds.effective_entity_for_key(&g, &key, 3), Some(v));
    }

    #[test]
    fn empty_partition_gives_empty_graph() {
        let g = graph(&[rec("a", 0, "e")]);
        let dds = DdsGraph::build(&g, &[], DdsConfig::default()).unwrap();
        assert_eq!(dds.n_vertices(), 0);
        let rep = audit_no_future(&dds);
        assert!(rep.ok && rep.checked_orders == 0);
    }

    #[test]
    fn rejects_zero_window() {
        let g = graph(&[rec("a", 0, "e")]);
        let cfg = DdsConfig {
            history_window: Some(0),
            ..Default::default()
        };
        assert!(DdsGraph::build_full(&g, cfg).is_err());
    }

    #[test]
    fn partition_restricts_entities() {
        let g = graph(&[rec("a", 0, "e"), rec("b", 1, "e")]);
        // Only order b and no entity: b has no links inside the part.
        let dds = DdsGraph::build(&g, &[1], DdsConfig::default()).unwrap();
        assert_eq!(dds.n_vertices(), 2);
        assert_eq!(dds.n_edges(), 0);
    }

    #[test]
    fn binary_and_text_round_trip() {
        let g = graph(&[rec("a", 0, "e"), rec("b", 1, "e")]);
        let dds = DdsGraph::build_full(&g, DdsConfig::default()).unwrap();
        let mut buf = Vec::new();
        dds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DDST");
        assert_eq!(DdsGraph::read_from(&mut buf.as_slice()).unwrap(), dds);
        let mut text = Vec::new();
        dds.write_text(&mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        assert!(text.contains("effective_entity_to_order 0 0 1 1\n"));
        assert_eq!(text.lines().count(), dds.n_edges());
    }
}

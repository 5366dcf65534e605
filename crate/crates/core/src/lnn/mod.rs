//! The two-stage Lambda Neural Network.
//!
//! Stage 1 runs every GNN layer but the last over shadow orders and entity
//! snapshots. Stage 2 is the final layer over effective-entity → order edges
//! followed by an MLP on `concat(order features, stage-2 output)`. Because
//! an effective order's only graph inputs are its effective entities, stage 1
//! can be materialized ahead of time and stage 2 evaluated from lookups.

mod train;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::OnceLock;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec;
use crate::dds::{DdsConfig, DdsGraph, DdsVertexKind, EdgeKind};
use crate::error::{Error, Result};
use crate::eval::GbdtModel;
use crate::ingest::{EntityKey, EntityType, StaticGraph, TransactionRecord};
use crate::nn::{sigmoid, EdgeIndex, GnnLayer, LayerKind, Mlp, ParamStore, Tape, Tensor, Var};

pub use train::{train, EpochRecord, PosWeight, TrainConfig, TrainHistory};

const MAGIC: &[u8; 4] = b"DDSM";
const VERSION: u16 = 1;

/// Which order features feed the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Raw,
    /// Per-tree GBDT margins only.
    Gbdt,
    /// Raw features followed by per-tree GBDT margins.
    RawAndGbdt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LnnConfig {
    pub layer_kind: LayerKind,
    /// Total GNN layers; stage 1 holds all but the last.
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Hidden widths of the head; the output width 1 is implied.
    pub head_dims: Vec<usize>,
    pub feature_mode: FeatureMode,
    pub dds: DdsConfig,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for LnnConfig {
    fn default() -> Self {
        LnnConfig {
            layer_kind: LayerKind::Gcn,
            n_layers: 2,
            hidden_dim: 64,
            head_dims: vec![64, 32],
            feature_mode: FeatureMode::Raw,
            dds: DdsConfig::default(),
            seed: 0,
        }
    }
}

impl LnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.head_dims.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        self.dds.validate()
    }
}

/// An entity's stage-1 state at its latest active snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityEmbedding {
    pub key: EntityKey,
    pub vector: Vec<f64>,
    pub snapshot: u32,
    pub model_version: u64,
}

/// Row layout of a DDS graph for the model: stage-1 rows are shadow orders
/// and entity snapshots, stage-2 rows are effective orders ascending by base.
#[derive(Clone, Debug)]
pub struct LnnGraph {
    stage1_vertices: Vec<u32>,
    stage1_row: Vec<u32>,
    stage1_edges: Vec<EdgeIndex>,
    order_bases: Vec<u32>,
    order_snapshots: Vec<u32>,
    order_labels: Vec<Option<u8>>,
    stage2_edges: EdgeIndex,
}

const NO_ROW: u32 = u32::MAX;

impl LnnGraph {
    pub fn new(dds: &DdsGraph) -> Result<Self> {
        let mut stage1_row = vec![NO_ROW; dds.n_vertices()];
        let mut stage1_vertices = Vec::new();
        for (v, vx) in dds.vertices().iter().enumerate() {
            if vx.kind != DdsVertexKind::EffectiveOrder {
                stage1_row[v] = stage1_vertices.len() as u32;
                stage1_vertices.push(v as u32);
            }
        }
        let n1 = stage1_vertices.len();
        let remap = |kind: EdgeKind| -> Result<EdgeIndex> {
            let pairs: Vec<(u32, u32)> = dds
                .edges(kind)
                .iter()
                .map(|&(s, d)| (stage1_row[s as usize], stage1_row[d as usize]))
                .collect();
            if pairs.iter().any(|&(s, d)| s == NO_ROW || d == NO_ROW) {
                return Err(Error::Invalid(format!(
                    "{kind} edge touches an effective order"
                )));
            }
            EdgeIndex::from_pairs(&pairs, n1)
        };
        let stage1_edges = [
            EdgeKind::ShadowToEntity,
            EdgeKind::EntityToShadow,
            EdgeKind::EntityToEntity,
        ]
        .into_iter()
        .map(remap)
        .collect::<Result<Vec<_>>>()?;

        let mut order_row = vec![NO_ROW; dds.n_vertices()];
        let mut order_bases = Vec::new();
        let mut order_snapshots = Vec::new();
        let mut order_labels = Vec::new();
        for (&base, &(eff, _)) in dds.order_vertices() {
            order_row[eff as usize] = order_bases.len() as u32;
            order_bases.push(base);
            order_snapshots.push(dds.vertex(eff).t);
            order_labels.push(dds.labels().get(&eff).copied());
        }
        let pairs: Vec<(u32, u32)> = dds
            .edges(EdgeKind::EffectiveEntityToOrder)
            .iter()
            .map(|&(s, d)| (stage1_row[s as usize], order_row[d as usize]))
            .collect();
        if pairs.iter().any(|&(s, d)| s == NO_ROW || d == NO_ROW) {
            return Err(Error::Invalid(
                "effective edge does not join an entity to an order".into(),
            ));
        }
        let stage2_edges = EdgeIndex::from_pairs(&pairs, order_bases.len())?;
        Ok(LnnGraph {
            stage1_vertices,
            stage1_row,
            stage1_edges,
            order_bases,
            order_snapshots,
            order_labels,
            stage2_edges,
        })
    }

    pub fn n_stage1(&self) -> usize {
        self.stage1_vertices.len()
    }

    pub fn n_orders(&self) -> usize {
        self.order_bases.len()
    }

    /// DDS vertex id of each stage-1 row.
    pub fn stage1_vertices(&self) -> &[u32] {
        &self.stage1_vertices
    }

    pub fn stage1_row(&self, dds_vertex: u32) -> Option<usize> {
        match self.stage1_row.get(dds_vertex as usize) {
            Some(&r) if r != NO_ROW => Some(r as usize),
            _ => None,
        }
    }

    /// Static-graph order index of each stage-2 row.
    pub fn order_bases(&self) -> &[u32] {
        &self.order_bases
    }

    pub fn order_snapshots(&self) -> &[u32] {
        &self.order_snapshots
    }

    pub fn order_labels(&self) -> &[Option<u8>] {
        &self.order_labels
    }

    pub fn order_row(&self, base: u32) -> Option<usize> {
        self.order_bases.binary_search(&base).ok()
    }
}

/// Initial node states for one [`LnnGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct LnnInputs {
    /// Shadow orders carry their order features, entities a constant.
    pub stage1: Tensor,
    pub orders: Tensor,
}

impl LnnInputs {
    /// `features` holds one row per static-graph order. Entity rows are
    /// filled with `entity_init` (zero in the model proper).
    pub fn new(
        graph: &LnnGraph,
        dds: &DdsGraph,
        features: &Tensor,
        entity_init: f64,
    ) -> Result<Self> {
        let d = features.cols();
        let row_of = |base: u32| -> Result<&[f64]> {
            if base as usize >= features.rows() {
                return Err(Error::Shape(format!("no feature row for order {base}")));
            }
            Ok(features.row(base as usize))
        };
        let mut stage1 = Tensor::zeros(graph.n_stage1(), d);
        for (r, &v) in graph.stage1_vertices.iter().enumerate() {
            let vx = dds.vertex(v);
            if vx.kind == DdsVertexKind::ShadowOrder {
                stage1.row_mut(r).copy_from_slice(row_of(vx.base)?);
            } else {
                stage1.row_mut(r).iter_mut().for_each(|x| *x = entity_init);
            }
        }
        let mut orders = Tensor::zeros(graph.n_orders(), d);
        for (r, &base) in graph.order_bases.iter().enumerate() {
            orders.row_mut(r).copy_from_slice(row_of(base)?);
        }
        Ok(LnnInputs { stage1, orders })
    }
}

#[derive(Clone, Debug)]
pub struct LnnModel {
    pub config: LnnConfig,
    /// Raw feature width of incoming records.
    pub d_raw: usize,
    /// Width of the encoded order features the network sees.
    pub d_in: usize,
    encoder: Option<GbdtModel>,
    params: ParamStore,
    stage1: Vec<GnnLayer>,
    stage2: GnnLayer,
    head: Mlp,
    version: OnceLock<u64>,
}

impl LnnModel {
    pub fn new(config: LnnConfig, d_raw: usize, encoder: Option<GbdtModel>) -> Result<Self> {
        config.validate()?;
        let d_in = match (config.feature_mode, &encoder) {
            (FeatureMode::Raw, None) => d_raw,
            (FeatureMode::Raw, Some(_)) => {
                return Err(Error::Config("raw feature mode takes no encoder".into()));
            }
            (_, None) => return Err(Error::Config("gbdt feature mode needs an encoder".into())),
            (mode, Some(enc)) => {
                if enc.n_features != d_raw {
                    return Err(Error::Shape(format!(
                        "encoder expects {} features, records have {d_raw}",
                        enc.n_features
                    )));
                }
                let extra = if mode == FeatureMode::RawAndGbdt {
                    d_raw
                } else {
                    0
                };
                enc.trees.len() + extra
            }
        };
        if d_in == 0 {
            return Err(Error::Config("order feature width is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (kind, h) = (config.layer_kind, config.hidden_dim);
        let n1 = config.n_layers - 1;
        let stage1: Vec<GnnLayer> = (0..n1)
            .map(|i| {
                let d = if i == 0 { d_in } else { h };
                GnnLayer::new(
                    &mut params,
                    &format!("stage1.{i}"),
                    kind,
                    d,
                    d,
                    h,
                    3,
                    &mut rng,
                )
            })
            .collect();
        let d_emb = if n1 == 0 { d_in } else { h };
        let stage2 = GnnLayer::new(&mut params, "stage2", kind, d_in, d_emb, h, 1, &mut rng);
        let mut dims = vec![d_in + h];
        dims.extend_from_slice(&config.head_dims);
        dims.push(1);
        let head = Mlp::new(&mut params, "head", &dims, &mut rng);
        Ok(LnnModel {
            config,
            d_raw,
            d_in,
            encoder,
            params,
            stage1,
            stage2,
            head,
            version: OnceLock::new(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; invalidates the cached model version.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.version = OnceLock::new();
        &mut self.params
    }

    pub fn encoder(&self) -> Option<&GbdtModel> {
        self.encoder.as_ref()
    }

    /// Width of entity embeddings (stage-1 output).
    pub fn embedding_dim(&self) -> usize {
        self.stage2.d_nbr
    }

    /// Maps raw record features to the model's input space.
    pub fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.d_raw {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                self.d_raw,
                raw.len()
            )));
        }
        Ok(match (self.config.feature_mode, &self.encoder) {
            (FeatureMode::Gbdt, Some(enc)) => enc.encode(raw),
            (FeatureMode::RawAndGbdt, Some(enc)) => {
                let mut v = raw.to_vec();
                v.extend(enc.encode(raw));
                v
            }
            _ => raw.to_vec(),
        })
    }

    /// Encoded features, one row per static-graph order.
    pub fn order_features(&self, g: &StaticGraph) -> Result<Tensor> {
        let mut data = Vec::with_capacity(g.n_orders() * self.d_in);
        for o in &g.orders {
            data.extend(self.encode(&o.features)?);
        }
        Tensor::new(g.n_orders(), self.d_in, data)
    }

    fn stage1_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        graph: &LnnGraph,
        inputs: &LnnInputs,
    ) -> Result<Var> {
        let mut h = tape.constant(inputs.stage1.clone())?;
        for layer in &self.stage1 {
            h = layer.forward(tape, p, h, h, &graph.stage1_edges)?;
        }
        Ok(h)
    }

    /// Logits (n×1) for the given stage-2 rows, or all rows.
    pub(crate) fn logits_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        graph: &LnnGraph,
        inputs: &LnnInputs,
        rows: Option<Rc<[u32]>>,
    ) -> Result<Var> {
        let h1 = self.stage1_tape(tape, p, graph, inputs)?;
        let x = tape.constant(inputs.orders.clone())?;
        let z = self
            .stage2
            .forward(tape, p, x, h1, std::slice::from_ref(&graph.stage2_edges))?;
        let mut cat = tape.concat_cols(x, z)?;
        if let Some(rows) = rows {
            cat = tape.gather(cat, rows)?;
        }
        self.head.forward(tape, p, cat)
    }

    /// Scores for every stage-2 row of `graph`.
    pub fn forward_inputs(&self, graph: &LnnGraph, inputs: &LnnInputs) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let logits = self.logits_tape(&mut tape, &p, graph, inputs, None)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect())
    }

    /// Monolithic scores of the requested orders (static-graph indices).
    pub fn forward_full(
        &self,
        dds: &DdsGraph,
        features: &Tensor,
        orders: &[u32],
    ) -> Result<Vec<f64>> {
        let graph = LnnGraph::new(dds)?;
        let inputs = LnnInputs::new(&graph, dds, features, 0.0)?;
        let all = self.forward_inputs(&graph, &inputs)?;
        orders
            .iter()
            .map(|&o| {
                graph
                    .order_row(o)
                    .map(|r| all[r])
                    .ok_or_else(|| Error::Invalid(format!("order {o} is not in the graph")))
            })
            .collect()
    }

    /// Stage-1 node states, one row per stage-1 row of `graph`.
    pub fn stage1_states(&self, graph: &LnnGraph, inputs: &LnnInputs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let h = self.stage1_tape(&mut tape, &p, graph, inputs)?;
        Ok(tape.value(h).clone())
    }

    /// Runs stage 1 and emits each entity's state at its latest active
    /// snapshot, or its latest snapshot strictly before `as_of` when given.
    /// Entities with no qualifying snapshot are omitted. Output is ordered
    /// by entity index.
    pub fn infer_entity_embeddings(
        &self,
        g: &StaticGraph,
        dds: &DdsGraph,
        as_of: Option<u32>,
    ) -> Result<Vec<EntityEmbedding>> {
        let graph = LnnGraph::new(dds)?;
        let features = self.order_features(g)?;
        let inputs = LnnInputs::new(&graph, dds, &features, 0.0)?;
        let states = self.stage1_states(&graph, &inputs)?;
        let version = self.version();
        let mut out = Vec::new();
        for (e, acts) in dds.entities() {
            let chosen = match as_of {
                None => acts.last().copied(),
                Some(t) => acts.iter().rev().find(|&&(s, _)| s < t).copied(),
            };
            let Some((snapshot, v)) = chosen else {
                continue;
            };
            let row = graph
                .stage1_row(v)
                .expect("entity snapshots are stage-1 rows");
            out.push(EntityEmbedding {
                key: g.entities[e as usize].clone(),
                vector: states.row(row).to_vec(),
                snapshot,
                model_version: version,
            });
        }
        Ok(out)
    }

    /// Stage 2 from store lookups: one optional embedding per entity type.
    /// Missing types are absent neighbors; no lookups at all is the cold path.
    pub fn score_with_store(
        &self,
        order: &TransactionRecord,
        lookups: &[(EntityType, Option<EntityEmbedding>)],
    ) -> Result<f64> {
        let mut present: BTreeMap<EntityType, &[f64]> = BTreeMap::new();
        let mut seen = Vec::with_capacity(lookups.len());
        let version = self.version();
        for (t, emb) in lookups {
            if seen.contains(t) {
                return Err(Error::Invalid(format!(
                    "duplicate entity type {t} in lookups"
                )));
            }
            seen.push(*t);
            if let Some(emb) = emb {
                if emb.model_version != version {
                    return Err(Error::VersionMismatch {
                        expected: version,
                        found: emb.model_version,
                    });
                }
                present.insert(*t, &emb.vector);
            }
        }
        let x = self.encode(&order.features)?;
        let nbrs: Vec<&[f64]> = present.into_values().collect();
        self.score_encoded(&x, &nbrs)
    }

    /// Stage 2 on encoded order features and neighbor embeddings, in the
    /// order the monolithic graph lists them (by entity type).
    pub fn score_encoded(&self, x: &[f64], nbrs: &[&[f64]]) -> Result<f64> {
        let d = self.embedding_dim();
        if let Some(bad) = nbrs.iter().find(|v| v.len() != d) {
            return Err(Error::Shape(format!(
                "embedding width {} vs model {d}",
                bad.len()
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let xv = tape.constant(Tensor::new(1, x.len(), x.to_vec())?)?;
        let h = tape.constant(Tensor::new(nbrs.len(), d, nbrs.concat())?)?;
        let pairs: Vec<(u32, u32)> = (0..nbrs.len() as u32).map(|i| (i, 0)).collect();
        let edges = EdgeIndex::from_pairs(&pairs, 1)?;
        let z = self
            .stage2
            .forward(&mut tape, &p, xv, h, std::slice::from_ref(&edges))?;
        let cat = tape.concat_cols(xv, z)?;
        let logit = self.head.forward(&mut tape, &p, cat)?;
        Ok(sigmoid(tape.value(logit).data()[0]))
    }

    /// Checksum of the serialized checkpoint; embeddings carry it so stale
    /// stores are detected.
    pub fn version(&self) -> u64 {
        *self.version.get_or_init(|| {
            let mut buf = Vec::new();
            self.write_to(&mut buf)
                .expect("writing to memory cannot fail");
            let digest = Sha256::digest(&buf);
            u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, MAGIC, VERSION)?;
        codec::write_str(w, &serde_json::to_string(&self.config)?)?;
        w.write_u64::<LE>(self.d_raw as u64)?;
        let enc = match &self.encoder {
            Some(e) => serde_json::to_string(e)?,
            None => String::new(),
        };
        codec::write_str(w, &enc)?;
        w.write_u32::<LE>(self.params.len() as u32)?;
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            codec::write_str(w, name)?;
            w.write_u32::<LE>(t.rows() as u32)?;
            w.write_u32::<LE>(t.cols() as u32)?;
            codec::write_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, MAGIC, VERSION)?;
        let config: LnnConfig = serde_json::from_str(&codec::read_str(r)?)?;
        let d_raw = r.read_u64::<LE>()? as usize;
        let enc = codec::read_str(r)?;
        let encoder = if enc.is_empty() {
            None
        } else {
            Some(serde_json::from_str(&enc)?)
        };
        let mut model = LnnModel::new(config, d_raw, encoder)?;
        let n = r.read_u32::<LE>()? as usize;
        if n != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} tensors, model needs {}",
                model.params.len()
            )));
        }
        for i in 0..n {
            let name = codec::read_str(r)?;
            let rows = r.read_u32::<LE>()? as usize;
            let cols = r.read_u32::<LE>()? as usize;
            let expected = &model.params.names()[i];
            if &name != expected || model.params.get(i).shape() != (rows, cols) {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} ({rows}x{cols}) does not match {expected}"
                )));
            }
            let data = codec::read_f64s(r, rows * cols)?;
            let t = Tensor::new(rows, cols, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite("checkpoint"));
            }
            *model.params.get_mut(i) = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

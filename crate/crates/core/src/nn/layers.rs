use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Directed edges of one kind, in destination-segment form.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Rc<[u32]>,
    pub dst: Rc<[u32]>,
    pub n_dst: usize,
    counts: Rc<[u32]>,
    inv_counts: Rc<[f64]>,
}

impl EdgeIndex {
    pub fn new(src: Vec<u32>, dst: Vec<u32>, n_dst: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Shape("edge src/dst length differ".into()));
        }
        let mut counts = vec![0u32; n_dst];
        for &d in &dst {
            *counts
                .get_mut(d as usize)
                .ok_or_else(|| Error::Shape(format!("edge dst {d} of {n_dst}")))? += 1;
        }
        let inv_counts: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        Ok(EdgeIndex {
            src: src.into(),
            dst: dst.into(),
            n_dst,
            counts: counts.into(),
            inv_counts: inv_counts.into(),
        })
    }

    pub fn from_pairs(pairs: &[(u32, u32)], n_dst: usize) -> Result<Self> {
        let (src, dst) = pairs.iter().copied().unzip();
        Self::new(src, dst, n_dst)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// In-degree per destination.
    pub fn in_degree(&self, v: usize) -> usize {
        self.counts[v] as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    Gat,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Gat => "gat",
        })
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "gat" => Ok(LayerKind::Gat),
            _ => Err(Error::Invalid(format!("unknown layer kind `{s}`"))),
        }
    }
}

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

/// One typed message-passing layer.
///
/// GCN: `h'_v = ReLU(W_self·h_v + Σ_k W_k·mean_{u∈N_k(v)} h_u + b)`.
///
/// GAT replaces each mean with attention weights
/// `softmax_u LeakyReLU(a_src·(W_k h_u) + a_dst·(W_self h_v))`.
/// Destinations and sources may live in different row spaces with
/// different widths (`d_self` vs `d_nbr`).
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub kind: LayerKind,
    pub d_self: usize,
    pub d_nbr: usize,
    pub d_out: usize,
    pub negative_slope: f64,
    w_self: usize,
    w_nbr: Vec<usize>,
    bias: usize,
    attention: Option<(usize, usize)>,
}

impl GnnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: LayerKind,
        d_self: usize,
        d_nbr: usize,
        d_out: usize,
        n_edge_kinds: usize,
        rng: &mut R,
    ) -> Self {
        let w_self = store.add(format!("{name}.w_self"), Tensor::glorot(d_self, d_out, rng));
        let w_nbr = (0..n_edge_kinds)
            .map(|k| {
                store.add(
                    format!("{name}.w_nbr{k}"),
                    Tensor::glorot(d_nbr, d_out, rng),
                )
            })
            .collect();
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out));
        let attention = (kind == LayerKind::Gat).then(|| {
            (
                store.add(format!("{name}.att_src"), Tensor::glorot(d_out, 1, rng)),
                store.add(format!("{name}.att_dst"), Tensor::glorot(d_out, 1, rng)),
            )
        });
        GnnLayer {
            kind,
            d_self,
            d_nbr,
            d_out,
            negative_slope: GAT_NEGATIVE_SLOPE,
            w_self,
            w_nbr,
            bias,
            attention,
        }
    }

    pub fn n_edge_kinds(&self) -> usize {
        self.w_nbr.len()
    }

    pub fn w_self_index(&self) -> usize {
        self.w_self
    }

    pub fn w_nbr_index(&self, k: usize) -> usize {
        self.w_nbr[k]
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn attention_indices(&self) -> Option<(usize, usize)> {
        self.attention
    }

    /// `h_dst` holds destination rows, `h_src` source rows; `edges[k]` indexes into them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h_dst: Var,
        h_src: Var,
        edges: &[EdgeIndex],
    ) -> Result<Var> {
        if edges.len() != self.w_nbr.len() {
            return Err(Error::Shape(format!(
                "layer expects {} edge kinds, got {}",
                self.w_nbr.len(),
                edges.len()
            )));
        }
        let (n_dst, c_dst) = tape.value(h_dst).shape();
        let c_src = tape.value(h_src).cols();
        if c_dst != self.d_self || c_src != self.d_nbr {
            return Err(Error::Shape(format!(
                "layer expects widths ({}, {}), got ({c_dst}, {c_src})",
                self.d_self, self.d_nbr
            )));
        }
        let self_term = tape.matmul(h_dst, p[self.w_self])?;
        let mut acc = self_term;
        for (k, e) in edges.iter().enumerate() {
            if e.n_dst != n_dst {
                return Err(Error::Shape(format!(
                    "edge kind {k} targets {} rows, have {n_dst}",
                    e.n_dst
                )));
            }
            if e.is_empty() {
                continue;
            }
            let agg = match self.attention {
                None => {
                    let proj = tape.matmul(h_src, p[self.w_nbr[k]])?;
                    let msg = tape.gather(proj, e.src.clone())?;
                    tape.segment_mean(msg, e.dst.clone(), e.inv_counts.clone())?
                }
                Some((a_src, a_dst)) => {
                    let proj = tape.matmul(h_src, p[self.w_nbr[k]])?;
                    let s_src = tape.matmul(proj, p[a_src])?;
                    let s_dst = tape.matmul(self_term, p[a_dst])?;
                    let gs = tape.gather(s_src, e.src.clone())?;
                    let gd = tape.gather(s_dst, e.dst.clone())?;
                    let logit = tape.add(gs, gd)?;
                    let logit = tape.leaky_relu(logit, self.negative_slope)?;
                    let alpha = tape.segment_softmax(logit, e.dst.clone())?;
                    let msg = tape.gather(proj, e.src.clone())?;
                    let msg = tape.scale_rows(msg, alpha)?;
                    tape.segment_sum(msg, e.dst.clone(), n_dst)?
                }
            };
            acc = tape.add(acc, agg)?;
        }
        let pre = tape.add_bias(acc, p[self.bias])?;
        tape.relu(pre)
    }
}

/// Affine → ReLU stack ending in a single un-activated logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// `dims` = input width, hidden widths..., output width.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add(format!("{name}.{i}.w"), Tensor::glorot(w[0], w[1], rng)),
                    store.add(format!("{name}.{i}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Mlp {
            dims: dims.to_vec(),
            layers,
        }
    }

    pub fn layer_indices(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, p[w])?;
            h = tape.add_bias(z, p[b])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

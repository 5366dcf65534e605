//! Reverse-mode differentiation over the small operator set the GNN needs.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gather(Var, Rc<[u32]>),
    SegmentMean {
        src: Var,
        seg: Rc<[u32]>,
        inv_counts: Rc<[f64]>,
    },
    SegmentSum {
        src: Var,
        seg: Rc<[u32]>,
    },
    SegmentSoftmax {
        src: Var,
        seg: Rc<[u32]>,
    },
    ScaleRows(Var, Var),
    ConcatCols(Var, Var),
    Bce {
        logits: Var,
        labels: Rc<[f64]>,
        pos_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::ScaleRows(a, b)
            | Op::ConcatCols(a, b) => self.rg(*a) || self.rg(*b),
            Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Gather(a, _) => self.rg(*a),
            Op::SegmentMean { src, .. }
            | Op::SegmentSum { src, .. }
            | Op::SegmentSoftmax { src, .. } => self.rg(*src),
            Op::Bce { logits, .. } => self.rg(*logits),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// A trainable input; gradients flow back to it.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a + bias` with `bias` a 1×m row broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|x| *x = if *x > 0.0 { *x } else { slope * *x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// Selects rows `idx` of `a`.
    pub fn gather(&mut self, a: Var, idx: Rc<[u32]>) -> Result<Var> {
        let ta = self.value(a);
        let mut out = Tensor::zeros(idx.len(), ta.cols());
        for (r, &i) in idx.iter().enumerate() {
            let i = i as usize;
            if i >= ta.rows() {
                return Err(Error::Shape(format!("gather row {i} of {}", ta.rows())));
            }
            out.row_mut(r).copy_from_slice(ta.row(i));
        }
        self.push(out, Op::Gather(a, idx), "gather")
    }

    /// Row `e` of `src` is averaged into output row `seg[e]`. Output rows
    /// without inputs are zero. `inv_counts[r]` must be 1/|{e : seg[e] = r}|.
    pub fn segment_mean(&mut self, src: Var, seg: Rc<[u32]>, inv_counts: Rc<[f64]>) -> Result<Var> {
        let ts = self.value(src);
        let mut out = Self::scatter(ts, &seg, inv_counts.len())?;
        for (r, &w) in inv_counts.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= w);
        }
        self.push(
            out,
            Op::SegmentMean {
                src,
                seg,
                inv_counts,
            },
            "segment_mean",
        )
    }

    pub fn segment_sum(&mut self, src: Var, seg: Rc<[u32]>, n_out: usize) -> Result<Var> {
        let out = Self::scatter(self.value(src), &seg, n_out)?;
        self.push(out, Op::SegmentSum { src, seg }, "segment_sum")
    }

    fn scatter(ts: &Tensor, seg: &[u32], n_out: usize) -> Result<Tensor> {
        if seg.len() != ts.rows() {
            return Err(Error::Shape(format!(
                "segment of {} rows for {} ids",
                ts.rows(),
                seg.len()
            )));
        }
        let mut out = Tensor::zeros(n_out, ts.cols());
        for (e, &r) in seg.iter().enumerate() {
            let r = r as usize;
            if r >= n_out {
                return Err(Error::Shape(format!("segment id {r} of {n_out}")));
            }
            for (o, &x) in out.row_mut(r).iter_mut().zip(ts.row(e)) {
                *o += x;
            }
        }
        Ok(out)
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, src: Var, seg: Rc<[u32]>) -> Result<Var> {
        let ts = self.value(src);
        if ts.cols() != 1 || seg.len() != ts.rows() {
            return Err(Error::Shape("segment_softmax expects an Ex1 column".into()));
        }
        let n_seg = seg.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (e, &s) in seg.iter().enumerate() {
            max[s as usize] = max[s as usize].max(ts.data()[e]);
        }
        let mut out: Vec<f64> = seg
            .iter()
            .enumerate()
            .map(|(e, &s)| (ts.data()[e] - max[s as usize]).exp())
            .collect();
        let mut sum = vec![0.0; n_seg];
        for (e, &s) in seg.iter().enumerate() {
            sum[s as usize] += out[e];
        }
        for (e, &s) in seg.iter().enumerate() {
            out[e] /= sum[s as usize];
        }
        let out = Tensor::new(seg.len(), 1, out)?;
        self.push(out, Op::SegmentSoftmax { src, seg }, "segment_softmax")
    }

    /// Multiplies row `e` of `a` by the scalar `w[e]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(shape_err("scale_rows", ta.shape(), tw.shape()));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let s = tw.data()[i];
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        self.push(out, Op::ScaleRows(a, w), "scale_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for i in 0..ta.rows() {
            let row = out.row_mut(i);
            row[..ta.cols()].copy_from_slice(ta.row(i));
            row[ta.cols()..].copy_from_slice(tb.row(i));
        }
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Weighted binary cross-entropy on an n×1 logit column, averaged over rows.
    pub fn bce(&mut self, logits: Var, labels: Rc<[f64]>, pos_weight: f64) -> Result<Var> {
        let tz = self.value(logits);
        if tz.cols() != 1 || tz.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "bce: {}x{} logits for {} labels",
                tz.rows(),
                tz.cols(),
                labels.len()
            )));
        }
        let loss = bce_value(tz.data(), &labels, pos_weight)?;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels,
                pos_weight,
            },
            "bce",
        )
    }

    /// Gradients of the scalar `root` w.r.t. every node that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul(&self.value(*b).transpose()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).transpose().matmul(&g), &mut grads);
                    }
                }
                Op::AddBias(a, b) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (x, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    for (x, &y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if y <= 0.0 {
                            *x *= slope;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Gather(a, idx) => {
                    let ta = self.value(*a);
                    let mut d = Tensor::zeros(ta.rows(), ta.cols());
                    for (r, &j) in idx.iter().enumerate() {
                        for (o, &x) in d.row_mut(j as usize).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SegmentMean {
                    src,
                    seg,
                    inv_counts,
                } => {
                    let ts = self.value(*src);
                    let mut d = Tensor::zeros(ts.rows(), ts.cols());
                    for (e, &r) in seg.iter().enumerate() {
                        let w = inv_counts[r as usize];
                        for (o, &x) in d.row_mut(e).iter_mut().zip(g.row(r as usize)) {
                            *o = x * w;
                        }
                    }
                    acc(*src, d, &mut grads);
                }
                Op::SegmentSum { src, seg } => {
                    let ts = self.value(*src);
                    let mut d = Tensor::zeros(ts.rows(), ts.cols());
                    for (e, &r) in seg.iter().enumerate() {
                        d.row_mut(e).copy_from_slice(g.row(r as usize));
                    }
                    acc(*src, d, &mut grads);
                }
                Op::SegmentSoftmax { src, seg } => {
                    let y = node.value.data();
                    let n_seg = seg.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
                    let mut dot = vec![0.0; n_seg];
                    for (e, &s) in seg.iter().enumerate() {
                        dot[s as usize] += y[e] * g.data()[e];
                    }
                    let d: Vec<f64> = seg
                        .iter()
                        .enumerate()
                        .map(|(e, &s)| y[e] * (g.data()[e] - dot[s as usize]))
                        .collect();
                    acc(*src, Tensor::new(seg.len(), 1, d)?, &mut grads);
                }
                Op::ScaleRows(a, w) => {
                    let (ta, tw) = (self.value(*a), self.value(*w));
                    if self.rg(*w) {
                        let dw: Vec<f64> = (0..ta.rows())
                            .map(|i| ta.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum())
                            .collect();
                        acc(*w, Tensor::new(ta.rows(), 1, dw)?, &mut grads);
                    }
                    let mut da = g;
                    for i in 0..da.rows() {
                        let s = tw.data()[i];
                        da.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(*a, da, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Tensor::zeros(g.rows(), ca);
                    let mut db = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Bce {
                    logits,
                    labels,
                    pos_weight,
                } => {
                    let z = self.value(*logits).data();
                    let dz = bce_grad(z, labels, *pos_weight);
                    let scale = g.data()[0];
                    let d: Vec<f64> = dz.into_iter().map(|x| x * scale).collect();
                    acc(*logits, Tensor::new(z.len(), 1, d)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], readable for parameter leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros of `shape` if unreached.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Mean of `pos_weight·y·softplus(−z) + (1−y)·softplus(z)`.
pub fn bce_value(logits: &[f64], labels: &[f64], pos_weight: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Invalid("bce on empty input".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(
            "bce: logits and labels differ in length".into(),
        ));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// d(bce)/d(logit) for each row.
pub fn bce_grad(logits: &[f64], labels: &[f64], pos_weight: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = sigmoid(z);
            (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n
        })
        .collect()
}

/// Loss and logit gradient in one call.
pub fn bce_loss(logits: &[f64], labels: &[f64], pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    let loss = bce_value(logits, labels, pos_weight)?;
    Ok((loss, bce_grad(logits, labels, pos_weight)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_analytic_points() {
        let (l, _) = bce_loss(&[0.0], &[1.0], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, g) = bce_loss(&[40.0], &[1.0], 1.0).unwrap();
        assert!(l < 1e-17 && l >= 0.0 && g[0].is_finite());
        let (l, _) = bce_loss(&[-40.0], &[1.0], 1.0).unwrap();
        assert!((l - 40.0).abs() < 1e-12);
        let (l, _) = bce_loss(&[-1000.0, 1000.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
        assert!(bce_loss(&[], &[], 1.0).is_err());
        assert!(bce_loss(&[0.0], &[0.5], 1.0).is_err());
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.gen_range(1..6);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let pw = rng.gen_range(0.5..5.0);
            let (_, g) = bce_loss(&z, &y, pw).unwrap();
            for i in 0..n {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let num =
                    (bce_value(&zp, &y, pw).unwrap() - bce_value(&zm, &y, pw).unwrap()) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs());
                assert!(rel < 1e-6, "rel err {rel}");
            }
        }
    }

    #[test]
    fn non_finite_trips_error() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let a = tape.constant(Tensor::scalar(1e300)).unwrap();
        let b = tape.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::NonFinite("matmul"))));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        assert!(tape.concat_cols(a, b).is_ok());
        let c = tape.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(tape.add_bias(a, c).is_err());
    }

    #[test]
    fn segment_softmax_groups() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(3, 1, vec![0.3, 0.3, 5.0]).unwrap())
            .unwrap();
        let y = tape.segment_softmax(x, vec![0, 0, 1].into()).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 1.0]);
    }
}

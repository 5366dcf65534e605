//! Small gradient-boosted regression trees on logistic loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_trees: 50,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 5,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("gbdt learning_rate must be in (0, 1]".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("gbdt min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in preorder; node 0 is the root. `x[feature] <= threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_features: usize,
    pub learning_rate: f64,
    /// Prior log-odds of the training labels.
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

const PRIOR_CLAMP: f64 = 1e-9;

impl GbdtModel {
    /// Fits on row-major features `x` (one row per sample). Returns the model
    /// and the training log-loss after each round (index 0 is the prior).
    pub fn fit(x: &[Vec<f64>], y: &[u8], cfg: &GbdtConfig) -> Result<(GbdtModel, Vec<f64>)> {
        cfg.validate()?;
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Shape(format!(
                "gbdt fit on {} rows, {} labels",
                x.len(),
                y.len()
            )));
        }
        let n_features = x[0].len();
        if x.iter().any(|r| r.len() != n_features) {
            return Err(Error::Shape("ragged gbdt feature rows".into()));
        }
        let n_pos = y.iter().filter(|&&l| l == 1).count();
        let prior = (n_pos as f64 / y.len() as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
        let mut model = GbdtModel {
            n_features,
            learning_rate: cfg.learning_rate,
            base_score: (prior / (1.0 - prior)).ln(),
            trees: Vec::new(),
        };
        let mut margin = vec![model.base_score; x.len()];
        let mut history = vec![logloss(&margin, y)];
        if n_pos == 0 || n_pos == y.len() {
            log::warn!("gbdt training data has a single class; using the prior only");
            return Ok((model, history));
        }
        let cols: Vec<Vec<f64>> = (0..n_features)
            .map(|f| x.iter().map(|r| r[f]).collect())
            .collect();
        let mut residual = vec![0.0; x.len()];
        for _ in 0..cfg.n_trees {
            for i in 0..x.len() {
                residual[i] = y[i] as f64 - sigmoid(margin[i]);
            }
            let mut tree = Tree { nodes: Vec::new() };
            let all: Vec<usize> = (0..x.len()).collect();
            grow(&mut tree, &cols, &residual, all, 0, cfg);
            for (m, row) in margin.iter_mut().zip(x) {
                *m += cfg.learning_rate * tree.leaf_value(row);
            }
            model.trees.push(tree);
            history.push(logloss(&margin, y));
        }
        Ok((model, history))
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.encode(x).iter().sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }

    /// Per-tree margin contribution `learning_rate · leaf value`, one per tree.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.trees
            .iter()
            .map(|t| self.learning_rate * t.leaf_value(x))
            .collect()
    }
}

fn logloss(margin: &[f64], y: &[u8]) -> f64 {
    let total: f64 = margin
        .iter()
        .zip(y)
        .map(|(&m, &l)| {
            if l == 1 {
                crate::nn::softplus(-m)
            } else {
                crate::nn::softplus(m)
            }
        })
        .sum();
    total / y.len() as f64
}

/// Appends the subtree over `rows` and returns its node index.
fn grow(
    tree: &mut Tree,
    cols: &[Vec<f64>],
    r: &[f64],
    rows: Vec<usize>,
    depth: usize,
    cfg: &GbdtConfig,
) -> usize {
    let id = tree.nodes.len();
    let mean = rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64;
    tree.nodes.push(Node::Leaf { value: mean });
    if depth >= cfg.max_depth || rows.len() < 2 * cfg.min_samples_leaf {
        return id;
    }
    let Some((feature, threshold)) = best_split(cols, r, &rows, cfg.min_samples_leaf) else {
        return id;
    };
    let (lrows, rrows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| cols[feature][i] <= threshold);
    let left = grow(tree, cols, r, lrows, depth + 1, cfg);
    let right = grow(tree, cols, r, rrows, depth + 1, cfg);
    tree.nodes[id] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

/// Exact greedy split maximizing variance reduction
/// `S_L²/n_L + S_R²/n_R − S²/n`. Thresholds are midpoints between distinct
/// consecutive values; the first strictly best candidate wins.
fn best_split(
    cols: &[Vec<f64>],
    r: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64)> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| r[i]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for (f, col) in cols.iter().enumerate() {
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut s_left = 0.0;
        for k in 0..n - 1 {
            s_left += r[order[k]];
            let (a, b) = (col[order[k]], col[order[k + 1]]);
            let n_left = k + 1;
            if a == b || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let s_right = total - s_left;
            let gain =
                s_left * s_left / n_left as f64 + s_right * s_right / (n - n_left) as f64 - parent;
            if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                best = Some((gain, f, a + (b - a) / 2.0));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_prior_only() {
        let x = vec![vec![1.0]; 10];
        let (m, _) = GbdtModel::fit(&x, &[0; 10], &GbdtConfig::default()).unwrap();
        assert!(m.trees.is_empty());
        assert!(m.base_score < -20.0);
        assert!(m.predict_proba(&[3.0]) < 1e-8);
    }

    #[test]
    fn stump_separates_perfectly() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64, ((i * 7) % 5) as f64])
            .collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from(i >= 25)).collect();
        let cfg = GbdtConfig {
            n_trees: 10,
            max_depth: 1,
            learning_rate: 1.0,
            min_samples_leaf: 1,
        };
        let (m, hist) = GbdtModel::fit(&x, &y, &cfg).unwrap();
        let acc = x
            .iter()
            .zip(&y)
            .filter(|(r, &l)| u8::from(m.predict_proba(r) > 0.5) == l)
            .count();
        assert_eq!(acc, 40);
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.trees.iter().all(|t| t.depth() <= 1));
    }

    #[test]
    fn encoding_shapes() {
        let empty = GbdtModel {
            n_features: 1,
            learning_rate: 0.1,
            base_score: 0.0,
            trees: vec![],
        };
        assert!(empty.encode(&[1.0]).is_empty());
        let stump = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: -2.0 },
                Node::Leaf { value: 3.0 },
            ],
        };
        let m = GbdtModel {
            n_features: 1,
            learning_rate: 1.0,
            base_score: 0.0,
            trees: vec![stump],
        };
        assert_eq!(m.encode(&[0.0]), vec![-2.0]);
        assert_eq!(m.encode(&[1.0]), vec![3.0]);
        assert_eq!(m.encode(&[1.0]), m.encode(&[1.0]));
    }
}

//! Power iteration clustering.
//!
//! The static graph is bipartite, so the plain random-walk matrix `D⁻¹A` has
//! an eigenvalue of −1 and its power iteration oscillates. We iterate the lazy
//! walk `(I + D⁻¹A)/2` instead, which has the same eigenvectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PartitionAssignment, UGraph};
use crate::error::{Error, Result};
use crate::ingest::StaticGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicConfig {
    /// Expected vertices per coarse cluster; k = ceil(|V| / target).
    pub target_coarse_size: usize,
    pub max_power_iters: usize,
    /// Stop once the acceleration `|δ_k − δ_{k−1}|∞` drops below this.
    /// The iterate is kept at mean 1, so the threshold is scale free.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PicConfig {
    fn default() -> Self {
        PicConfig {
            target_coarse_size: 1_000_000,
            max_power_iters: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl PicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "pic tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_power_iters == 0 {
            return Err(Error::Config("pic max_power_iters must be >= 1".into()));
        }
        if self.target_coarse_size == 0 {
            return Err(Error::Config("pic target_coarse_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn pic_cluster(g: &StaticGraph, cfg: &PicConfig) -> Result<PartitionAssignment> {
    pic_cluster_graph(&UGraph::from_static(g), cfg)
}

pub fn pic_cluster_graph(g: &UGraph, cfg: &PicConfig) -> Result<PartitionAssignment> {
    cfg.validate()?;
    let n = g.n();
    if n == 0 {
        return Err(Error::Invalid("cannot cluster an empty graph".into()));
    }
    let k = n.div_ceil(cfg.target_coarse_size);
    let v = pic_embedding(g, cfg);
    let labels = kmeans_1d(&v, k);
    Ok(PartitionAssignment::from_labels(&labels, None))
}

/// Converged pseudo-eigenvector, one value per vertex.
pub fn pic_embedding(g: &UGraph, cfg: &PicConfig) -> Vec<f64> {
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // A random start separates components that are structurally identical.
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize_mean(&mut v);
    let mut next = vec![0.0; n];
    let mut prev_delta: Option<Vec<f64>> = None;
    for _ in 0..cfg.max_power_iters {
        for (i, slot) in next.iter_mut().enumerate() {
            let nbrs = g.neighbors(i);
            *slot = if nbrs.is_empty() {
                v[i]
            } else {
                let avg = nbrs.iter().map(|&u| v[u as usize]).sum::<f64>() / nbrs.len() as f64;
                0.5 * (v[i] + avg)
            };
        }
        normalize_mean(&mut next);
        let delta: Vec<f64> = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).collect();
        std::mem::swap(&mut v, &mut next);
        if let Some(prev) = &prev_delta {
            let accel = delta
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if accel < cfg.tol {
                break;
            }
        }
        prev_delta = Some(delta);
    }
    v
}

fn normalize_mean(v: &mut [f64]) {
    let s: f64 = v.iter().map(|x| x.abs()).sum();
    if s > 0.0 {
        let scale = v.len() as f64 / s;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

/// Lloyd's k-means on scalars with quantile initialization. Labels come back
/// dense and ordered by centroid; distance ties go to the lower cluster.
pub fn kmeans_1d(values: &[f64], k: usize) -> Vec<u32> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centroids: Vec<f64> = (0..k)
        .map(|c| sorted[((2 * c + 1) * n / (2 * k)).min(n - 1)])
        .collect();
    let mut assign = vec![0u32; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &x) in values.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &m) in centroids.iter().enumerate() {
                let d = (x - m).abs();
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assign[i] != best as u32 {
                assign[i] = best as u32;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            sums[c as usize] += values[i];
            counts[c as usize] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    // Drop empty clusters and renumber by centroid order.
    let mut used: Vec<u32> = assign.clone();
    used.sort_unstable();
    used.dedup();
    let mut order: Vec<u32> = used.clone();
    order.sort_by(|a, b| {
        centroids[*a as usize]
            .total_cmp(&centroids[*b as usize])
            .then(a.cmp(b))
    });
    let mut remap = vec![0u32; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    assign.iter().map(|&c| remap[c as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(target: usize) -> PicConfig {
        PicConfig {
            target_coarse_size: target,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn two_disjoint_triangles_split_by_component() {
        let g = UGraph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        let comps = g.components();
        for seed in 0..20 {
            let a = pic_cluster_graph(&g, &PicConfig { seed, ..cfg(3) }).unwrap();
            assert_eq!(a.n_parts, 2);
            for u in 0..6 {
                for v in 0..6 {
                    assert_eq!(a.part_of[u] == a.part_of[v], comps[u] == comps[v]);
                }
            }
        }
    }

    #[test]
    fn single_vertex_and_k_one() {
        let g = UGraph::from_edges(1, &[]);
        let a = pic_cluster_graph(&g, &cfg(1)).unwrap();
        assert_eq!(a.part_of, vec![0]);

        let path = UGraph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let a = pic_cluster_graph(&path, &cfg(6)).unwrap();
        assert_eq!(a.n_parts, 1);
    }

    #[test]
    fn rejects_bad_config_and_empty_graph() {
        let g = UGraph::from_edges(2, &[(0, 1)]);
        assert!(pic_cluster_graph(&g, &PicConfig { tol: 0.0, ..cfg(1) }).is_err());
        assert!(pic_cluster_graph(
            &g,
            &PicConfig {
                max_power_iters: 0,
                ..cfg(1)
            }
        )
        .is_err());
        assert!(pic_cluster_graph(&UGraph::from_edges(0, &[]), &cfg(1)).is_err());
    }

    #[test]
    fn bipartite_component_converges_to_constant() {
        // A 4-cycle is bipartite; the lazy walk still flattens it.
        let g = UGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let v = pic_embedding(
            &g,
            &PicConfig {
                tol: 1e-12,
                max_power_iters: 10_000,
                ..cfg(1)
            },
        );
        for x in &v {
            assert!((x - 1.0).abs() < 1e-6, "{v:?}");
        }
    }

    #[test]
    fn kmeans_ties_and_order() {
        assert_eq!(kmeans_1d(&[5.0, 1.0, 1.1, 5.2], 2), vec![1, 0, 0, 1]);
        assert_eq!(kmeans_1d(&[2.0, 2.0, 2.0], 3), vec![0, 0, 0]);
        assert_eq!(kmeans_1d(&[], 2), Vec::<u32>::new());
    }

    #[test]
    fn deterministic_by_seed() {
        let g = UGraph::from_edges(8, &[(0, 1), (1, 2), (3, 4), (5, 6), (6, 7), (2, 7)]);
        let a = pic_cluster_graph(&g, &cfg(3)).unwrap();
        let b = pic_cluster_graph(&g, &cfg(3)).unwrap();
        assert_eq!(a, b);
    }
}

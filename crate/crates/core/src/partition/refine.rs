//! Size-capped refinement: recursive bisection by greedy graph growing,
//! polished with Kernighan–Lin pair swaps.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PartitionAssignment, UGraph};
use crate::error::{Error, Result};
use crate::ingest::StaticGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub size_cap: usize,
    pub n_kl_passes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            size_cap: 1024,
            n_kl_passes: 4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_cap < 2 {
            return Err(Error::Config(format!(
                "size_cap must be >= 2, got {}",
                self.size_cap
            )));
        }
        Ok(())
    }
}

/// Edge cut of one accepted (or rejected) KL pass on a bisection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KlPass {
    pub cut_before: usize,
    pub cut_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RefineTrace {
    pub passes: Vec<KlPass>,
    pub bisections: usize,
}

pub fn refine_partition(
    g: &StaticGraph,
    coarse: &PartitionAssignment,
    cfg: &RefineConfig,
) -> Result<PartitionAssignment> {
    refine_graph(&UGraph::from_static(g), coarse, cfg).map(|(a, _)| a)
}

pub fn refine_graph(
    g: &UGraph,
    coarse: &PartitionAssignment,
    cfg: &RefineConfig,
) -> Result<(PartitionAssignment, RefineTrace)> {
    cfg.validate()?;
    coarse.validate(g.n())?;
    // Coarse clusters are disjoint, so they refine independently.
    let pieces: Vec<(Vec<Vec<usize>>, RefineTrace)> = coarse
        .members()
        .into_par_iter()
        .map(|members| split_to_cap(g, members, cfg))
        .collect();
    let mut part_of = vec![0u32; g.n()];
    let mut trace = RefineTrace::default();
    let mut next = 0u32;
    for (parts, t) in pieces {
        for part in parts {
            for v in part {
                part_of[v] = next;
            }
            next += 1;
        }
        trace.passes.extend(t.passes);
        trace.bisections += t.bisections;
    }
    let out = PartitionAssignment {
        part_of,
        n_parts: next,
        size_cap: Some(cfg.size_cap),
    };
    out.validate(g.n())?;
    Ok((out, trace))
}

fn split_to_cap(
    g: &UGraph,
    members: Vec<usize>,
    cfg: &RefineConfig,
) -> (Vec<Vec<usize>>, RefineTrace) {
    let mut trace = RefineTrace::default();
    let mut done = Vec::new();
    let mut queue = VecDeque::from([members]);
    while let Some(part) = queue.pop_front() {
        if part.len() <= cfg.size_cap {
            done.push(part);
            continue;
        }
        let sub = g.induced(&part);
        let side = bisect(&sub, cfg.n_kl_passes, &mut trace);
        trace.bisections += 1;
        let (a, b): (Vec<(usize, bool)>, Vec<(usize, bool)>) =
            part.iter().copied().zip(side).partition(|&(_, s)| !s);
        queue.push_back(a.into_iter().map(|(v, _)| v).collect());
        queue.push_back(b.into_iter().map(|(v, _)| v).collect());
    }
    done.sort_by_key(|p| p[0]);
    (done, trace)
}

/// Number of edges whose endpoints lie on different sides.
pub fn edge_cut(g: &UGraph, side: &[bool]) -> usize {
    (0..g.n())
        .map(|v| {
            g.neighbors(v)
                .iter()
                .filter(|&&u| (u as usize) > v && side[u as usize] != side[v])
                .count()
        })
        .sum()
}

/// Balanced bisection: `false` side gets `floor(n/2)` vertices.
pub fn bisect(g: &UGraph, n_kl_passes: usize, trace: &mut RefineTrace) -> Vec<bool> {
    let mut side = grow(g);
    for _ in 0..n_kl_passes {
        let pass = kl_pass(g, &mut side);
        trace.passes.push(pass);
        if pass.cut_after == pass.cut_before {
            break;
        }
    }
    side
}

fn pseudo_peripheral(g: &UGraph, start: usize, in_set: &[bool]) -> usize {
    let mut far = start;
    for _ in 0..2 {
        let mut dist = vec![usize::MAX; g.n()];
        let mut q = VecDeque::from([far]);
        dist[far] = 0;
        while let Some(v) = q.pop_front() {
            far = v;
            for &u in g.neighbors(v) {
                let u = u as usize;
                if dist[u] == usize::MAX && !in_set[u] {
                    dist[u] = dist[v] + 1;
                    q.push_back(u);
                }
            }
        }
    }
    far
}

/// Greedy graph growing: repeatedly absorb the frontier vertex with the best
/// `2·internal − degree` balance until half the vertices are taken.
fn grow(g: &UGraph) -> Vec<bool> {
    let n = g.n();
    let target = n / 2;
    let mut taken = vec![false; n];
    let mut gain: Vec<i64> = (0..n).map(|v| -(g.degree(v) as i64)).collect();
    let mut heap: BinaryHeap<(i64, Reverse<usize>)> = BinaryHeap::new();
    let mut count = 0;
    let mut next_seed = 0;
    while count < target {
        let v = match heap.pop() {
            Some((gv, Reverse(v))) if !taken[v] && gv == gain[v] => v,
            Some(_) => continue,
            None if count == 0 => pseudo_peripheral(g, 0, &taken),
            None => {
                // Frontier exhausted: continue in the next untouched component.
                while taken[next_seed] {
                    next_seed += 1;
                }
                next_seed
            }
        };
        taken[v] = true;
        count += 1;
        for &u in g.neighbors(v) {
            let u = u as usize;
            if !taken[u] {
                gain[u] += 2;
                heap.push((gain[u], Reverse(u)));
            }
        }
    }
    // `true` marks the untaken (larger) side.
    taken.iter().map(|&t| !t).collect()
}

/// One Kernighan–Lin pass. Tentatively swaps pairs, then keeps the prefix
/// with the largest positive cumulative gain. The cut never increases.
pub fn kl_pass(g: &UGraph, side: &mut [bool]) -> KlPass {
    let n = g.n();
    let cut_before = edge_cut(g, side);
    // D(v) = external − internal degree.
    let mut d: Vec<i64> = (0..n)
        .map(|v| {
            g.neighbors(v)
                .iter()
                .map(|&u| if side[u as usize] != side[v] { 1 } else { -1 })
                .sum()
        })
        .collect();
    let mut locked = vec![false; n];
    let mut is_nbr = vec![false; n];
    let mut swaps: Vec<(usize, usize)> = Vec::new();
    let mut best_prefix = 0;
    let mut best_total = 0i64;
    let mut total = 0i64;
    let n_false = side.iter().filter(|&&s| !s).count();
    let steps = n_false.min(n - n_false);
    for _ in 0..steps {
        let a = match (0..n)
            .filter(|&v| !locked[v] && !side[v])
            .max_by_key(|&v| (d[v], Reverse(v)))
        {
            Some(a) => a,
            None => break,
        };
        for &u in g.neighbors(a) {
            is_nbr[u as usize] = true;
        }
        let b = (0..n)
            .filter(|&v| !locked[v] && side[v])
            .max_by_key(|&v| (d[v] - 2 * is_nbr[v] as i64, Reverse(v)));
        for &u in g.neighbors(a) {
            is_nbr[u as usize] = false;
        }
        let Some(b) = b else { break };
        let c_ab = g.neighbors(a).binary_search(&(b as u32)).is_ok() as i64;
        total += d[a] + d[b] - 2 * c_ab;
        locked[a] = true;
        locked[b] = true;
        for x in [a, b] {
            side[x] = !side[x];
            for &u in g.neighbors(x) {
                let u = u as usize;
                if side[u] == side[x] {
                    d[u] -= 2;
                } else {
                    d[u] += 2;
                }
            }
        }
        swaps.push((a, b));
        if total > best_total {
            best_total = total;
            best_prefix = swaps.len();
        }
    }
    for &(a, b) in &swaps[best_prefix..] {
        side[a] = !side[a];
        side[b] = !side[b];
    }
    let cut_after = cut_before - best_total as usize;
    debug_assert_eq!(cut_after, edge_cut(g, side));
    KlPass {
        cut_before,
        cut_after,
    }
}

//! Community partitioning of the static graph.
//!
//! A coarse power-iteration clustering pass is followed by size-capped
//! recursive bisection with Kernighan–Lin refinement. Each resulting part
//! becomes one training batch.

mod pic;
mod refine;

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};
use crate::ingest::{StaticGraph, VertexKind};

pub use pic::{kmeans_1d, pic_cluster, pic_cluster_graph, pic_embedding, PicConfig};
pub use refine::{
    bisect, edge_cut, kl_pass, refine_graph, refine_partition, KlPass, RefineConfig, RefineTrace,
};

/// Undirected graph in compressed adjacency form.
#[derive(Clone, Debug, Default)]
pub struct UGraph {
    offsets: Vec<usize>,
    adj: Vec<u32>,
}

impl UGraph {
    /// Builds from an undirected edge list. Self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                lists[a].push(b as u32);
                lists[b].push(a as u32);
            }
        }
        Self::from_lists(lists)
    }

    fn from_lists(mut lists: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut adj = Vec::new();
        offsets.push(0);
        for l in lists.iter_mut() {
            l.sort_unstable();
            l.dedup();
            adj.extend_from_slice(l);
            offsets.push(adj.len());
        }
        UGraph { offsets, adj }
    }

    /// Unified order/entity vertex space of the static graph.
    pub fn from_static(g: &StaticGraph) -> Self {
        let lists = (0..g.n_vertices())
            .map(|v| g.neighbors(v).into_iter().map(|u| u as u32).collect())
            .collect();
        Self::from_lists(lists)
    }

    /// Subgraph induced by `vertices`; local index i corresponds to `vertices[i]`.
    pub fn induced(&self, vertices: &[usize]) -> UGraph {
        let local: std::collections::HashMap<usize, u32> = vertices
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u32))
            .collect();
        let lists = vertices
            .iter()
            .map(|&v| {
                self.neighbors(v)
                    .iter()
                    .filter_map(|&u| local.get(&(u as usize)).copied())
                    .collect()
            })
            .collect();
        Self::from_lists(lists)
    }

    pub fn n(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn n_edges(&self) -> usize {
        self.adj.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.adj[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Connected component id per vertex, numbered in order of first vertex.
    pub fn components(&self) -> Vec<u32> {
        let mut comp = vec![u32::MAX; self.n()];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..self.n() {
            if comp[s] != u32::MAX {
                continue;
            }
            comp[s] = next;
            stack.push(s);
            while let Some(v) = stack.pop() {
                for &u in self.neighbors(v) {
                    if comp[u as usize] == u32::MAX {
                        comp[u as usize] = next;
                        stack.push(u as usize);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionAssignment {
    /// Partition id per vertex.
    pub part_of: Vec<u32>,
    pub n_parts: u32,
    /// Maximum part size, if this assignment was size-refined.
    pub size_cap: Option<usize>,
}

impl PartitionAssignment {
    /// Renumbers labels densely in order of first appearance.
    pub fn from_labels(labels: &[u32], size_cap: Option<usize>) -> Self {
        let mut map = std::collections::HashMap::new();
        let part_of = labels
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        PartitionAssignment {
            part_of,
            n_parts: map.len() as u32,
            size_cap,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.part_of.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_parts as usize];
        for &p in &self.part_of {
            s[p as usize] += 1;
        }
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_parts as usize];
        for (v, &p) in self.part_of.iter().enumerate() {
            m[p as usize].push(v);
        }
        m
    }

    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if self.part_of.len() != n_vertices {
            return Err(Error::Invalid(format!(
                "assignment covers {} vertices, graph has {n_vertices}",
                self.part_of.len()
            )));
        }
        let sizes = self.sizes_checked()?;
        if let Some(p) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Invalid(format!("partition {p} is empty")));
        }
        if let Some(cap) = self.size_cap {
            if let Some(p) = sizes.iter().position(|&s| s > cap) {
                return Err(Error::Invalid(format!("partition {p} exceeds cap {cap}")));
            }
        }
        Ok(())
    }

    fn sizes_checked(&self) -> Result<Vec<usize>> {
        if let Some(&p) = self.part_of.iter().find(|&&p| p >= self.n_parts) {
            return Err(Error::Invalid(format!("partition id {p} out of range")));
        }
        Ok(self.sizes())
    }

    const MAGIC: [u8; 4] = *b"DDSP";
    const VERSION: u16 = 1;

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, &Self::MAGIC, Self::VERSION)?;
        w.write_u32::<LE>(self.n_parts)?;
        w.write_u64::<LE>(self.size_cap.map_or(0, |c| c as u64))?;
        w.write_u64::<LE>(self.part_of.len() as u64)?;
        for (v, &p) in self.part_of.iter().enumerate() {
            w.write_u64::<LE>(v as u64)?;
            w.write_u32::<LE>(p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, &Self::MAGIC, Self::VERSION)?;
        let n_parts = r.read_u32::<LE>()?;
        let cap = r.read_u64::<LE>()?;
        let n = r.read_u64::<LE>()? as usize;
        let mut part_of = vec![u32::MAX; n];
        for _ in 0..n {
            let v = r.read_u64::<LE>()? as usize;
            let p = r.read_u32::<LE>()?;
            let slot = part_of
                .get_mut(v)
                .ok_or_else(|| Error::Format(format!("vertex {v} out of range")))?;
            *slot = p;
        }
        if part_of.contains(&u32::MAX) {
            return Err(Error::Format(
                "partition table does not cover every vertex".into(),
            ));
        }
        let a = PartitionAssignment {
            part_of,
            n_parts,
            size_cap: (cap > 0).then_some(cap as usize),
        };
        a.sizes_checked()?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// One ClusterGCN-style training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommunityBatch {
    pub part: u32,
    /// The partition's own vertices (unified indices), ascending.
    pub core: Vec<usize>,
    /// Entities linked to core orders but assigned elsewhere. They pass
    /// messages but carry no loss.
    pub halo: Vec<usize>,
}

impl CommunityBatch {
    pub fn vertices(&self) -> Vec<usize> {
        let mut v = self.core.clone();
        v.extend_from_slice(&self.halo);
        v.sort_unstable();
        v
    }
}

/// One batch per partition, shuffled deterministically by `seed`.
pub fn community_batches(
    g: &StaticGraph,
    parts: &PartitionAssignment,
    seed: u64,
) -> Vec<CommunityBatch> {
    let mut batches: Vec<CommunityBatch> = parts
        .members()
        .into_iter()
        .enumerate()
        .map(|(p, core)| {
            let mut halo: Vec<usize> = core
                .iter()
                .filter(|&&v| g.vertex_kind(v) == VertexKind::Order)
                .flat_map(|&v| g.neighbors(v))
                .filter(|&u| parts.part_of[u] != p as u32)
                .collect();
            halo.sort_unstable();
            halo.dedup();
            CommunityBatch {
                part: p as u32,
                core,
                halo,
            }
        })
        .collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

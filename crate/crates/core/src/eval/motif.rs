//! Daily mobility motifs: the directed graph of distinct cells visited in a
//! day with an edge per observed transition, up to isomorphism.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::traj::{CellId, DailyTrajectory};

/// Largest node count canonicalised exactly.
pub const MAX_CANONICAL_NODES: usize = 8;

/// Isomorphism class of a daily motif graph.
///
/// Graphs with more than [`MAX_CANONICAL_NODES`] nodes are not
/// canonicalised and are only summarised by node and edge counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MotifId {
    /// Row-major adjacency bits of the lexicographically smallest relabelling.
    Canonical { nodes: u8, code: u64 },
    Large { nodes: u8, edges: u16 },
}

impl MotifId {
    pub fn nodes(&self) -> usize {
        match *self {
            MotifId::Canonical { nodes, .. } | MotifId::Large { nodes, .. } => nodes as usize,
        }
    }

    pub fn edges(&self) -> usize {
        match *self {
            MotifId::Canonical { code, .. } => code.count_ones() as usize,
            MotifId::Large { edges, .. } => edges as usize,
        }
    }
}

impl fmt::Display for MotifId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MotifId::Canonical { nodes, code } => write!(f, "n{nodes}:{code:x}"),
            MotifId::Large { nodes, edges } => write!(f, "n{nodes}e{edges}+"),
        }
    }
}

/// Node count and directed edge list (no self-loops) over local node ids
/// assigned in order of first visit.
pub fn motif_graph(slots: &[CellId]) -> (usize, Vec<(usize, usize)>) {
    let mut ids: BTreeMap<CellId, usize> = BTreeMap::new();
    let mut local = Vec::with_capacity(slots.len());
    for &c in slots {
        let next = ids.len();
        local.push(*ids.entry(c).or_insert(next));
    }
    let mut edges: Vec<(usize, usize)> = local
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[0], w[1]))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    (ids.len(), edges)
}

fn code_under(n: usize, edges: &[(usize, usize)], perm: &[usize]) -> u64 {
    edges
        .iter()
        .fold(0u64, |acc, &(a, b)| acc | 1u64 << (63 - (perm[a] * n + perm[b])))
}

/// Visits every permutation of `0..n` (Heap's algorithm).
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Canonical id of a graph given as node count and edge list.
pub fn canonical_motif(n: usize, edges: &[(usize, usize)]) -> MotifId {
    if n > MAX_CANONICAL_NODES {
        return MotifId::Large {
            nodes: n.min(u8::MAX as usize) as u8,
            edges: edges.len().min(u16::MAX as usize) as u16,
        };
    }
    // The bit for (a, b) sits at 63 - (a*n + b); maximising the code
    // under relabelling gives an order-independent representative.
    let mut best = 0u64;
    for_each_permutation(n, |perm| best = best.max(code_under(n, edges, perm)));
    MotifId::Canonical { nodes: n as u8, code: best }
}

pub fn extract_motif(traj: &DailyTrajectory) -> MotifId {
    let (n, edges) = motif_graph(&traj.slots);
    canonical_motif(n, &edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifShare {
    pub rank: usize,
    pub motif: MotifId,
    pub nodes: usize,
    pub edges: usize,
    pub count: usize,
    pub fraction: f64,
}

/// Motif frequencies, most common first (ties by id).
pub fn motif_distribution<'a>(trajs: impl IntoIterator<Item = &'a DailyTrajectory>) -> Vec<MotifShare> {
    let mut counts: BTreeMap<MotifId, usize> = BTreeMap::new();
    let mut total = 0usize;
    for t in trajs {
        *counts.entry(extract_motif(t)).or_default() += 1;
        total += 1;
    }
    let mut ranked: Vec<(MotifId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (motif, count))| MotifShare {
            rank: i + 1,
            motif,
            nodes: motif.nodes(),
            edges: motif.edges(),
            count,
            fraction: count as f64 / total as f64,
        })
        .collect()
}

//! Multi-scale heterogeneous geospatial graph.
//!
//! Node indices are unified: cells occupy `0..n_cells` and admin regions
//! `n_cells..n_cells + n_admins`. Flow edges carry 24 hourly trip counts and
//! are counted on the training split only.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::synth::io::{read_json, write_json};
use crate::synth::{AdminId, CityGrid};
use crate::traj::{CellId, DailyTrajectory, UserHistory};

pub const HOURS: usize = 24;

/// Cell-level adjacency threshold in km.
pub const CELL_ADJACENCY_KM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Cell,
    Admin,
}

/// Directed flow edge with hourly trip counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub src: u32,
    pub dst: u32,
    pub hourly: [u64; HOURS],
}

impl FlowEdge {
    pub fn total(&self) -> u64 {
        self.hourly.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub n_cells: usize,
    pub n_admins: usize,
    /// Cell-to-cell flows, never self-loops. Indices are cell ids.
    pub cell_flow: Vec<FlowEdge>,
    /// Admin-to-admin flows including intra-admin self-loops. Indices are
    /// admin ids.
    pub admin_flow: Vec<FlowEdge>,
    /// Undirected, stored once with `p < q`.
    pub cell_adjacency: Vec<(u32, u32)>,
    pub admin_adjacency: Vec<(u32, u32)>,
    /// `(cell, admin)` pairs.
    pub inclusion: Vec<(u32, u32)>,
}

/// Initial node features for every node in unified index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    /// Row of the region-id embedding table for each node.
    pub region_ids: Vec<u32>,
    /// User-slots observed in the region at each hour.
    pub occupancy: Vec<[u64; HOURS]>,
}

impl HeteroGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_cells + self.n_admins
    }

    pub fn admin_node(&self, admin: u32) -> u32 {
        self.n_cells as u32 + admin
    }

    /// Undirected neighbour lists over adjacency and inclusion edges, in
    /// unified node indices.
    pub fn structural_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs = vec![BTreeSet::new(); self.n_nodes()];
        let mut link = |a: u32, b: u32| {
            nbrs[a as usize].insert(b);
            nbrs[b as usize].insert(a);
        };
        for &(p, q) in &self.cell_adjacency {
            link(p, q);
        }
        for &(p, q) in &self.admin_adjacency {
            link(self.admin_node(p), self.admin_node(q));
        }
        for &(c, a) in &self.inclusion {
            link(c, self.admin_node(a));
        }
        nbrs.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Flow edges in unified node indices (`src -> dst`), cells first.
    pub fn unified_flows(&self) -> Vec<FlowEdge> {
        let off = self.n_cells as u32;
        self.cell_flow
            .iter()
            .cloned()
            .chain(self.admin_flow.iter().map(|e| FlowEdge {
                src: e.src + off,
                dst: e.dst + off,
                hourly: e.hourly,
            }))
            .collect()
    }
}

/// Undirected adjacency edges `(p, q)`, `p < q`.
///
/// Cells are adjacent when their centroids are within `threshold_km`. Admin
/// regions are adjacent when any of their cells share a grid edge; the
/// threshold does not apply at that level.
pub fn build_adjacency(grid: &CityGrid, threshold_km: f64, level: Level) -> Vec<(u32, u32)> {
    match level {
        Level::Cell => {
            let reach = (threshold_km / grid.cell_size_km).ceil() as isize;
            let mut edges = Vec::new();
            for y in 0..grid.height as isize {
                for x in 0..grid.width as isize {
                    let p = grid.cell_at(x as usize, y as usize);
                    for dy in -reach..=reach {
                        for dx in -reach..=reach {
                            let (nx, ny) = (x + dx, y + dy);
                            if nx < 0 || ny < 0 || nx >= grid.width as isize || ny >= grid.height as isize {
                                continue;
                            }
                            let q = grid.cell_at(nx as usize, ny as usize);
                            if p < q && grid.distance_km(p, q) <= threshold_km {
                                edges.push((p.0, q.0));
                            }
                        }
                    }
                }
            }
            edges.sort_unstable();
            edges
        }
        Level::Admin => {
            let mut edges = BTreeSet::new();
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let a = grid.admin(grid.cell_at(x, y)).0;
                    let mut touch = |b: u32| {
                        if a != b {
                            edges.insert((a.min(b), a.max(b)));
                        }
                    };
                    if x + 1 < grid.width {
                        touch(grid.admin(grid.cell_at(x + 1, y)).0);
                    }
                    if y + 1 < grid.height {
                        touch(grid.admin(grid.cell_at(x, y + 1)).0);
                    }
                }
            }
            edges.into_iter().collect()
        }
    }
}

pub fn build_inclusion(grid: &CityGrid) -> Vec<(u32, u32)> {
    (0..grid.n_cells() as u32)
        .map(|c| (c, grid.admin(CellId(c)).0))
        .collect()
}

/// Hour bucket of a slot index.
pub fn hour_of_slot(slot: usize, slots_per_day: usize) -> usize {
    slot * HOURS / slots_per_day
}

/// Calls `f(slot, from, to)` for every in-day location change, where `slot`
/// is the last slot spent at `from`.
pub fn for_each_trip(day: &DailyTrajectory, mut f: impl FnMut(usize, CellId, CellId)) {
    for (s, w) in day.slots.windows(2).enumerate() {
        if w[0] != w[1] {
            f(s, w[0], w[1]);
        }
    }
}

/// Cell-level flow edges from the given days. Edges with zero total are
/// never materialised.
pub fn build_flow<'a>(days: impl IntoIterator<Item = &'a DailyTrajectory>) -> Vec<FlowEdge> {
    let mut acc: BTreeMap<(u32, u32), [u64; HOURS]> = BTreeMap::new();
    for day in days {
        let t = day.slots.len();
        for_each_trip(day, |s, a, b| {
            acc.entry((a.0, b.0)).or_insert([0; HOURS])[hour_of_slot(s, t)] += 1;
        });
    }
    acc.into_iter()
        .map(|((src, dst), hourly)| FlowEdge { src, dst, hourly })
        .collect()
}

/// Sums cell flows by admin of origin and destination. Trips between two
/// cells of the same admin become that admin's self-loop.
pub fn aggregate_admin(cell_flow: &[FlowEdge], grid: &CityGrid) -> Vec<FlowEdge> {
    let mut acc: BTreeMap<(u32, u32), [u64; HOURS]> = BTreeMap::new();
    for e in cell_flow {
        let key = (grid.admin(CellId(e.src)).0, grid.admin(CellId(e.dst)).0);
        let slot = acc.entry(key).or_insert([0; HOURS]);
        for (a, b) in slot.iter_mut().zip(&e.hourly) {
            *a += b;
        }
    }
    acc.into_iter()
        .map(|((src, dst), hourly)| FlowEdge { src, dst, hourly })
        .collect()
}

pub fn build_features<'a>(
    days: impl IntoIterator<Item = &'a DailyTrajectory>,
    grid: &CityGrid,
) -> NodeFeatures {
    let n_cells = grid.n_cells();
    let n = n_cells + grid.n_admins();
    let mut occupancy = vec![[0u64; HOURS]; n];
    for day in days {
        let t = day.slots.len();
        for (s, &cell) in day.slots.iter().enumerate() {
            let h = hour_of_slot(s, t);
            occupancy[cell.index()][h] += 1;
            occupancy[n_cells + grid.admin(cell).index()][h] += 1;
        }
    }
    NodeFeatures {
        region_ids: (0..n as u32).collect(),
        occupancy,
    }
}

/// Days of every history falling in `range`, in user/day order.
pub fn days_in<'a>(
    histories: &'a [UserHistory],
    range: &'a Range<u32>,
) -> impl Iterator<Item = &'a DailyTrajectory> + 'a {
    histories
        .iter()
        .flat_map(move |h| h.days.range(range.clone()).map(|(_, d)| d))
}

/// Graph plus node features as persisted to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphBundle {
    pub slots_per_day: usize,
    /// Day range the flows and features were counted over.
    pub source_days: Range<u32>,
    pub graph: HeteroGraph,
    pub features: NodeFeatures,
}

impl GraphBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Builds the full graph from the days in `train_days` only.
pub fn build_graph(
    histories: &[UserHistory],
    grid: &CityGrid,
    train_days: Range<u32>,
) -> GraphBundle {
    let cell_flow = build_flow(days_in(histories, &train_days));
    let admin_flow = aggregate_admin(&cell_flow, grid);
    let graph = HeteroGraph {
        n_cells: grid.n_cells(),
        n_admins: grid.n_admins(),
        cell_flow,
        admin_flow,
        cell_adjacency: build_adjacency(grid, CELL_ADJACENCY_KM, Level::Cell),
        admin_adjacency: build_adjacency(grid, CELL_ADJACENCY_KM, Level::Admin),
        inclusion: build_inclusion(grid),
    };
    let features = build_features(days_in(histories, &train_days), grid);
    let slots_per_day = histories.first().map_or(24, |h| h.slots_per_day);
    GraphBundle {
        slots_per_day,
        source_days: train_days,
        graph,
        features,
    }
}

/// Admin region of each cell, convenience for callers holding only a graph.
pub fn admin_lookup(graph: &HeteroGraph) -> Vec<AdminId> {
    let mut out = vec![AdminId(0); graph.n_cells];
    for &(c, a) in &graph.inclusion {
        out[c as usize] = AdminId(a);
    }
    out
}

//! Origin-destination flow matrices and their agreement scores.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::for_each_trip;
use crate::synth::CityGrid;
use crate::traj::DailyTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowLevel {
    Cell,
    Admin,
}

/// Sparse trip counts keyed by (origin, destination).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub level: FlowLevel,
    pub flows: BTreeMap<(u32, u32), f64>,
}

impl FlowMatrix {
    pub fn new(level: FlowLevel) -> Self {
        Self {
            level,
            flows: BTreeMap::new(),
        }
    }

    pub fn get(&self, od: (u32, u32)) -> f64 {
        self.flows.get(&od).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.flows.values().sum()
    }

    fn support_union<'a>(&'a self, other: &'a FlowMatrix) -> BTreeSet<(u32, u32)> {
        self.flows
            .iter()
            .chain(&other.flows)
            .filter(|(_, &v)| v != 0.0)
            .map(|(&k, _)| k)
            .collect()
    }
}

/// Trips between distinct regions. At admin level, trips inside one region
/// are not counted.
pub fn od_flows<'a>(trajs: impl IntoIterator<Item = &'a DailyTrajectory>, level: FlowLevel, grid: &CityGrid) -> FlowMatrix {
    let mut m = FlowMatrix::new(level);
    for t in trajs {
        for_each_trip(t, |_, a, b| {
            let od = match level {
                FlowLevel::Cell => (a.0, b.0),
                FlowLevel::Admin => (grid.admin(a).0, grid.admin(b).0),
            };
            if od.0 != od.1 {
                *m.flows.entry(od).or_insert(0.0) += 1.0;
            }
        });
    }
    m
}

/// Coefficient of determination of `pred` against `actual` over the union of
/// nonzero pairs, zeros imputed. Two empty matrices score 1; a constant
/// nonempty `actual` scores 1 only when matched exactly and 0 otherwise.
pub fn r_squared(actual: &FlowMatrix, pred: &FlowMatrix) -> f64 {
    let pairs = actual.support_union(pred);
    if pairs.is_empty() {
        return 1.0;
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|&k| actual.get(k)).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &k in &pairs {
        let a = actual.get(k);
        ss_res += (a - pred.get(k)).powi(2);
        ss_tot += (a - mean).powi(2);
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Common part of commuters: shared mass over mean mass. Two empty matrices
/// score 1.
pub fn cpc(actual: &FlowMatrix, pred: &FlowMatrix) -> f64 {
    let denom = actual.total() + pred.total();
    if denom == 0.0 {
        return 1.0;
    }
    let common: f64 = actual
        .support_union(pred)
        .iter()
        .map(|&k| actual.get(k).min(pred.get(k)))
        .sum();
    2.0 * common / denom
}

/// (origin, destination, actual, predicted) for every pair in either matrix.
pub fn scatter_pairs(actual: &FlowMatrix, pred: &FlowMatrix) -> Vec<(u32, u32, f64, f64)> {
    actual
        .support_union(pred)
        .into_iter()
        .map(|k| (k.0, k.1, actual.get(k), pred.get(k)))
        .collect()
}

//! Evaluation metrics for predicted trajectories.

mod flow;
mod motif;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use flow::{cpc, od_flows, r_squared, scatter_pairs, FlowLevel, FlowMatrix};
pub use motif::{
    canonical_motif, extract_motif, motif_distribution, motif_graph, MotifId, MotifShare, MAX_CANONICAL_NODES,
};
pub use report::{evaluate, write_report, Evaluation, FlowScores, MetricReport};

use crate::error::{Error, Result};
use crate::graph::for_each_trip;
use crate::synth::CityGrid;
use crate::traj::{DailyTrajectory, UserId};

/// Width of travel distance histogram bins.
pub const DISTANCE_BIN_KM: f64 = 1.0;

fn check_pair(p: &DailyTrajectory, a: &DailyTrajectory) -> Result<()> {
    if p.slots.len() != a.slots.len() {
        return Err(Error::SlotMismatch {
            context: format!("prediction for user {} day {}", p.user.0, p.day),
            expected: a.slots.len(),
            found: p.slots.len(),
        });
    }
    Ok(())
}

/// Fraction of slots whose predicted cell equals the actual one, over
/// index-aligned pairs.
pub fn accuracy(pred: &[DailyTrajectory], actual: &[DailyTrajectory]) -> Result<f64> {
    pointwise(pred, actual, |p, a| if p == a { 1.0 } else { 0.0 })
}

/// Mean centroid distance in km between predicted and actual cells.
pub fn deviation_distance(pred: &[DailyTrajectory], actual: &[DailyTrajectory], grid: &CityGrid) -> Result<f64> {
    pointwise(pred, actual, |p, a| grid.distance_km(p, a))
}

fn pointwise(
    pred: &[DailyTrajectory],
    actual: &[DailyTrajectory],
    f: impl Fn(crate::traj::CellId, crate::traj::CellId) -> f64,
) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Shape(format!("{} predictions for {} actual days", pred.len(), actual.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        check_pair(p, a)?;
        for (&x, &y) in p.slots.iter().zip(&a.slots) {
            sum += f(x, y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Jensen-Shannon divergence (natural log) between two histograms, each
/// normalised first. Shorter inputs are zero-padded; an all-zero input is
/// treated as a point mass on bin 0.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len()).max(1);
    let norm = |h: &[f64]| -> Vec<f64> {
        let total: f64 = h.iter().sum();
        let mut out = vec![0.0; n];
        if total > 0.0 {
            for (o, &x) in out.iter_mut().zip(h) {
                *o = x / total;
            }
        } else {
            out[0] = 1.0;
        }
        out
    };
    let (p, q) = (norm(p), norm(q));
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            d += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).ln();
        }
    }
    d.clamp(0.0, std::f64::consts::LN_2)
}

fn add_to_bin(h: &mut Vec<f64>, bin: usize) {
    if h.len() <= bin {
        h.resize(bin + 1, 0.0);
    }
    h[bin] += 1.0;
}

fn distance_bin(km: f64) -> usize {
    (km / DISTANCE_BIN_KM).floor() as usize
}

fn per_user<'a>(days: &'a [DailyTrajectory]) -> BTreeMap<UserId, Vec<&'a DailyTrajectory>> {
    let mut out: BTreeMap<UserId, Vec<&DailyTrajectory>> = BTreeMap::new();
    for d in days {
        out.entry(d.user).or_default().push(d);
    }
    out
}

fn mean_user_jsd(
    pred: &[DailyTrajectory],
    actual: &[DailyTrajectory],
    hist: impl Fn(&[&DailyTrajectory]) -> Vec<f64>,
) -> f64 {
    let p = per_user(pred);
    let a = per_user(actual);
    let users: BTreeSet<UserId> = p.keys().chain(a.keys()).copied().collect();
    if users.is_empty() {
        return 0.0;
    }
    let empty = Vec::new();
    let total: f64 = users
        .iter()
        .map(|u| {
            let hp = hist(p.get(u).unwrap_or(&empty));
            let ha = hist(a.get(u).unwrap_or(&empty));
            if hp.iter().sum::<f64>() == 0.0 && ha.iter().sum::<f64>() == 0.0 {
                0.0
            } else {
                jsd(&hp, &ha)
            }
        })
        .sum();
    total / users.len() as f64
}

/// Histogram of per-trip straight-line distances in 1 km bins.
pub fn trip_distance_histogram(days: &[&DailyTrajectory], grid: &CityGrid) -> Vec<f64> {
    let mut h = Vec::new();
    for d in days {
        for_each_trip(d, |_, a, b| add_to_bin(&mut h, distance_bin(grid.distance_km(a, b))));
    }
    h
}

/// Histogram of departure slots (the last slot spent at the origin).
pub fn departure_histogram(days: &[&DailyTrajectory]) -> Vec<f64> {
    let mut h = Vec::new();
    for d in days {
        for_each_trip(d, |s, _, _| add_to_bin(&mut h, s));
    }
    h
}

/// Per-user JSD of trip distance distributions, averaged over users.
pub fn travel_dist_jsd(pred: &[DailyTrajectory], actual: &[DailyTrajectory], grid: &CityGrid) -> f64 {
    mean_user_jsd(pred, actual, |d| trip_distance_histogram(d, grid))
}

/// Per-user JSD of departure time distributions, averaged over users.
pub fn depart_time_jsd(pred: &[DailyTrajectory], actual: &[DailyTrajectory]) -> f64 {
    mean_user_jsd(pred, actual, departure_histogram)
}

/// Total distance travelled in one day; zero for a full-day stay.
pub fn daily_travel_distance(traj: &DailyTrajectory, grid: &CityGrid) -> f64 {
    let mut km = 0.0;
    for_each_trip(traj, |_, a, b| km += grid.distance_km(a, b));
    km
}

/// Population histogram of daily travel distances in 1 km bins.
pub fn daily_distance_histogram(days: &[DailyTrajectory], grid: &CityGrid) -> Vec<usize> {
    let mut h = Vec::new();
    for d in days {
        let bin = distance_bin(daily_travel_distance(d, grid));
        if h.len() <= bin {
            h.resize(bin + 1, 0);
        }
        h[bin] += 1;
    }
    h
}

/// Pairs predictions with the actual day of the same user and day index.
/// Predictions without a counterpart are dropped.
pub fn pair_by_day(pred: &[DailyTrajectory], actual: &[DailyTrajectory]) -> (Vec<DailyTrajectory>, Vec<DailyTrajectory>) {
    let index: BTreeMap<(UserId, u32), &DailyTrajectory> = actual.iter().map(|d| ((d.user, d.day), d)).collect();
    let mut p = Vec::new();
    let mut a = Vec::new();
    for d in pred {
        if let Some(&x) = index.get(&(d.user, d.day)) {
            p.push(d.clone());
            a.push(x.clone());
        }
    }
    (p, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1 for the first forecast day.
    pub horizon: usize,
    pub acc: f64,
    pub dev_dist_km: f64,
    pub n_days: usize,
}

/// Accuracy and deviation distance by forecast horizon. A prediction's
/// horizon counts from the earliest predicted day of its user.
pub fn seven_day_curves(pred: &[DailyTrajectory], actual: &[DailyTrajectory], grid: &CityGrid) -> Result<Vec<HorizonMetrics>> {
    let first: BTreeMap<UserId, u32> = pred.iter().fold(BTreeMap::new(), |mut m, d| {
        let e = m.entry(d.user).or_insert(d.day);
        *e = (*e).min(d.day);
        m
    });
    let (p, a) = pair_by_day(pred, actual);
    let mut by_h: BTreeMap<usize, (Vec<DailyTrajectory>, Vec<DailyTrajectory>)> = BTreeMap::new();
    for (x, y) in p.into_iter().zip(a) {
        let h = (x.day - first[&x.user]) as usize + 1;
        let e = by_h.entry(h).or_default();
        e.0.push(x);
        e.1.push(y);
    }
    by_h.into_iter()
        .map(|(horizon, (p, a))| {
            Ok(HorizonMetrics {
                horizon,
                acc: accuracy(&p, &a)?,
                dev_dist_km: deviation_distance(&p, &a, grid)?,
                n_days: p.len(),
            })
        })
        .collect()
}

/// Copies the same weekday one week earlier for every target day that has
/// such a predecessor.
pub fn persistence_baseline<'a>(
    histories: impl IntoIterator<Item = &'a crate::traj::UserHistory>,
    targets: std::ops::Range<u32>,
) -> (Vec<DailyTrajectory>, Vec<DailyTrajectory>) {
    let mut pred = Vec::new();
    let mut actual = Vec::new();
    for h in histories {
        for (&day, t) in h.days.range(targets.clone()) {
            let Some(prev) = day.checked_sub(7).and_then(|d| h.get(d)) else { continue };
            let mut p = prev.clone();
            p.day = day;
            p.weekday = t.weekday;
            pred.push(p);
            actual.push(t.clone());
        }
    }
    (pred, actual)
}

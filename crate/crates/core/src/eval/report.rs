//! Bundled metrics for one prediction file and its plot-ready tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::*;
use crate::synth::io::{write_atomic, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowScores {
    pub cell_r2: f64,
    pub cell_cpc: f64,
    pub admin_r2: f64,
    pub admin_cpc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// "day" or "week".
    pub task: String,
    pub n_days: usize,
    pub acc: f64,
    pub dev_dist_km: f64,
    pub travel_dist_jsd: f64,
    pub depart_time_jsd: f64,
    pub flows: FlowScores,
    /// Share of actual days covered by the ten most common actual motifs.
    pub top10_motif_coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curves: Option<Vec<HorizonMetrics>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub motifs_actual: Vec<MotifShare>,
    pub motifs_pred: Vec<MotifShare>,
    pub daily_distance_actual: Vec<usize>,
    pub daily_distance_pred: Vec<usize>,
    pub cell_flows: Vec<(u32, u32, f64, f64)>,
    pub admin_flows: Vec<(u32, u32, f64, f64)>,
}

/// Scores predictions against the actual days they share a (user, day)
/// key with. `task` is "day" or "week"; week reports carry horizon curves.
pub fn evaluate(pred: &[DailyTrajectory], actual: &[DailyTrajectory], grid: &CityGrid, task: &str) -> Result<Evaluation> {
    let (p, a) = pair_by_day(pred, actual);
    if p.is_empty() {
        return Err(Error::Config("no prediction matches an actual (user, day)".into()));
    }
    let curves = match task {
        "day" => None,
        "week" => Some(seven_day_curves(&p, &a, grid)?),
        other => return Err(Error::Config(format!("unknown task {other:?}, expected day or week"))),
    };
    let cell = (od_flows(&a, FlowLevel::Cell, grid), od_flows(&p, FlowLevel::Cell, grid));
    let admin = (od_flows(&a, FlowLevel::Admin, grid), od_flows(&p, FlowLevel::Admin, grid));
    let motifs_actual = motif_distribution(&a);
    let motifs_pred = motif_distribution(&p);
    let report = MetricReport {
        task: task.to_string(),
        n_days: p.len(),
        acc: accuracy(&p, &a)?,
        dev_dist_km: deviation_distance(&p, &a, grid)?,
        travel_dist_jsd: travel_dist_jsd(&p, &a, grid),
        depart_time_jsd: depart_time_jsd(&p, &a),
        flows: FlowScores {
            cell_r2: r_squared(&cell.0, &cell.1),
            cell_cpc: cpc(&cell.0, &cell.1),
            admin_r2: r_squared(&admin.0, &admin.1),
            admin_cpc: cpc(&admin.0, &admin.1),
        },
        top10_motif_coverage: motifs_actual.iter().take(10).map(|m| m.fraction).sum(),
        curves,
    };
    Ok(Evaluation {
        report,
        daily_distance_actual: daily_distance_histogram(&a, grid),
        daily_distance_pred: daily_distance_histogram(&p, grid),
        motifs_actual,
        motifs_pred,
        cell_flows: scatter_pairs(&cell.0, &cell.1),
        admin_flows: scatter_pairs(&admin.0, &admin.1),
    })
}

fn motif_csv(e: &Evaluation) -> String {
    let pred: BTreeMap<MotifId, &MotifShare> = e.motifs_pred.iter().map(|m| (m.motif, m)).collect();
    let mut s = String::from("rank,motif,nodes,edges,actual_count,actual_fraction,pred_count,pred_fraction\n");
    for m in e.motifs_actual.iter().take(10) {
        let (pc, pf) = pred.get(&m.motif).map_or((0, 0.0), |p| (p.count, p.fraction));
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", m.rank, m.motif, m.nodes, m.edges, m.count, m.fraction, pc, pf);
    }
    s
}

fn histogram_csv(a: &[usize], p: &[usize]) -> String {
    let mut s = String::from("bin_km,actual,predicted\n");
    for i in 0..a.len().max(p.len()) {
        let _ = writeln!(
            s,
            "{},{},{}",
            i as f64 * DISTANCE_BIN_KM,
            a.get(i).copied().unwrap_or(0),
            p.get(i).copied().unwrap_or(0)
        );
    }
    s
}

fn flows_csv(pairs: &[(u32, u32, f64, f64)]) -> String {
    let mut s = String::from("origin,destination,actual,predicted\n");
    for (o, d, a, p) in pairs {
        let _ = writeln!(s, "{o},{d},{a},{p}");
    }
    s
}

fn curves_csv(c: &[HorizonMetrics]) -> String {
    let mut s = String::from("horizon,acc,dev_dist_km,n_days\n");
    for m in c {
        let _ = writeln!(s, "{},{},{},{}", m.horizon, m.acc, m.dev_dist_km, m.n_days);
    }
    s
}

/// Writes `metrics.json` and the CSV tables into `dir`; returns the file
/// names written.
pub fn write_report(dir: &Path, e: &Evaluation) -> Result<Vec<String>> {
    let mut files = vec![(
        "motifs.csv",
        motif_csv(e),
    ), (
        "daily_distance.csv",
        histogram_csv(&e.daily_distance_actual, &e.daily_distance_pred),
    ), (
        "od_cell.csv",
        flows_csv(&e.cell_flows),
    ), (
        "od_admin.csv",
        flows_csv(&e.admin_flows),
    )];
    if let Some(c) = &e.report.curves {
        files.push(("curves.csv", curves_csv(c)));
    }
    write_json(&e.report, &dir.join("metrics.json"))?;
    let mut names = vec!["metrics.json".to_string()];
    for (name, body) in files {
        write_atomic(&dir.join(name), body.as_bytes())?;
        names.push(name.to_string());
    }
    Ok(names)
}

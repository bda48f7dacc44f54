//! Browser bindings: a small synthetic city whose weekly routines,
//! decoupled chains, daily motifs and SEIR curves can be explored from a
//! static page. Every entry point returns a JSON string.

use mstdp::epi::{build_transition_matrices, census, run_simulation, SeirParams};
use mstdp::eval::{extract_motif, motif_distribution, MotifId};
use mstdp::synth::{synthesize, SynthConfig, SyntheticCorpus};
use mstdp::traj::{decouple, DailyTrajectory};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

const DEMO_AGENTS: usize = 60;

fn corpus(seed: u32) -> Result<SyntheticCorpus, String> {
    let cfg = SynthConfig {
        seed: seed as u64,
        agents: DEMO_AGENTS,
        days: 14,
        grid_width: 10,
        grid_height: 10,
        admins: 4,
        ..SynthConfig::default()
    };
    synthesize(&cfg).map_err(|e| e.to_string())
}

fn to_json(v: impl Serialize) -> String {
    serde_json::to_string(&v).expect("demo values serialise")
}

fn error_json(msg: String) -> String {
    to_json(json!({ "error": msg }))
}

/// Directed edges of a canonical motif, for drawing.
pub fn motif_edges(m: &MotifId) -> Vec<(usize, usize)> {
    match *m {
        MotifId::Canonical { nodes, code } => {
            let n = nodes as usize;
            let mut out = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    if code >> (63 - (a * n + b)) & 1 == 1 {
                        out.push((a, b));
                    }
                }
            }
            out
        }
        MotifId::Large { .. } => Vec::new(),
    }
}

fn day_json(d: &DailyTrajectory) -> serde_json::Value {
    let (loc, dur) = decouple(d);
    json!({
        "day": d.day,
        "weekday": d.weekday,
        "slots": d.slots.iter().map(|c| c.0).collect::<Vec<_>>(),
        "locations": loc.as_slice().iter().map(|c| c.0).collect::<Vec<_>>(),
        "durations": dur.as_slice(),
        "motif": extract_motif(d).to_string(),
    })
}

fn week_impl(seed: u32, agent: u32) -> Result<String, String> {
    let c = corpus(seed)?;
    let h = c
        .histories
        .get(agent as usize)
        .ok_or_else(|| format!("agent must be below {DEMO_AGENTS}"))?;
    let p = &c.agents[agent as usize];
    Ok(to_json(json!({
        "width": c.grid.width,
        "height": c.grid.height,
        "admin_of": c.grid.admin_of.iter().map(|a| a.0).collect::<Vec<_>>(),
        "home": p.home.0,
        "work": p.work.0,
        "days": h.days.values().take(7).map(day_json).collect::<Vec<_>>(),
    })))
}

/// One agent's first week: raw slots, location/duration chains and motif
/// per day, plus the grid layout.
#[wasm_bindgen]
pub fn agent_week(seed: u32, agent: u32) -> String {
    week_impl(seed, agent).unwrap_or_else(error_json)
}

/// Ten most common daily motifs across the city with their edge lists.
#[wasm_bindgen]
pub fn top_motifs(seed: u32) -> String {
    match corpus(seed) {
        Ok(c) => {
            let days: Vec<DailyTrajectory> = c.histories.iter().flat_map(|h| h.days.values().cloned()).collect();
            let top: Vec<_> = motif_distribution(&days)
                .into_iter()
                .take(10)
                .map(|m| {
                    json!({
                        "rank": m.rank,
                        "id": m.motif.to_string(),
                        "nodes": m.nodes,
                        "edges": motif_edges(&m.motif),
                        "fraction": m.fraction,
                    })
                })
                .collect();
            to_json(top)
        }
        Err(e) => error_json(e),
    }
}

fn seir_impl(seed: u32, alpha: f64, beta: f64, seed_infected: u32) -> Result<String, String> {
    let c = corpus(seed)?;
    let days: Vec<DailyTrajectory> = c.histories.iter().flat_map(|h| h.days.values().cloned()).collect();
    let week: Vec<DailyTrajectory> = days.into_iter().filter(|d| d.day < 7).collect();
    let n = c.grid.n_admins();
    let m = build_transition_matrices(&week, &c.grid.admin_of, n).map_err(|e| e.to_string())?;
    let population = census(&week, &c.grid.admin_of, n, 100);
    let params = SeirParams {
        alpha,
        beta,
        ..SeirParams::default()
    };
    let steps = 7 * c.header.slots_per_day;
    let run = run_simulation(&m, &params, &population, seed_infected as u64, steps, seed as u64)
        .map_err(|e| e.to_string())?;
    Ok(to_json(json!({
        "r0": params.r0(),
        "population": population.iter().sum::<u64>(),
        "slots_per_day": c.header.slots_per_day,
        "infectious": run.infectious,
        "cumulative": run.cumulative,
    })))
}

/// Active and cumulative cases over one simulated week on the city's
/// first-week mobility.
#[wasm_bindgen]
pub fn seir_week(seed: u32, alpha: f64, beta: f64, seed_infected: u32) -> String {
    seir_impl(seed, alpha, beta, seed_infected).unwrap_or_else(error_json)
}

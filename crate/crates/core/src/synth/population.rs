//! Synthetic agents and their daily routines.
//!
//! Each agent owns a home, a workplace and one errand place. Every day it
//! draws one routine template from its weekday or weekend mix. Optional
//! reuse of last week's or yesterday's template adds extra serial
//! correlation (off by default). Noise adds timing jitter and short
//! excursions.

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::city::CityGrid;
use crate::error::{Error, Result};
use crate::traj::{weekday_of, CellId, DailyTrajectory, UserHistory, UserId};

/// Daily routine templates an agent chooses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    StayHome,
    Commute,
    CommuteWithStop,
    Errand,
    WorkWithLunch,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::StayHome,
        Template::Commute,
        Template::CommuteWithStop,
        Template::Errand,
        Template::WorkWithLunch,
    ];
}

const WEEKDAY_BASE_MIX: [f64; 5] = [0.05, 0.55, 0.15, 0.10, 0.15];
const WEEKEND_BASE_MIX: [f64; 5] = [0.45, 0.05, 0.05, 0.40, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub user: UserId,
    pub home: CellId,
    pub work: CellId,
    pub errand: CellId,
    /// Probabilities over [`Template::ALL`] on weekdays.
    pub motif_mix: Vec<f64>,
    pub weekend_mix: Vec<f64>,
    /// Per-day probability of a timing jitter and, independently, of an
    /// excursion to a random cell near home.
    pub noise_rate: f64,
    pub leave_hour: u32,
    pub return_hour: u32,
    pub errand_hour: u32,
}

impl AgentProfile {
    /// An agent who follows one template every weekday and stays home on
    /// weekends.
    pub fn pure(user: UserId, home: CellId, work: CellId, errand: CellId, weekday: Template) -> Self {
        let one_hot = |t: Template| {
            Template::ALL
                .iter()
                .map(|&x| if x == t { 1.0 } else { 0.0 })
                .collect()
        };
        Self {
            user,
            home,
            work,
            errand,
            motif_mix: one_hot(weekday),
            weekend_mix: one_hot(Template::StayHome),
            noise_rate: 0.0,
            leave_hour: 8,
            return_hour: 18,
            errand_hour: 13,
        }
    }
}

/// Knobs for [`generate_population_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub noise_rate: f64,
    /// Maximum home-to-work distance in km.
    pub max_commute_km: f64,
    /// Radius around home for errand places and noise excursions.
    pub local_radius_km: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        Self {
            noise_rate: 0.1,
            max_commute_km: 10.0,
            local_radius_km: 5.0,
        }
    }
}

/// Knobs for [`generate_trajectories_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutineParams {
    /// Probability of repeating the template used seven days earlier.
    pub weekly_reuse: f64,
    /// Probability of repeating yesterday's template when both days are of
    /// the same kind (weekday or weekend).
    pub daily_reuse: f64,
    pub epoch_weekday: u8,
    pub excursion_radius_km: f64,
}

impl Default for RoutineParams {
    fn default() -> Self {
        Self {
            weekly_reuse: 0.0,
            daily_reuse: 0.0,
            epoch_weekday: 0,
            excursion_radius_km: 5.0,
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, cells: &[CellId], weights: impl Fn(CellId) -> f64) -> CellId {
    let w: Vec<f64> = cells.iter().map(|&c| weights(c)).collect();
    let dist = WeightedIndex::new(&w).expect("positive weights");
    cells[dist.sample(rng)]
}

fn perturbed_mix(rng: &mut ChaCha8Rng, base: &[f64; 5]) -> Vec<f64> {
    let raw: Vec<f64> = base.iter().map(|&p| p * rng.random_range(0.6..1.4)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

pub fn generate_population(grid: &CityGrid, n_agents: usize, seed: u64) -> Vec<AgentProfile> {
    generate_population_with(grid, n_agents, seed, &PopulationParams::default())
}

pub fn generate_population_with(
    grid: &CityGrid,
    n_agents: usize,
    seed: u64,
    params: &PopulationParams,
) -> Vec<AgentProfile> {
    let all_cells: Vec<CellId> = (0..grid.n_cells() as u32).map(CellId).collect();
    (0..n_agents)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a9e7);
            rng.set_stream(i as u64);
            let home = pick_weighted(&mut rng, &all_cells, |c| grid.residential[c.index()]);
            let near_work: Vec<CellId> = grid
                .cells_within(home, params.max_commute_km)
                .into_iter()
                .filter(|&c| c != home)
                .collect();
            let work = pick_weighted(&mut rng, &near_work, |c| grid.attractiveness[c.index()]);
            let local: Vec<CellId> = grid
                .cells_within(home, params.local_radius_km)
                .into_iter()
                .filter(|&c| c != home && c != work)
                .collect();
            let errand = if local.is_empty() {
                work
            } else {
                pick_weighted(&mut rng, &local, |c| grid.attractiveness[c.index()])
            };
            AgentProfile {
                user: UserId(i as u32),
                home,
                work,
                errand,
                motif_mix: perturbed_mix(&mut rng, &WEEKDAY_BASE_MIX),
                weekend_mix: perturbed_mix(&mut rng, &WEEKEND_BASE_MIX),
                noise_rate: params.noise_rate,
                leave_hour: rng.random_range(7..=9),
                return_hour: rng.random_range(16..=19),
                errand_hour: rng.random_range(10..=15),
            }
        })
        .collect()
}

fn is_weekend(weekday: u8) -> bool {
    weekday >= 5
}

/// Fills `[from, to)` hours (scaled to slots) with `cell`.
fn paint(slots: &mut [CellId], per_hour: usize, from: u32, to: u32, cell: CellId) {
    let t = slots.len();
    let a = (from as usize * per_hour).min(t);
    let b = (to as usize * per_hour).min(t);
    for s in &mut slots[a..b] {
        *s = cell;
    }
}

fn render(agent: &AgentProfile, template: Template, shift: i32, slots_per_day: usize) -> Vec<CellId> {
    let per_hour = slots_per_day / 24;
    let leave = (agent.leave_hour as i32 + shift).max(6) as u32;
    let ret = (agent.return_hour as i32 + shift).clamp(leave as i32 + 2, 21) as u32;
    let mut slots = vec![agent.home; slots_per_day];
    match template {
        Template::StayHome => {}
        Template::Commute => paint(&mut slots, per_hour, leave, ret, agent.work),
        Template::CommuteWithStop => {
            paint(&mut slots, per_hour, leave, ret, agent.work);
            paint(&mut slots, per_hour, ret, ret + 2, agent.errand);
        }
        Template::Errand => {
            let start = (agent.errand_hour as i32 + shift).max(7) as u32;
            paint(&mut slots, per_hour, start, start + 2, agent.errand);
        }
        Template::WorkWithLunch => {
            paint(&mut slots, per_hour, leave, ret, agent.work);
            paint(&mut slots, per_hour, 12, 13, agent.errand);
        }
    }
    slots
}

pub fn generate_trajectories(
    grid: &CityGrid,
    agents: &[AgentProfile],
    n_days: usize,
    slots_per_day: usize,
    seed: u64,
) -> Result<Vec<UserHistory>> {
    generate_trajectories_with(grid, agents, n_days, slots_per_day, seed, &RoutineParams::default())
}

pub fn generate_trajectories_with(
    grid: &CityGrid,
    agents: &[AgentProfile],
    n_days: usize,
    slots_per_day: usize,
    seed: u64,
    params: &RoutineParams,
) -> Result<Vec<UserHistory>> {
    if n_days < 14 {
        return Err(Error::Config(format!(
            "need at least 14 days of trajectories, got {n_days}"
        )));
    }
    if slots_per_day == 0 || slots_per_day % 24 != 0 {
        return Err(Error::Config(format!(
            "slots per day must be a positive multiple of 24, got {slots_per_day}"
        )));
    }
    let mut out = Vec::with_capacity(agents.len());
    for agent in agents {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0c0d);
        rng.set_stream(agent.user.0 as u64);
        let excursion_cells = grid.cells_within(agent.home, params.excursion_radius_km);
        let weekday_mix = WeightedIndex::new(&agent.motif_mix).map_err(|e| Error::Config(e.to_string()))?;
        let weekend_mix = WeightedIndex::new(&agent.weekend_mix).map_err(|e| Error::Config(e.to_string()))?;

        let mut templates: Vec<Template> = Vec::with_capacity(n_days);
        let mut history = UserHistory::new(agent.user, slots_per_day);
        for day in 0..n_days {
            let weekday = weekday_of(day as u32, params.epoch_weekday);
            let weekend = is_weekend(weekday);
            let u: f64 = rng.random();
            let template = if day >= 7 && u < params.weekly_reuse {
                templates[day - 7]
            } else if day >= 1
                && u < params.weekly_reuse + params.daily_reuse
                && is_weekend(weekday_of(day as u32 - 1, params.epoch_weekday)) == weekend
            {
                templates[day - 1]
            } else if weekend {
                Template::ALL[weekend_mix.sample(&mut rng)]
            } else {
                Template::ALL[weekday_mix.sample(&mut rng)]
            };
            templates.push(template);

            let jitter: f64 = rng.random();
            let shift = if jitter < agent.noise_rate {
                if rng.random::<bool>() { 1 } else { -1 }
            } else {
                0
            };
            let mut slots = render(agent, template, shift, slots_per_day);

            let excursion: f64 = rng.random();
            if excursion < agent.noise_rate {
                let per_hour = slots_per_day / 24;
                let cell = excursion_cells[rng.random_range(0..excursion_cells.len())];
                let start = rng.random_range(8..21u32);
                let len = rng.random_range(1..=2u32);
                paint(&mut slots, per_hour, start, start + len, cell);
            }

            history.insert(DailyTrajectory::new(agent.user, day as u32, weekday, slots)?)?;
        }
        out.push(history);
    }
    Ok(out)
}

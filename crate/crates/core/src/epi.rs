//! SEIR metapopulation simulation over admin regions, with population
//! movement driven by trajectory-derived transition matrices.

use std::collections::BTreeMap;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::AdminId;
use crate::traj::{DailyTrajectory, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeirParams {
    /// Close contacts per step.
    pub alpha: f64,
    /// Infection probability per contact.
    pub beta: f64,
    /// Per-step probability of leaving the exposed state.
    pub p_inf: f64,
    /// Per-step probability of leaving the infectious state.
    pub p_rem: f64,
}

impl Default for SeirParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.1,
            p_inf: 1.0 / (3.0 * 24.0),
            p_rem: 1.0 / (7.0 * 24.0),
        }
    }
}

impl SeirParams {
    pub fn r0(&self) -> f64 {
        self.alpha * self.beta / self.p_rem
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [("beta", self.beta), ("p_inf", self.p_inf), ("p_rem", self.p_rem)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Row-stochastic `n x n` matrices, one per simulation step of a cycle.
/// A cycle covers every observed day of the source trajectories (`T`
/// matrices for one day, `7T` for a week) and repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrices {
    pub n_regions: usize,
    pub slots_per_day: usize,
    /// `matrices[t][i * n + j]`: probability of moving from `i` to `j`
    /// between step `t` and the next.
    pub matrices: Vec<Vec<f64>>,
}

impl TransitionMatrices {
    pub fn steps(&self) -> usize {
        self.matrices.len()
    }

    pub fn row(&self, t: usize, i: usize) -> &[f64] {
        let n = self.n_regions;
        &self.matrices[t % self.matrices.len()][i * n..(i + 1) * n]
    }

    pub fn identity(n_regions: usize, slots_per_day: usize) -> Self {
        let mut m = vec![0.0; n_regions * n_regions];
        for i in 0..n_regions {
            m[i * n_regions + i] = 1.0;
        }
        Self {
            n_regions,
            slots_per_day,
            matrices: vec![m; slots_per_day],
        }
    }
}

/// Counts users in region `i` at one slot and region `j` at the following
/// slot, then row-normalises; one block of `T` matrices per distinct day
/// index, in day order. The last slot pairs with slot 0 of the user's
/// next day when present, otherwise with slot 0 of the same day. Rows
/// without observations become identity rows.
pub fn build_transition_matrices(days: &[DailyTrajectory], admin_of: &[AdminId], n_regions: usize) -> Result<TransitionMatrices> {
    let Some(first) = days.first() else {
        return Err(Error::Config("no trajectories to build transition matrices from".into()));
    };
    let t_slots = first.slots.len();
    let index: BTreeMap<(UserId, u32), &DailyTrajectory> = days.iter().map(|d| ((d.user, d.day), d)).collect();
    let day_block: BTreeMap<u32, usize> = days
        .iter()
        .map(|d| d.day)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(b, d)| (d, b))
        .collect();
    let mut counts = vec![vec![0u64; n_regions * n_regions]; t_slots * day_block.len()];
    let region = |c: crate::traj::CellId| -> Result<usize> {
        admin_of
            .get(c.index())
            .map(|a| a.index())
            .filter(|&a| a < n_regions)
            .ok_or_else(|| Error::InvalidTrajectory(format!("cell {} outside the admin map", c.0)))
    };
    for d in days {
        if d.slots.len() != t_slots {
            return Err(Error::SlotMismatch {
                context: format!("user {} day {}", d.user.0, d.day),
                expected: t_slots,
                found: d.slots.len(),
            });
        }
        let base = day_block[&d.day] * t_slots;
        for t in 0..t_slots {
            let next = if t + 1 < t_slots {
                d.slots[t + 1]
            } else {
                index.get(&(d.user, d.day + 1)).map_or(d.slots[0], |n| n.slots[0])
            };
            counts[base + t][region(d.slots[t])? * n_regions + region(next)?] += 1;
        }
    }
    let matrices = counts
        .into_iter()
        .map(|c| {
            let mut m = vec![0.0; n_regions * n_regions];
            for i in 0..n_regions {
                let row = &c[i * n_regions..(i + 1) * n_regions];
                let total: u64 = row.iter().sum();
                if total == 0 {
                    m[i * n_regions + i] = 1.0;
                } else {
                    for j in 0..n_regions {
                        m[i * n_regions + j] = row[j] as f64 / total as f64;
                    }
                }
            }
            m
        })
        .collect();
    Ok(TransitionMatrices {
        n_regions,
        slots_per_day: t_slots,
        matrices,
    })
}

/// Region populations: users counted in the region where they spend slot
/// 0 of their first observed day (their home), times `multiplier`.
pub fn census(days: &[DailyTrajectory], admin_of: &[AdminId], n_regions: usize, multiplier: u64) -> Vec<u64> {
    let mut first: BTreeMap<UserId, &DailyTrajectory> = BTreeMap::new();
    for d in days {
        let e = first.entry(d.user).or_insert(d);
        if d.day < e.day {
            *e = d;
        }
    }
    let mut out = vec![0u64; n_regions];
    for d in first.values() {
        out[admin_of[d.slots[0].index()].index()] += multiplier;
    }
    out
}

/// Compartment counts per region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpiState {
    pub s: Vec<u64>,
    pub e: Vec<u64>,
    pub i: Vec<u64>,
    pub r: Vec<u64>,
}

impl EpiState {
    pub fn susceptible(population: &[u64]) -> Self {
        let n = population.len();
        Self {
            s: population.to_vec(),
            e: vec![0; n],
            i: vec![0; n],
            r: vec![0; n],
        }
    }

    pub fn n_regions(&self) -> usize {
        self.s.len()
    }

    pub fn region_total(&self, k: usize) -> u64 {
        self.s[k] + self.e[k] + self.i[k] + self.r[k]
    }

    pub fn total(&self) -> u64 {
        (0..self.n_regions()).map(|k| self.region_total(k)).sum()
    }

    pub fn infectious(&self) -> u64 {
        self.i.iter().sum()
    }

    /// Moves `n` susceptible individuals, drawn uniformly from the whole
    /// population, to the infectious state. Fails if fewer are available.
    pub fn seed_infections(&mut self, n: u64, rng: &mut ChaCha8Rng) -> Result<()> {
        let available: u64 = self.s.iter().sum();
        if n > available {
            return Err(Error::Config(format!("cannot seed {n} infections into {available} susceptibles")));
        }
        for _ in 0..n {
            let w = WeightedIndex::new(&self.s).expect("susceptibles remain");
            let k = w.sample(rng);
            self.s[k] -= 1;
            self.i[k] += 1;
        }
        Ok(())
    }
}

fn binomial(n: u64, p: f64, rng: &mut ChaCha8Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Probability that one susceptible in a region with `i` infectious out of
/// `n` people is exposed during a step.
pub fn exposure_probability(params: &SeirParams, i: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (params.alpha * params.beta * i as f64 / n as f64).min(1.0)
}

/// One epidemic step inside each region; returns the number of new
/// exposures.
pub fn seir_step(state: &mut EpiState, params: &SeirParams, rng: &mut ChaCha8Rng) -> u64 {
    let mut new_cases = 0;
    for k in 0..state.n_regions() {
        let p = exposure_probability(params, state.i[k], state.region_total(k));
        let exposed = binomial(state.s[k], p, rng);
        let infectious = binomial(state.e[k], params.p_inf, rng);
        let removed = binomial(state.i[k], params.p_rem, rng);
        state.s[k] -= exposed;
        state.e[k] = state.e[k] + exposed - infectious;
        state.i[k] = state.i[k] + infectious - removed;
        state.r[k] += removed;
        new_cases += exposed;
    }
    new_cases
}

fn multinomial_into(n: u64, row: &[f64], out: &mut [u64], rng: &mut ChaCha8Rng) {
    let mut left = n;
    let mut mass = 1.0;
    for (j, &p) in row.iter().enumerate() {
        if left == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let k = if mass <= p { left } else { binomial(left, p / mass, rng) };
        out[j] += k;
        left -= k;
        mass -= p;
    }
    // rounding can leave a remainder; it stays in the last positive entry
    if left > 0 {
        let j = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        out[j] += left;
    }
}

/// Every individual independently moves according to its current region's
/// row of the matrix for slot `t`.
pub fn move_population(state: &mut EpiState, matrices: &TransitionMatrices, t: usize, rng: &mut ChaCha8Rng) {
    let n = state.n_regions();
    let mut next = EpiState::susceptible(&vec![0; n]);
    for k in 0..n {
        let row = matrices.row(t, k);
        multinomial_into(state.s[k], row, &mut next.s, rng);
        multinomial_into(state.e[k], row, &mut next.e, rng);
        multinomial_into(state.i[k], row, &mut next.i, rng);
        multinomial_into(state.r[k], row, &mut next.r, rng);
    }
    *state = next;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSeries {
    /// Active infectious count after each step (index 0 is the seeded state).
    pub infectious: Vec<u64>,
    /// Cumulative new exposures after each step.
    pub cumulative: Vec<u64>,
}

/// Seeds `n_seed` infections then alternates an epidemic step and a
/// movement step, cycling through the slot matrices.
pub fn run_simulation(
    matrices: &TransitionMatrices,
    params: &SeirParams,
    population: &[u64],
    n_seed: u64,
    steps: usize,
    seed: u64,
) -> Result<SimSeries> {
    params.validate()?;
    if population.len() != matrices.n_regions {
        return Err(Error::Shape(format!(
            "{} region populations for {} regions",
            population.len(),
            matrices.n_regions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = EpiState::susceptible(population);
    state.seed_infections(n_seed, &mut rng)?;
    Ok(simulate(&mut state, matrices, params, steps, &mut rng))
}

/// Advances `state` by `steps` steps of epidemic update followed by
/// movement.
pub fn simulate(
    state: &mut EpiState,
    matrices: &TransitionMatrices,
    params: &SeirParams,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> SimSeries {
    let mut infectious = vec![state.infectious()];
    let mut cumulative = vec![0];
    let mut total = 0;
    for step in 0..steps {
        total += seir_step(state, params, rng);
        move_population(state, matrices, step, rng);
        infectious.push(state.infectious());
        cumulative.push(total);
    }
    SimSeries { infectious, cumulative }
}

/// Per-individual variant of [`simulate`] for small populations: every
/// person is tracked and draws its own transitions. Statistically the same
/// process as the aggregate version.
pub fn simulate_agents(
    state: &mut EpiState,
    matrices: &TransitionMatrices,
    params: &SeirParams,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> SimSeries {
    use rand::Rng;
    // (region, compartment 0..4 = S E I R)
    let mut people: Vec<(usize, u8)> = Vec::with_capacity(state.total() as usize);
    for k in 0..state.n_regions() {
        for (c, &n) in [state.s[k], state.e[k], state.i[k], state.r[k]].iter().enumerate() {
            people.extend(std::iter::repeat_n((k, c as u8), n as usize));
        }
    }
    let mut infectious = vec![state.infectious()];
    let mut cumulative = vec![0];
    let mut total = 0;
    for step in 0..steps {
        let p_exp: Vec<f64> = (0..state.n_regions())
            .map(|k| exposure_probability(params, state.i[k], state.region_total(k)))
            .collect();
        for (k, c) in people.iter_mut() {
            let p = match *c {
                0 => p_exp[*k],
                1 => params.p_inf,
                2 => params.p_rem,
                _ => 0.0,
            };
            if p > 0.0 && rng.random::<f64>() < p {
                *c += 1;
                if *c == 1 {
                    total += 1;
                }
            }
            let row = matrices.row(step, *k);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut dest = row.iter().rposition(|&x| x > 0.0).unwrap_or(*k);
            for (j, &x) in row.iter().enumerate() {
                acc += x;
                if u < acc {
                    dest = j;
                    break;
                }
            }
            *k = dest;
        }
        let n = state.n_regions();
        *state = EpiState::susceptible(&vec![0; n]);
        for &(k, c) in &people {
            match c {
                0 => state.s[k] += 1,
                1 => state.e[k] += 1,
                2 => state.i[k] += 1,
                _ => state.r[k] += 1,
            }
        }
        infectious.push(state.infectious());
        cumulative.push(total);
    }
    SimSeries { infectious, cumulative }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMae {
    pub slots_per_day: usize,
    /// Per-step mean absolute difference in active cases.
    pub mae_infectious: Vec<f64>,
    /// Per-step mean absolute difference in cumulative new cases.
    pub mae_cumulative: Vec<f64>,
}

impl EnsembleMae {
    /// Mean over the steps of day `day` (1-based).
    pub fn day_mean(series: &[f64], slots_per_day: usize, day: usize) -> f64 {
        let start = (day - 1) * slots_per_day + 1;
        let end = (day * slots_per_day + 1).min(series.len());
        let s = &series[start.min(end)..end];
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    }

    pub fn day_mean_infectious(&self, day: usize) -> f64 {
        Self::day_mean(&self.mae_infectious, self.slots_per_day, day)
    }

    pub fn day_mean_cumulative(&self, day: usize) -> f64 {
        Self::day_mean(&self.mae_cumulative, self.slots_per_day, day)
    }
}

/// Runs `n_runs` paired simulations (run `r` uses seed `seed + r` for both
/// matrix sets) and averages the absolute differences per step.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_mae(
    actual: &TransitionMatrices,
    pred: &TransitionMatrices,
    params: &SeirParams,
    population: &[u64],
    n_seed: u64,
    steps: usize,
    n_runs: usize,
    seed: u64,
) -> Result<EnsembleMae> {
    if actual.slots_per_day != pred.slots_per_day {
        return Err(Error::SlotMismatch {
            context: "predicted transition matrices".into(),
            expected: actual.slots_per_day,
            found: pred.slots_per_day,
        });
    }
    if actual.n_regions != pred.n_regions {
        return Err(Error::Shape(format!(
            "{} actual regions, {} predicted",
            actual.n_regions, pred.n_regions
        )));
    }
    let mut mae_i = vec![0.0; steps + 1];
    let mut mae_c = vec![0.0; steps + 1];
    for r in 0..n_runs {
        let s = seed.wrapping_add(r as u64);
        let a = run_simulation(actual, params, population, n_seed, steps, s)?;
        let p = run_simulation(pred, params, population, n_seed, steps, s)?;
        for t in 0..=steps {
            mae_i[t] += a.infectious[t].abs_diff(p.infectious[t]) as f64;
            mae_c[t] += a.cumulative[t].abs_diff(p.cumulative[t]) as f64;
        }
    }
    let n = n_runs.max(1) as f64;
    Ok(EnsembleMae {
        slots_per_day: actual.slots_per_day,
        mae_infectious: mae_i.into_iter().map(|x| x / n).collect(),
        mae_cumulative: mae_c.into_iter().map(|x| x / n).collect(),
    })
}

//! The prediction network: graph embedder, hierarchical encoders, spatial
//! and temporal decoders, and next-day / next-week inference.

pub mod blocks;
pub mod config;
pub mod graph_embed;
pub mod repair;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{ChainEncoder, SpatialDecoder, TemporalDecoder, WeeklyEncoder};
pub use config::{ModelConfig, Vocab};
pub use graph_embed::{FlowAttention, GraphEmbedder, GraphInputs};
pub use repair::repair_durations;

use crate::error::{Error, Result};
use crate::graph::GraphBundle;
use crate::nn::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::traj::{
    decouple, recouple, CellId, DailyTrajectory, DurationChain, HistoryWindow, LocationChain, UserHistory, UserId,
    WINDOW_DAYS,
};

/// Decoupled chains of one day as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DayChains {
    pub locations: Vec<usize>,
    pub durations: Vec<usize>,
}

impl DayChains {
    pub fn from_traj(day: &DailyTrajectory) -> Self {
        let (loc, dur) = decouple(day);
        Self {
            locations: loc.as_slice().iter().map(|c| c.index()).collect(),
            durations: dur.as_slice().iter().map(|&d| d as usize).collect(),
        }
    }
}

/// Interned day chains, so each day is encoded once per batch.
#[derive(Debug, Clone, Default)]
pub struct DayArena {
    pub days: Vec<DayChains>,
    index: HashMap<(UserId, u32), usize>,
}

impl DayArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, day: &DailyTrajectory) -> usize {
        if let Some(&i) = self.index.get(&(day.user, day.day)) {
            return i;
        }
        let i = self.push(DayChains::from_traj(day));
        self.index.insert((day.user, day.day), i);
        i
    }

    /// Adds an anonymous entry, e.g. a predicted day.
    pub fn push(&mut self, chains: DayChains) -> usize {
        self.days.push(chains);
        self.days.len() - 1
    }

    pub fn get(&self, i: usize) -> &DayChains {
        &self.days[i]
    }
}

/// One prediction problem: seven history slots and optionally the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub user: UserId,
    pub target_day: u32,
    pub target_weekday: u8,
    /// Arena index of days `k-6..=k`.
    pub window: [Option<usize>; WINDOW_DAYS],
    pub target: Option<usize>,
}

impl Sample {
    pub fn from_window(arena: &mut DayArena, window: &HistoryWindow, user: UserId) -> Result<Self> {
        let (pos, first) = window
            .days
            .iter()
            .enumerate()
            .find_map(|(i, d)| d.map(|d| (i, d)))
            .ok_or_else(|| Error::InvalidTrajectory("history window has no observed day".into()))?;
        let target_weekday = ((first.weekday as usize + WINDOW_DAYS - pos) % 7) as u8;
        Ok(Self {
            user,
            target_day: window.end_day + 1,
            target_weekday,
            window: window.days.map(|d| d.map(|d| arena.intern(d))),
            target: None,
        })
    }

    /// Weekday of each window position; position 0 shares the target's.
    pub fn weekdays(&self) -> [u8; WINDOW_DAYS] {
        std::array::from_fn(|p| ((self.target_weekday as usize + p) % 7) as u8)
    }

    pub fn mask(&self) -> [bool; WINDOW_DAYS] {
        self.window.map(|d| d.is_some())
    }
}

/// Teacher-forced outputs of one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `(Σ (m_s + 1)) x vocab` location logits.
    pub logits: Var,
    /// `(Σ m_s) x 1` raw duration estimates.
    pub durations: Var,
    pub loc_targets: Vec<Option<usize>>,
    pub dur_targets: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub ce: Var,
    pub huber: Var,
}

/// History summaries of a batch, `B x d_zl` and `B x d_zt`.
#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub z_loc: Var,
    pub z_dur: Var,
}

/// Decoded chains before recoupling.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedChains {
    pub locations: Vec<CellId>,
    pub raw_durations: Vec<f64>,
    pub durations: DurationChain,
    /// The decoder reached `max_chain_len` without choosing EOS.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Mstdp {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub inputs: GraphInputs,
    graph: GraphEmbedder,
    dur_table: ParamId,
    special: ParamId,
    daily_loc: ChainEncoder,
    daily_dur: ChainEncoder,
    weekly_loc: WeeklyEncoder,
    weekly_dur: WeeklyEncoder,
    spatial: SpatialDecoder,
    temporal: TemporalDecoder,
}

impl Mstdp {
    /// Builds the network for `bundle` and initialises its parameters from
    /// `seed`.
    pub fn new(config: ModelConfig, bundle: &GraphBundle, seed: u64) -> Result<(Self, ParameterStore)> {
        config.validate()?;
        if bundle.slots_per_day != config.slots_per_day {
            return Err(Error::SlotMismatch {
                context: "graph".into(),
                expected: config.slots_per_day,
                found: bundle.slots_per_day,
            });
        }
        let c = &config;
        let t = c.slots_per_day;
        let max_len = t + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let inputs = GraphInputs::new(bundle);
        let vocab = Vocab { n_cells: inputs.n_cells };
        let graph = GraphEmbedder::new(
            &mut store,
            &mut rng,
            inputs.n_nodes,
            c.d_el,
            c.n_gnn_layers,
            c.attn_slope,
            c.gnn_slope,
        )?;
        let special = store.add_glorot("special_emb", 3, c.d_el, &mut rng)?;
        let dur_table = store.add_glorot("duration_emb", t + 1, c.d_et, &mut rng)?;
        let s = &mut store;
        let r = &mut rng;
        let daily_loc = ChainEncoder::new(s, r, "daily_loc", c.d_el, c.d_hl, c.n_heads, c.n_enc_layers, c.ff_mult, max_len)?;
        let daily_dur = ChainEncoder::new(s, r, "daily_dur", c.d_et, c.d_ht, c.n_heads, c.n_enc_layers, c.ff_mult, max_len)?;
        let weekly_loc = WeeklyEncoder::new(s, r, "weekly_loc", c.d_hl, c.d_zl, c.n_heads, c.n_enc_layers, c.ff_mult)?;
        let weekly_dur =
            WeeklyEncoder::new(s, r, "weekly_dur", c.d_ht + c.d_hl, c.d_zt, c.n_heads, c.n_enc_layers, c.ff_mult)?;
        let spatial = SpatialDecoder::new(
            s,
            r,
            c.d_el,
            c.d_hl,
            c.d_zl,
            vocab.size(),
            c.n_heads,
            c.n_dec_layers,
            c.ff_mult,
            max_len,
        )?;
        let temporal = TemporalDecoder::new(
            s,
            r,
            c.d_el,
            c.d_ht,
            c.d_zt,
            c.n_heads,
            c.n_dec_layers,
            c.ff_mult,
            max_len,
            t as f64 / 4.0,
        )?;
        Ok((
            Self {
                config,
                vocab,
                inputs,
                graph,
                dur_table,
                special,
                daily_loc,
                daily_dur,
                weekly_loc,
                weekly_dur,
                spatial,
                temporal,
            },
            store,
        ))
    }

    pub fn graph_embedder(&self) -> &GraphEmbedder {
        &self.graph
    }

    /// Location embeddings of every cell.
    pub fn graph_embed(&self, tape: &mut Tape, store: &ParameterStore) -> Var {
        self.graph.forward(tape, store, &self.inputs)
    }

    /// Token table: cells followed by SOS, EOS and PAD.
    fn token_table(&self, tape: &mut Tape, store: &ParameterStore, cell_emb: Var) -> Var {
        let special = tape.param(store, self.special);
        tape.concat_rows(&[cell_emb, special])
    }

    /// Location and duration weekly encoders.
    pub fn weekly_encoders(&self) -> (&WeeklyEncoder, &WeeklyEncoder) {
        (&self.weekly_loc, &self.weekly_dur)
    }

    /// Duration chain embedding rows.
    pub fn embed_duration_chain(&self, tape: &mut Tape, store: &ParameterStore, durations: &[usize]) -> Var {
        let table = tape.param(store, self.dur_table);
        tape.embedding_lookup(table, durations)
    }

    /// Daily representations of the given days, `U x d_hl` and `U x d_ht`.
    pub fn daily_encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        cell_emb: Var,
        days: &[&DayChains],
    ) -> (Var, Var) {
        let lengths: Vec<usize> = days.iter().map(|d| d.locations.len()).collect();
        let locs: Vec<usize> = days.iter().flat_map(|d| d.locations.iter().copied()).collect();
        let durs: Vec<usize> = days.iter().flat_map(|d| d.durations.iter().copied()).collect();
        let h_loc_in = tape.embedding_lookup(cell_emb, &locs);
        let h_loc = self.daily_loc.encode_pooled(tape, store, h_loc_in, &lengths);
        let h_dur_in = self.embed_duration_chain(tape, store, &durs);
        let h_dur = self.daily_dur.encode_pooled(tape, store, h_dur_in, &lengths);
        (h_loc, h_dur)
    }

    /// Weekly summaries from per-window daily representations; `rows[i]`
    /// indexes the rows of `h_loc`/`h_dur` for window position `i % 7` of
    /// sample `i / 7`.
    pub fn weekly_encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h_loc: Var,
        h_dur: Var,
        rows: Vec<Option<usize>>,
        weekdays: &[u8],
    ) -> Summary {
        let mask: Vec<bool> = rows.iter().map(Option::is_some).collect();
        let wl = tape.gather_rows(h_loc, rows.clone());
        let wd = tape.gather_rows(h_dur, rows);
        let wd = tape.concat_cols(&[wd, wl]);
        let z_loc = self.weekly_loc.encode(tape, store, wl, weekdays, &mask);
        let z_dur = self.weekly_dur.encode(tape, store, wd, weekdays, &mask);
        Summary { z_loc, z_dur }
    }

    /// Encodes the history windows of `samples`.
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        cell_emb: Var,
        arena: &DayArena,
        samples: &[Sample],
    ) -> Summary {
        let mut unique: HashMap<usize, usize> = HashMap::new();
        let mut order: Vec<usize> = Vec::new();
        let mut rows = Vec::with_capacity(samples.len() * WINDOW_DAYS);
        let mut weekdays = Vec::with_capacity(samples.len() * WINDOW_DAYS);
        for s in samples {
            for (slot, wd) in s.window.iter().zip(s.weekdays()) {
                rows.push(slot.map(|a| {
                    *unique.entry(a).or_insert_with(|| {
                        order.push(a);
                        order.len() - 1
                    })
                }));
                weekdays.push(wd);
            }
        }
        let days: Vec<&DayChains> = order.iter().map(|&a| arena.get(a)).collect();
        let (h_loc, h_dur) = self.daily_encode(tape, store, cell_emb, &days);
        self.weekly_encode(tape, store, h_loc, h_dur, rows, &weekdays)
    }

    /// Teacher-forced forward pass; every sample needs a target.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, arena: &DayArena, samples: &[Sample]) -> Forward {
        let cell_emb = self.graph_embed(tape, store);
        let summary = self.encode_history(tape, store, cell_emb, arena, samples);
        let targets: Vec<&DayChains> = samples
            .iter()
            .map(|s| arena.get(s.target.expect("teacher forcing needs a target day")))
            .collect();
        let table = self.token_table(tape, store, cell_emb);
        let mut tokens = Vec::new();
        let mut dec_lengths = Vec::new();
        let mut loc_targets = Vec::new();
        for t in &targets {
            tokens.push(self.vocab.sos());
            tokens.extend(&t.locations);
            dec_lengths.push(t.locations.len() + 1);
            loc_targets.extend(t.locations.iter().map(|&l| Some(l)));
            loc_targets.push(Some(self.vocab.eos()));
        }
        let logits = self.spatial.logits(tape, store, table, &tokens, &dec_lengths, summary.z_loc);

        let lengths: Vec<usize> = targets.iter().map(|t| t.locations.len()).collect();
        let locs: Vec<usize> = targets.iter().flat_map(|t| t.locations.iter().copied()).collect();
        let loc_emb = tape.embedding_lookup(cell_emb, &locs);
        let durations = self.temporal.durations(tape, store, loc_emb, &lengths, summary.z_dur);
        let dur_targets = targets
            .iter()
            .flat_map(|t| t.durations.iter().map(|&d| Some(d as f64)))
            .collect();
        Forward {
            logits,
            durations,
            loc_targets,
            dur_targets,
        }
    }

    /// Cross-entropy over location tokens (EOS included) plus `lambda`
    /// times the duration loss.
    pub fn loss_from(&self, tape: &mut Tape, fwd: &Forward) -> Loss {
        let ce = tape.cross_entropy(fwd.logits, fwd.loc_targets.clone());
        let huber = tape.huber(fwd.durations, fwd.dur_targets.clone());
        let weighted = tape.scale(huber, self.config.lambda);
        let total = tape.add(ce, weighted);
        Loss { total, ce, huber }
    }

    pub fn loss(&self, tape: &mut Tape, store: &ParameterStore, arena: &DayArena, samples: &[Sample]) -> Loss {
        let fwd = self.forward(tape, store, arena, samples);
        self.loss_from(tape, &fwd)
    }

    /// Greedy decoding of location chains followed by duration regression
    /// and repair.
    pub fn predict_chains(&self, store: &ParameterStore, arena: &DayArena, samples: &[Sample]) -> Result<Vec<PredictedChains>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let cell_emb = self.graph_embed(&mut tape, store);
        let summary = self.encode_history(&mut tape, store, cell_emb, arena, samples);
        let table = self.token_table(&mut tape, store, cell_emb);
        let cell_emb = tape.value(cell_emb).clone();
        let table = tape.value(table).clone();
        let z_loc = tape.value(summary.z_loc).clone();
        let z_dur = tape.value(summary.z_dur).clone();
        drop(tape);

        let chains = self.greedy_locations(store, &table, &z_loc);
        let lengths: Vec<usize> = chains.iter().map(|(c, _)| c.len()).collect();
        let mut tape = Tape::new();
        let cells = tape.constant(cell_emb);
        let memory = tape.constant(z_dur);
        let locs: Vec<usize> = chains.iter().flat_map(|(c, _)| c.iter().copied()).collect();
        let loc_emb = tape.embedding_lookup(cells, &locs);
        let raw = self.temporal.durations(&mut tape, store, loc_emb, &lengths, memory);
        let raw = tape.value(raw).data();
        let t = self.config.slots_per_day;
        let mut out = Vec::with_capacity(samples.len());
        let mut off = 0;
        for (locations, truncated) in chains {
            let m = locations.len();
            let raw_durations = raw[off..off + m].to_vec();
            off += m;
            out.push(PredictedChains {
                locations: locations.into_iter().map(|l| CellId(l as u32)).collect(),
                durations: repair_durations(&raw_durations, t)?,
                raw_durations,
                truncated,
            });
        }
        Ok(out)
    }

    /// Batched greedy decoding. A step may not repeat the previous
    /// location, the first step may not end the chain, and special tokens
    /// other than EOS are never chosen.
    fn greedy_locations(&self, store: &ParameterStore, table: &Tensor, z_loc: &Tensor) -> Vec<(Vec<usize>, bool)> {
        let n = z_loc.rows();
        let max_len = self.config.max_chain_len();
        let eos = self.vocab.eos();
        let n_cells = self.vocab.n_cells;
        let mut prefixes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut truncated = vec![false; n];
        let mut active: Vec<usize> = (0..n).collect();
        while !active.is_empty() {
            let mut tape = Tape::new();
            let table_v = tape.constant(table.clone());
            let mem = Tensor::from_rows(&active.iter().map(|&i| z_loc.row(i).to_vec()).collect::<Vec<_>>())
                .expect("uniform memory rows");
            let mem = tape.constant(mem);
            let mut tokens = Vec::new();
            let mut lengths = Vec::with_capacity(active.len());
            for &i in &active {
                tokens.push(self.vocab.sos());
                tokens.extend(&prefixes[i]);
                lengths.push(prefixes[i].len() + 1);
            }
            let logits = self.spatial.logits(&mut tape, store, table_v, &tokens, &lengths, mem);
            let logits = tape.value(logits);
            let mut row = 0;
            let mut still = Vec::with_capacity(active.len());
            for (&i, &len) in active.iter().zip(&lengths) {
                row += len;
                let scores = logits.row(row - 1);
                let prev = prefixes[i].last().copied();
                let mut best = None::<(usize, f64)>;
                for tok in (0..n_cells).chain(std::iter::once(eos)) {
                    if Some(tok) == prev || (tok == eos && prefixes[i].is_empty()) {
                        continue;
                    }
                    if best.is_none_or(|(_, s)| scores[tok] > s) {
                        best = Some((tok, scores[tok]));
                    }
                }
                let (tok, _) = best.expect("at least one admissible token");
                if tok == eos {
                    continue;
                }
                if prefixes[i].len() == max_len {
                    truncated[i] = true;
                    continue;
                }
                prefixes[i].push(tok);
                still.push(i);
            }
            active = still;
        }
        prefixes.into_iter().zip(truncated).collect()
    }

    /// Next-day trajectory for each window.
    pub fn predict_days(&self, store: &ParameterStore, windows: &[(UserId, HistoryWindow)]) -> Result<Vec<DailyTrajectory>> {
        let mut arena = DayArena::new();
        let samples = windows
            .iter()
            .map(|(u, w)| Sample::from_window(&mut arena, w, *u))
            .collect::<Result<Vec<_>>>()?;
        self.predict_samples(store, &arena, &samples)
    }

    /// Trajectories for prepared samples.
    pub fn predict_samples(&self, store: &ParameterStore, arena: &DayArena, samples: &[Sample]) -> Result<Vec<DailyTrajectory>> {
        let chains = self.predict_chains(store, arena, samples)?;
        samples
            .iter()
            .zip(chains)
            .map(|(s, c)| {
                let loc = LocationChain::new(c.locations)?;
                let slots = recouple(&loc, &c.durations, self.config.slots_per_day)?;
                DailyTrajectory::new(s.user, s.target_day, s.target_weekday, slots)
            })
            .collect()
    }

    /// Predicts day `k + 1` from the window ending at `k`.
    pub fn predict_next_day(&self, store: &ParameterStore, history: &UserHistory, k: u32) -> Result<DailyTrajectory> {
        let window = crate::traj::history_window(history, k);
        Ok(self.predict_days(store, &[(history.user, window)])?.remove(0))
    }

    /// Predicts days `k + 1 ..= k + 7`, feeding each prediction back as an
    /// observed day for the next one.
    pub fn predict_next_week(&self, store: &ParameterStore, history: &UserHistory, k: u32) -> Result<Vec<DailyTrajectory>> {
        Ok(self.predict_weeks(store, &[history], k)?.remove(0))
    }

    /// [`predict_next_week`](Self::predict_next_week) for many users at once.
    pub fn predict_weeks(&self, store: &ParameterStore, histories: &[&UserHistory], k: u32) -> Result<Vec<Vec<DailyTrajectory>>> {
        let mut overlays: Vec<UserHistory> = histories
            .iter()
            .map(|h| {
                let mut o = UserHistory::new(h.user, h.slots_per_day);
                for (_, d) in h.days.range(k.saturating_sub(WINDOW_DAYS as u32 - 1)..=k) {
                    o.insert(d.clone())?;
                }
                Ok(o)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::with_capacity(WINDOW_DAYS); histories.len()];
        for step in 0..WINDOW_DAYS as u32 {
            let end = k + step;
            let windows: Vec<(UserId, HistoryWindow)> = overlays
                .iter()
                .map(|o| (o.user, crate::traj::history_window(o, end)))
                .collect();
            let days = self.predict_days(store, &windows)?;
            drop(windows);
            for ((o, acc), d) in overlays.iter_mut().zip(out.iter_mut()).zip(days) {
                o.insert(d.clone())?;
                acc.push(d);
            }
        }
        Ok(out)
    }
}

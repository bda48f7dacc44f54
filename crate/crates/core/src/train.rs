//! Teacher-forced training with validation-based model selection.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBundle;
use crate::model::{DayArena, DayChains, ModelConfig, Mstdp, Sample};
use crate::nn::{Adam, Checkpoint, ParameterStore, Tape};
use crate::traj::{history_window, UserHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validate on at most this many samples (taken in order).
    pub val_limit: Option<usize>,
    /// When set, the learning rate follows a cosine from `lr` down to this
    /// value over `epochs`; otherwise it stays constant.
    pub lr_min: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 32,
            patience: Some(10),
            seed: 0,
            clip_norm: Some(1.0),
            val_limit: None,
            lr_min: None,
        }
    }
}

/// Samples sharing one day arena.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub arena: DayArena,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One sample per user and observed target day in `targets` whose
/// seven-day history window holds at least one observed day.
pub fn make_samples(histories: &[UserHistory], targets: Range<u32>) -> SampleSet {
    let mut set = SampleSet::default();
    for h in histories {
        for (&day, traj) in h.days.range(targets.clone()) {
            let Some(k) = day.checked_sub(1) else { continue };
            let window = history_window(h, k);
            if !window.any_present() {
                continue;
            }
            let mut sample = Sample::from_window(&mut set.arena, &window, h.user).expect("window has a day");
            sample.target = Some(set.arena.intern(traj));
            set.samples.push(sample);
        }
    }
    set
}

fn expand(chains: &DayChains) -> Vec<usize> {
    chains
        .locations
        .iter()
        .zip(&chains.durations)
        .flat_map(|(&l, &d)| std::iter::repeat_n(l, d))
        .collect()
}

/// Slot-level next-day accuracy of greedy predictions on `set`.
pub fn next_day_accuracy(model: &Mstdp, store: &ParameterStore, set: &SampleSet, limit: Option<usize>) -> Result<f64> {
    let n = limit.map_or(set.len(), |l| l.min(set.len()));
    let samples = &set.samples[..n];
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(256) {
        let preds = model.predict_samples(store, &set.arena, chunk)?;
        for (p, s) in preds.iter().zip(chunk) {
            let actual = expand(set.arena.get(s.target.expect("evaluation samples carry targets")));
            hits += p.slots.iter().zip(&actual).filter(|(a, b)| a.index() == **b).count();
            total += actual.len();
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Teacher-forced mean absolute error of raw duration estimates.
pub fn duration_mae(model: &Mstdp, store: &ParameterStore, set: &SampleSet) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in set.samples.chunks(64) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, &set.arena, chunk);
        for (p, t) in tape.value(fwd.durations).data().iter().zip(&fwd.dur_targets) {
            sum += (p - t.expect("duration target")).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_huber: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<EpochLog>,
}

/// Runs one optimisation step on `batch`; returns (total, ce, huber).
pub fn train_step(
    model: &Mstdp,
    store: &mut ParameterStore,
    adam: &mut Adam,
    set: &SampleSet,
    batch: &[Sample],
    clip_norm: Option<f64>,
) -> (f64, f64, f64) {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, store, &set.arena, batch);
    let values = (
        tape.value(loss.total).item(),
        tape.value(loss.ce).item(),
        tape.value(loss.huber).item(),
    );
    if !values.0.is_finite() {
        return values;
    }
    tape.backward(loss.total, store);
    if let Some(c) = clip_norm {
        store.clip_grad_norm(c);
    }
    adam.step(store);
    values
}

/// Trains `store` in place and leaves it holding the parameters of the
/// epoch with the best validation accuracy. With an empty validation set
/// the last epoch is kept.
pub fn train(
    model: &Mstdp,
    store: &mut ParameterStore,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        adam.lr = epoch_lr(cfg, epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut sum_ce, mut sum_h, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| train_set.samples[i].clone()).collect();
            let (l, ce, h) = train_step(model, store, &mut adam, train_set, &batch, cfg.clip_norm);
            step += 1;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: l });
            }
            sum += l;
            sum_ce += ce;
            sum_h += h;
            batches += 1;
        }
        let val_acc = if val_set.is_empty() {
            0.0
        } else {
            next_day_accuracy(model, store, val_set, cfg.val_limit)?
        };
        let entry = EpochLog {
            epoch,
            train_loss: sum / batches as f64,
            train_ce: sum_ce / batches as f64,
            train_huber: sum_h / batches as f64,
            val_acc,
        };
        on_epoch(&entry);
        log.push(entry);
        let improved = best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) || val_set.is_empty();
        if improved {
            best = Some((epoch, val_acc, store.clone()));
        } else if let (Some(p), Some((be, _, _))) = (cfg.patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }
    let (best_epoch, best_val_acc, best_store) = best.expect("at least one epoch ran");
    *store = best_store;
    Ok(TrainOutcome {
        best_epoch,
        best_val_acc,
        log,
    })
}

/// Learning rate used during `epoch` (1-based).
pub fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_min {
        Some(min) if cfg.epochs > 1 => {
            let frac = (epoch - 1) as f64 / (cfg.epochs - 1) as f64;
            min + 0.5 * (cfg.lr - min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        _ => cfg.lr,
    }
}

/// Training log as CSV.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,train_ce,train_huber,val_acc\n");
    for e in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.train_ce, e.train_huber, e.val_acc
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    n_cells: usize,
    n_nodes: usize,
}

/// Writes parameters, the model configuration and free-form metadata.
pub fn save_checkpoint(path: &Path, model: &Mstdp, store: &ParameterStore, metadata: serde_json::Value) -> Result<()> {
    let echo = ConfigEcho {
        model: model.config.clone(),
        n_cells: model.inputs.n_cells,
        n_nodes: model.inputs.n_nodes,
    };
    Checkpoint {
        config: serde_json::to_value(echo).expect("config serialises"),
        metadata,
        store: store.clone(),
    }
    .save(path)
}

/// Rebuilds the model for `bundle` and loads checkpointed parameters.
pub fn load_checkpoint(path: &Path, bundle: &GraphBundle) -> Result<(Mstdp, ParameterStore, serde_json::Value)> {
    let ckpt = Checkpoint::load(path)?;
    let echo: ConfigEcho = serde_json::from_value(ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
    if echo.model.slots_per_day != bundle.slots_per_day {
        return Err(Error::SlotMismatch {
            context: format!("checkpoint {}", path.display()),
            expected: bundle.slots_per_day,
            found: echo.model.slots_per_day,
        });
    }
    if echo.n_nodes != bundle.graph.n_nodes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on {} graph nodes, graph has {}",
            echo.n_nodes,
            bundle.graph.n_nodes()
        )));
    }
    let (model, mut store) = Mstdp::new(echo.model, bundle, 0)?;
    store.load_values(&ckpt.store)?;
    Ok((model, store, ckpt.metadata))
}

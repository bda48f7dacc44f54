//! File-based pipeline stages behind the command-line front end.
//!
//! Dataset directory layout: `header.json`, `city.json`, `split.json`,
//! `trajectories.jsonl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epi::{build_transition_matrices, census, ensemble_mae, EnsembleMae, SeirParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report, MetricReport};
use crate::graph::{build_graph, GraphBundle};
use crate::model::{ModelConfig, Mstdp};
use crate::synth::io::{read_days, read_json, write_atomic, write_days, write_json};
use crate::synth::{read_trajectories, synthesize, write_trajectories, CityGrid, DatasetHeader, DatasetSplit, SynthConfig};
use crate::train::{load_checkpoint, log_csv, make_samples, save_checkpoint, train, TrainConfig, TrainOutcome};
use crate::traj::{history_window, DailyTrajectory, UserHistory, WINDOW_DAYS};

pub const HEADER_FILE: &str = "header.json";
pub const CITY_FILE: &str = "city.json";
pub const SPLIT_FILE: &str = "split.json";
pub const TRAJ_FILE: &str = "trajectories.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub graph: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub predictions: PathBuf,
    pub eval_dir: PathBuf,
    pub epi_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            graph: "data/graph.json".into(),
            checkpoint: "runs/model.ckpt".into(),
            train_log: "runs/train_log.csv".into(),
            predictions: "runs/predictions.jsonl".into(),
            eval_dir: "runs/eval".into(),
            epi_dir: "runs/epi".into(),
            report_dir: "report".into(),
        }
    }
}

impl Paths {
    /// Every path re-rooted under `dir`.
    pub fn under(dir: &Path) -> Self {
        let d = Self::default();
        Self {
            data_dir: dir.join(d.data_dir),
            graph: dir.join(d.graph),
            checkpoint: dir.join(d.checkpoint),
            train_log: dir.join(d.train_log),
            predictions: dir.join(d.predictions),
            eval_dir: dir.join(d.eval_dir),
            epi_dir: dir.join(d.epi_dir),
            report_dir: dir.join(d.report_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpiConfig {
    pub runs: usize,
    pub seed_infected: u64,
    /// People represented by each observed user in the census.
    pub population_multiplier: u64,
    /// Simulated days.
    pub days: usize,
    pub params: SeirParams,
}

impl Default for EpiConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            seed_infected: 1000,
            population_multiplier: 100,
            days: 7,
            params: SeirParams::default(),
        }
    }
}

/// Everything the pipeline reads from a config file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; overrides the per-stage seeds when given on the
    /// command line.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epi: EpiConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::desk(24),
            train: TrainConfig::default(),
            epi: EpiConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Applies one seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// A dataset directory read back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub grid: CityGrid,
    pub split: DatasetSplit,
    pub histories: Vec<UserHistory>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let header: DatasetHeader = read_json(&dir.join(HEADER_FILE))?;
        header.validate()?;
        let grid: CityGrid = read_json(&dir.join(CITY_FILE))?;
        if grid.width != header.grid_width || grid.height != header.grid_height {
            return Err(Error::Config(format!(
                "city is {}x{} but the header declares {}x{}",
                grid.width, grid.height, header.grid_width, header.grid_height
            )));
        }
        let split: DatasetSplit = read_json(&dir.join(SPLIT_FILE))?;
        let histories = read_trajectories(&dir.join(TRAJ_FILE), &header)?;
        Ok(Self {
            header,
            grid,
            split,
            histories,
        })
    }

    pub fn days(&self) -> Vec<DailyTrajectory> {
        self.histories.iter().flat_map(|h| h.days.values().cloned()).collect()
    }
}

fn check_slots(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::SlotMismatch {
            context: context.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Generates a corpus and writes the dataset directory.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    let c = synthesize(cfg)?;
    write_json(&c.header, &out_dir.join(HEADER_FILE))?;
    write_json(&c.grid, &out_dir.join(CITY_FILE))?;
    write_json(&c.split, &out_dir.join(SPLIT_FILE))?;
    write_trajectories(&c.histories, &out_dir.join(TRAJ_FILE))?;
    Ok(Dataset {
        header: c.header,
        grid: c.grid,
        split: c.split,
        histories: c.histories,
    })
}

/// Builds the graph from one split's days. Only `train` is accepted: the
/// graph must never see validation or test days.
pub fn cmd_build_graph(data_dir: &Path, split: &str, out: &Path) -> Result<GraphBundle> {
    if split != "train" {
        return Err(Error::Config(format!(
            "graphs are built from the train split only, got {split:?}"
        )));
    }
    let ds = Dataset::load(data_dir)?;
    let bundle = build_graph(&ds.histories, &ds.grid, ds.split.train.clone());
    bundle.save(out)?;
    Ok(bundle)
}

fn load_graph(path: &Path, header: &DatasetHeader) -> Result<GraphBundle> {
    let bundle = GraphBundle::load(path)?;
    check_slots(&format!("graph {}", path.display()), header.slots_per_day, bundle.slots_per_day)?;
    if bundle.graph.n_cells != header.n_cells() {
        return Err(Error::Config(format!(
            "graph has {} cells, dataset grid has {}",
            bundle.graph.n_cells,
            header.n_cells()
        )));
    }
    Ok(bundle)
}

/// Trains on the train split, selects on validation, writes the checkpoint
/// and the CSV training log.
pub fn cmd_train(
    data_dir: &Path,
    graph: &Path,
    model: &ModelConfig,
    cfg: &TrainConfig,
    checkpoint: &Path,
    log_path: &Path,
    mut on_epoch: impl FnMut(&crate::train::EpochLog),
) -> Result<TrainOutcome> {
    let ds = Dataset::load(data_dir)?;
    let bundle = load_graph(graph, &ds.header)?;
    check_slots("model config", ds.header.slots_per_day, model.slots_per_day)?;
    let (net, mut store) = Mstdp::new(model.clone(), &bundle, cfg.seed)?;
    let train_set = make_samples(&ds.histories, ds.split.train.clone());
    let val_set = make_samples(&ds.histories, ds.split.validation.clone());
    let outcome = train(&net, &mut store, &train_set, &val_set, cfg, |e| on_epoch(e))?;
    save_checkpoint(
        checkpoint,
        &net,
        &store,
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_val_acc": outcome.best_val_acc,
            "train": cfg,
        }),
    )?;
    write_atomic(log_path, log_csv(&outcome.log).as_bytes())?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Day,
    Week,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Task::Day),
            "week" => Ok(Task::Week),
            other => Err(Error::Config(format!("unknown task {other:?}, expected day or week"))),
        }
    }
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Day => "day",
            Task::Week => "week",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Restrict to these user ids.
    pub users: Option<Vec<u32>>,
    /// First day to predict; defaults to the first test day.
    pub day: Option<u32>,
}

/// Predicts the next day or the next seven days for every selected user
/// whose seven-day history window holds at least one day. Returns the
/// predictions and the number of users skipped for lack of history.
pub fn cmd_predict(
    data_dir: &Path,
    graph: &Path,
    checkpoint: &Path,
    task: Task,
    opts: &PredictOptions,
    out: &Path,
) -> Result<(Vec<DailyTrajectory>, usize)> {
    let ds = Dataset::load(data_dir)?;
    let bundle = load_graph(graph, &ds.header)?;
    let (net, store, _) = load_checkpoint(checkpoint, &bundle)?;
    let target = opts.day.unwrap_or(ds.split.test.start);
    let Some(k) = target.checked_sub(1) else {
        return Err(Error::Config("cannot predict day 0: it has no history".into()));
    };
    let selected: Vec<&UserHistory> = ds
        .histories
        .iter()
        .filter(|h| opts.users.as_ref().is_none_or(|u| u.contains(&h.user.0)))
        .collect();
    if let Some(users) = &opts.users {
        for u in users {
            if !selected.iter().any(|h| h.user.0 == *u) {
                return Err(Error::Config(format!("user {u} not in dataset")));
            }
        }
    }
    let (ready, skipped): (Vec<&UserHistory>, Vec<&UserHistory>) =
        selected.into_iter().partition(|h| history_window(h, k).any_present());
    let preds: Vec<DailyTrajectory> = match task {
        Task::Day => {
            let windows: Vec<_> = ready.iter().map(|h| (h.user, history_window(h, k))).collect();
            let mut out = Vec::with_capacity(windows.len());
            for chunk in windows.chunks(256) {
                out.extend(net.predict_days(&store, chunk)?);
            }
            out
        }
        Task::Week => net.predict_weeks(&store, &ready, k)?.into_iter().flatten().collect(),
    };
    write_days(&preds, true, out)?;
    Ok((preds, skipped.len()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Scores a prediction file against an actual trajectory file. The city
/// and header are read from the actual file's directory. A prediction
/// file holding more than one day for some user is scored as a week task.
pub fn cmd_evaluate(pred: &Path, actual: &Path, report_dir: &Path) -> Result<MetricReport> {
    let header: DatasetHeader = read_json(&sibling(actual, HEADER_FILE))?;
    let grid: CityGrid = read_json(&sibling(actual, CITY_FILE))?;
    let actual_days = read_days(actual, &header)?;
    let pred_days = read_days(pred, &header)?;
    let mut per_user: BTreeMap<u32, usize> = BTreeMap::new();
    for d in &pred_days {
        *per_user.entry(d.user.0).or_default() += 1;
    }
    let task = if per_user.values().any(|&n| n > 1) { Task::Week } else { Task::Day };
    let e = evaluate(&pred_days, &actual_days, &grid, task.as_str())?;
    write_report(report_dir, &e)?;
    Ok(e.report)
}

/// Runs the paired SEIR ensemble on transition matrices from the actual
/// days matching each prediction and from the predictions themselves.
pub fn cmd_episim(actual: &Path, pred: &Path, cfg: &EpiConfig, seed: u64, out_dir: &Path) -> Result<EnsembleMae> {
    let header: DatasetHeader = read_json(&sibling(actual, HEADER_FILE))?;
    let grid: CityGrid = read_json(&sibling(actual, CITY_FILE))?;
    let pred_days = read_days(pred, &header)?;
    let (pred_days, actual_days) = crate::eval::pair_by_day(&pred_days, &read_days(actual, &header)?);
    if pred_days.is_empty() {
        return Err(Error::Config("no prediction matches an actual (user, day)".into()));
    }
    let n = grid.n_admins();
    let m_actual = build_transition_matrices(&actual_days, &grid.admin_of, n)?;
    let m_pred = build_transition_matrices(&pred_days, &grid.admin_of, n)?;
    let population = census(&actual_days, &grid.admin_of, n, cfg.population_multiplier);
    let steps = cfg.days * header.slots_per_day;
    let mae = ensemble_mae(&m_actual, &m_pred, &cfg.params, &population, cfg.seed_infected, steps, cfg.runs, seed)?;

    let mut csv = String::from("t,mae_i,mae_cum\n");
    for t in 0..=steps {
        let _ = writeln!(csv, "{t},{},{}", mae.mae_infectious[t], mae.mae_cumulative[t]);
    }
    write_atomic(&out_dir.join("epi_mae.csv"), csv.as_bytes())?;
    let days: Vec<serde_json::Value> = (1..=cfg.days)
        .map(|d| {
            serde_json::json!({
                "day": d,
                "mae_i": mae.day_mean_infectious(d),
                "mae_cum": mae.day_mean_cumulative(d),
            })
        })
        .collect();
    write_json(
        &serde_json::json!({
            "runs": cfg.runs,
            "seed_infected": cfg.seed_infected,
            "population": population.iter().sum::<u64>(),
            "r0": cfg.params.r0(),
            "daily_mean": days,
        }),
        &out_dir.join("epi_summary.json"),
    )?;
    Ok(mae)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Copies every CSV and JSON file from `inputs` (files or directories,
/// non-recursive) into `report_dir` and writes `manifest.json`. Name
/// clashes are an error.
pub fn cmd_report(inputs: &[PathBuf], report_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for input in inputs {
        if !input.exists() {
            return Err(Error::MissingInput(input.clone()));
        }
        let candidates: Vec<PathBuf> = if input.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            v.sort();
            v
        } else {
            vec![input.clone()]
        };
        for p in candidates {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext != "csv" && ext != "json" {
                continue;
            }
            let name = p.file_name().expect("file has a name").to_string_lossy().into_owned();
            if name == "manifest.json" {
                continue;
            }
            if let Some(prev) = files.insert(name.clone(), p.clone()) {
                return Err(Error::Config(format!(
                    "report inputs {} and {} share the name {name}",
                    prev.display(),
                    p.display()
                )));
            }
        }
    }
    let mut manifest = Vec::with_capacity(files.len());
    for (name, src) in files {
        let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
        write_atomic(&report_dir.join(&name), &bytes)?;
        let digest = Sha256::digest(&bytes);
        manifest.push(ManifestEntry {
            name,
            bytes: bytes.len() as u64,
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
    }
    write_json(&manifest, &report_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Runs every stage in order with the paths and settings of `cfg`:
/// synth, build-graph, train, predict (week), evaluate, epi-sim, report.
pub fn run_all(cfg: &PipelineConfig, mut on_epoch: impl FnMut(&crate::train::EpochLog)) -> Result<Vec<ManifestEntry>> {
    let p = &cfg.paths;
    cmd_synth(&cfg.synth, &p.data_dir)?;
    cmd_build_graph(&p.data_dir, "train", &p.graph)?;
    cmd_train(&p.data_dir, &p.graph, &cfg.model, &cfg.train, &p.checkpoint, &p.train_log, |e| on_epoch(e))?;
    cmd_predict(&p.data_dir, &p.graph, &p.checkpoint, Task::Week, &PredictOptions::default(), &p.predictions)?;
    let actual = p.data_dir.join(TRAJ_FILE);
    cmd_evaluate(&p.predictions, &actual, &p.eval_dir)?;
    cmd_episim(&actual, &p.predictions, &cfg.epi, cfg.seed, &p.epi_dir)?;
    // paths are left out so reports from different work directories compare equal
    let mut settings = serde_json::to_value(cfg).expect("config serialises");
    settings.as_object_mut().expect("config is a table").remove("paths");
    write_json(&settings, &p.eval_dir.join("config.json"))?;
    cmd_report(&[p.eval_dir.clone(), p.epi_dir.clone(), p.train_log.clone()], &p.report_dir)
}

/// Number of days the week task predicts.
pub const WEEK_DAYS: usize = WINDOW_DAYS;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            paths: Paths::under(dir),
            model: ModelConfig::micro(24),
            ..PipelineConfig::default()
        };
        cfg.synth.agents = 6;
        cfg.synth.grid_width = 6;
        cfg.synth.grid_height = 6;
        cfg.synth.admins = 4;
        cfg.train.epochs = 1;
        cfg.train.lr = 1e-3;
        cfg.epi.runs = 3;
        cfg.epi.population_multiplier = 200;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default().with_seed(9);
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.synth.seed, 9);
        let partial = PipelineConfig::from_toml("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.batch_size, 32);
        assert!(PipelineConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn graph_only_from_train_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_synth(&cfg.synth, &cfg.paths.data_dir).unwrap();
        assert!(cmd_build_graph(&cfg.paths.data_dir, "test", &cfg.paths.graph).is_err());
        let b = cmd_build_graph(&cfg.paths.data_dir, "train", &cfg.paths.graph).unwrap();
        assert_eq!(b.source_days, 0..cfg.synth.days as u32 * 17 / 28);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_build_graph(&dir.path().join("nope"), "train", &dir.path().join("g.json")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn mismatched_slot_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_synth(&cfg.synth, &cfg.paths.data_dir).unwrap();
        cmd_build_graph(&cfg.paths.data_dir, "train", &cfg.paths.graph).unwrap();
        let err = cmd_train(
            &cfg.paths.data_dir,
            &cfg.paths.graph,
            &ModelConfig::micro(48),
            &cfg.train,
            &cfg.paths.checkpoint,
            &cfg.paths.train_log,
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::SlotMismatch { .. }));
    }

    #[test]
    fn full_pipeline_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run_all(&tiny_config(a.path()), |_| {}).unwrap();
        let mb = run_all(&tiny_config(b.path()), |_| {}).unwrap();
        assert_eq!(ma, mb);
        let names: Vec<&str> = ma.iter().map(|m| m.name.as_str()).collect();
        for f in ["metrics.json", "curves.csv", "epi_mae.csv", "train_log.csv", "motifs.csv"] {
            assert!(names.contains(&f), "{f} missing from {names:?}");
        }
        for m in &ma {
            let x = fs::read(a.path().join("report").join(&m.name)).unwrap();
            let y = fs::read(b.path().join("report").join(&m.name)).unwrap();
            assert_eq!(x, y, "{}", m.name);
        }
        // the week predictions cover seven days per user
        let header: DatasetHeader = read_json(&a.path().join("data").join(HEADER_FILE)).unwrap();
        let preds = read_days(&a.path().join("runs/predictions.jsonl"), &header).unwrap();
        assert_eq!(preds.len() % WEEK_DAYS, 0);
        assert!(!preds.is_empty());
    }

    #[test]
    fn report_rejects_name_clashes() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = (dir.path().join("x"), dir.path().join("y"));
        fs::create_dir_all(&x).unwrap();
        fs::create_dir_all(&y).unwrap();
        fs::write(x.join("a.csv"), "1").unwrap();
        fs::write(y.join("a.csv"), "2").unwrap();
        fs::write(y.join("notes.txt"), "skip").unwrap();
        assert!(cmd_report(&[x.clone(), y.clone()], &dir.path().join("r")).is_err());
        let m = cmd_report(&[y], &dir.path().join("r")).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].sha256, "d4735e3a265e16eee03f59718b9b5d03019c07d8b6c51f90da3a666eec13ab35");
    }
}

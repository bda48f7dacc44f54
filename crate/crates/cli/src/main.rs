use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mstdp::pipeline::{self, PipelineConfig, PredictOptions, Task};
use mstdp::Result;

/// Mid-term mobility prediction pipeline: synth, build-graph, train,
/// predict, evaluate, epi-sim, report.
#[derive(Debug, Parser)]
#[command(name = "mstdp", version)]
struct Cli {
    /// Seed applied to every stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config file (TOML); see `mstdp init-config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic city and trajectory corpus.
    Synth(SynthArgs),
    /// Build the heterogeneous graph from the training split.
    BuildGraph {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus CSV log.
    Train(TrainArgs),
    /// Predict the next day or week for each user.
    Predict(PredictArgs),
    /// Score predictions against actual trajectories.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        actual: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare SEIR epidemics driven by actual and predicted mobility.
    EpiSim {
        #[arg(long)]
        actual: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed_infected: Option<u64>,
        #[arg(long)]
        population_multiplier: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect CSV/JSON outputs into one directory with a manifest.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Files or directories to collect.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run every stage under one work directory.
    Run {
        #[arg(long, default_value = ".")]
        work_dir: PathBuf,
    },
    /// Print the default config file.
    InitConfig,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Grid size as WIDTHxHEIGHT.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    admins: Option<usize>,
    /// Time slots per day (24 or 48).
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long, default_value = "day")]
    task: Task,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated user ids (default: all).
    #[arg(long, value_delimiter = ',')]
    users: Option<Vec<u32>>,
    /// First day to predict (default: first test day).
    #[arg(long)]
    day: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || mstdp::Error::Config(format!("--grid expects WIDTHxHEIGHT, got {s:?}"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let p = cfg.paths.clone();
    match cli.command {
        Command::Synth(a) => {
            let mut s = cfg.synth.clone();
            if let Some(v) = a.agents {
                s.agents = v;
            }
            if let Some(v) = a.days {
                s.days = v;
            }
            if let Some(g) = a.grid {
                (s.grid_width, s.grid_height) = parse_grid(&g)?;
            }
            if let Some(v) = a.admins {
                s.admins = v;
            }
            if let Some(v) = a.slots {
                s.slots_per_day = v;
            }
            let out = a.out_dir.unwrap_or(p.data_dir);
            let ds = pipeline::cmd_synth(&s, &out)?;
            println!(
                "wrote {} users x {} days (T={}) to {}",
                ds.histories.len(),
                ds.header.n_days,
                ds.header.slots_per_day,
                out.display()
            );
        }
        Command::BuildGraph { data, split, out } => {
            let out = out.unwrap_or(p.graph);
            let b = pipeline::cmd_build_graph(&data.unwrap_or(p.data_dir), &split, &out)?;
            println!(
                "graph: {} cells, {} admins, {} cell flows -> {}",
                b.graph.n_cells,
                b.graph.n_admins,
                b.graph.cell_flow.len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let mut t = cfg.train.clone();
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.lr {
                t.lr = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            let ckpt = a.checkpoint.unwrap_or(p.checkpoint);
            let outcome = pipeline::cmd_train(
                &a.data.unwrap_or(p.data_dir),
                &a.graph.unwrap_or(p.graph),
                &cfg.model,
                &t,
                &ckpt,
                &a.log.unwrap_or(p.train_log),
                |e| {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  ce {:.4}  huber {:.4}  val acc {:.4}",
                        e.epoch, e.train_loss, e.train_ce, e.train_huber, e.val_acc
                    )
                },
            )?;
            println!(
                "best epoch {} (val acc {:.4}) -> {}",
                outcome.best_epoch,
                outcome.best_val_acc,
                ckpt.display()
            );
        }
        Command::Predict(a) => {
            let out = a.out.unwrap_or(p.predictions);
            let opts = PredictOptions {
                users: a.users,
                day: a.day,
            };
            let (preds, skipped) = pipeline::cmd_predict(
                &a.data.unwrap_or(p.data_dir),
                &a.graph.unwrap_or(p.graph),
                &a.checkpoint.unwrap_or(p.checkpoint),
                a.task,
                &opts,
                &out,
            )?;
            println!("wrote {} predicted days to {}", preds.len(), out.display());
            if skipped > 0 {
                eprintln!("skipped {skipped} users with no history in the preceding week");
            }
        }
        Command::Evaluate { pred, actual, report } => {
            let r = pipeline::cmd_evaluate(&pred, &actual, &report)?;
            println!(
                "{} task, {} days: acc {:.4}  dev {:.3} km  travel jsd {:.4}  depart jsd {:.4}",
                r.task, r.n_days, r.acc, r.dev_dist_km, r.travel_dist_jsd, r.depart_time_jsd
            );
        }
        Command::EpiSim {
            actual,
            pred,
            runs,
            seed_infected,
            population_multiplier,
            out,
        } => {
            let mut e = cfg.epi.clone();
            if let Some(v) = runs {
                e.runs = v;
            }
            if let Some(v) = seed_infected {
                e.seed_infected = v;
            }
            if let Some(v) = population_multiplier {
                e.population_multiplier = v;
            }
            let mae = pipeline::cmd_episim(&actual, &pred, &e, cfg.seed, &out)?;
            println!(
                "day {} mean MAE: I {:.2}  cumulative {:.2}",
                e.days,
                mae.day_mean_infectious(e.days),
                mae.day_mean_cumulative(e.days)
            );
        }
        Command::Report { out, inputs } => {
            let m = pipeline::cmd_report(&inputs, &out)?;
            println!("collected {} files into {}", m.len(), out.display());
        }
        Command::Run { work_dir } => {
            cfg.paths = pipeline::Paths::under(&work_dir);
            let m = pipeline::run_all(&cfg, |e| eprintln!("epoch {:>3}  loss {:.4}  val acc {:.4}", e.epoch, e.train_loss, e.val_acc))?;
            println!("report with {} files in {}", m.len(), cfg.paths.report_dir.display());
        }
        Command::InitConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

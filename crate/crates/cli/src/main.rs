//! `prefrank`: dataset generation, rater and generator training, experiment
//! grids, and the live annotation service.
//!
//! Every experiment writes into its `--out` directory and finishes with a
//! `manifest.json` (resolved config, seed, output digests). Passing that
//! manifest back as `--config` replays the run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print one JSON line on stderr.

mod commands;
mod config;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use prefrank_core::pairs::Strategy;
use prefrank_core::synth::{BudgetCurveConfig, DatasetKind, NoiseCurveConfig, RatingRun, StrategyTableConfig};
use prefrank_core::congen::GanConfig;
use prefrank_service::{ServiceConfig, Session};

use commands::Checked;
use config::{ConfigError, Overrides};
use manifest::{Outputs, Recorder};

#[derive(Parser, Debug)]
#[command(name = "prefrank", version, about = "Pairwise-comparison rating experiments")]
struct Cli {
    /// Base seed for every random stream of the run.
    #[arg(long, global = true, env = "PREFRANK_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file, or a manifest from an earlier run to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: prefrank-out/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Trainer {
    /// Target optimizer steps for each rater fit.
    #[arg(long)]
    train_steps: Option<usize>,
    /// Rater learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

impl Trainer {
    fn apply(&self, flags: &mut Overrides, prefix: &'static str) {
        // prefix is "" or a dotted path ending in '.'
        let (steps, lr): (&'static str, &'static str) = match prefix {
            "" => ("train_steps", "encoder.learning_rate"),
            "run." => ("run.train_steps", "run.encoder.learning_rate"),
            "active.run." => ("active.run.train_steps", "active.run.encoder.learning_rate"),
            _ => unreachable!("unknown prefix"),
        };
        flags.set(steps, self.train_steps).set(lr, self.lr);
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, its hidden attribute and simulated comparisons.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        /// Comparisons per item.
        #[arg(long)]
        mult: Option<f64>,
    },
    /// Train a rater on an item table and a comparison log.
    TrainRater {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        comparisons: PathBuf,
        #[command(flatten)]
        trainer: Trainer,
    },
    /// Rate items with a trained model and score against an oracle file.
    EvalRater {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Spearman against random-pair budget, over a grid of dataset sizes.
    PairsCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        dim: Option<usize>,
        /// Dataset sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Budget multipliers of n, comma separated.
        #[arg(long, value_delimiter = ',')]
        mult: Option<Vec<f64>>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        trainer: Trainer,
    },
    /// Rating versus noisy-label correlation across annotation noise margins.
    NoiseCurve {
        #[command(flatten)]
        grid: NoiseArgs,
    },
    /// Rating correlation across tie margins only.
    MarginSweep {
        #[command(flatten)]
        grid: NoiseArgs,
    },
    /// Final correlation of each pair-sampling strategy at a fixed budget.
    StrategyTable {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        /// Oracle queries per strategy [default: 2n].
        #[arg(long)]
        budget: Option<usize>,
        /// Strategies, comma separated.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[command(flatten)]
        trainer: Trainer,
    },
    /// Train the rating-conditioned generator against a frozen rater.
    TrainCgen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        comparisons: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Label noise on the conditioning, in rating-std units.
        #[arg(long)]
        label_noise: Option<f64>,
    },
    /// Attribute, cycle and self-edit errors of a trained generator.
    EvalCgen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Edit items across the rating range and record realized ratings.
    EditSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long = "sweep-items")]
        sweep_items: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train a discriminator on a discrete toy and compare with p/(p+q).
    DoptCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the annotation service.
    Serve {
        /// JSON service config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        round_size: Option<usize>,
        /// Item table CSV (`id,feat_0,...`).
        #[arg(long)]
        dataset: PathBuf,
        /// Session directory for the log, header and snapshots; resumes if present.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kind: Option<DatasetKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Margins as fractions of the attribute range, comma separated.
    #[arg(long, value_delimiter = ',')]
    margins: Option<Vec<f64>>,
    /// Comparisons per item.
    #[arg(long)]
    mult: Option<f64>,
    #[command(flatten)]
    trainer: Trainer,
}

impl NoiseArgs {
    fn overrides(&self) -> Overrides {
        let mut f = Overrides::default();
        f.set("kind", self.kind)
            .set("n", self.n)
            .set("dim", self.dim)
            .set("margins", self.margins.clone())
            .set("budget_multiplier", self.mult);
        self.trainer.apply(&mut f, "run.");
        f
    }
}

enum Failure {
    Config(ConfigError),
    Run(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

/// Resolves the config, runs `body` and always writes the manifest.
fn experiment<T>(
    name: &str,
    common: &Common,
    seed_flag: Option<u64>,
    mut flags: Overrides,
    seed_path: Option<&'static str>,
    body: impl FnOnce(&T, u64, &mut Outputs) -> anyhow::Result<()>,
) -> Result<(), Failure>
where
    T: Default + Serialize + DeserializeOwned + Checked,
{
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("prefrank-out").join(name));
    let layer = match &common.config {
        Some(p) => config::read_file(p, name)?,
        None => Default::default(),
    };
    let seed = seed_flag.or(layer.seed).unwrap_or(0);
    if let Some(p) = seed_path {
        flags.set(p, Some(seed));
    }
    let mut out = Outputs::create(&dir)?;
    let recorder = Recorder::start(name, seed);
    let resolved = config::resolve::<T>(layer.value, flags).and_then(|(cfg, v)| {
        cfg.check()?;
        Ok((cfg, v))
    });
    let (cfg, echoed) = match resolved {
        Ok(r) => r,
        Err(e) => {
            recorder.finish(&out, Value::Null, Some(e.to_string()))?;
            return Err(e.into());
        }
    };
    let result = body(&cfg, seed, &mut out);
    recorder.finish(&out, echoed, result.as_ref().err().map(|e| format!("{e:#}")))?;
    result.map_err(Failure::Run)
}

fn serve(
    seed_flag: Option<u64>,
    config_path: Option<&Path>,
    addr: (String, u16),
    strategy: Option<Strategy>,
    round_size: Option<usize>,
    dataset: &Path,
    dir: Option<PathBuf>,
) -> Result<(), Failure> {
    let file = match config_path {
        Some(p) => config::read_file(p, "serve")?.value,
        None => None,
    };
    let mut flags = Overrides::default();
    flags
        .set("sampler.strategy", strategy)
        .set("round_size", round_size)
        .set("seed", seed_flag);
    let (cfg, _) = config::resolve::<ServiceConfig>(file, flags)?;
    cfg.validate().map_err(|e| match e {
        prefrank_service::ServiceError::Config { field, reason } => ConfigError::new(field, reason),
        other => ConfigError::new("<config>", other),
    })?;
    let name = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let dataset = dataset.to_path_buf();

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((addr.0.as_str(), addr.1)).await?;
        let local = listener.local_addr()?;
        let session = Session::new(cfg, dir).map_err(anyhow::Error::from)?;
        // bind first so clients see 503 rather than a refused connection while loading
        let server = tokio::spawn(prefrank_service::serve(listener, session.clone(), async {
            let _ = tokio::signal::ctrl_c().await;
        }));
        println!("{}", json!({ "listening": local.to_string() }));
        std::io::stdout().flush().ok();
        let loaded = tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
            let items = commands::read_items(&dataset)?;
            session.load(items, &name)?;
            Ok(())
        })
        .await
        .map_err(anyhow::Error::from)?;
        if let Err(e) = loaded {
            server.abort();
            return Err(Failure::Run(e));
        }
        server.await.map_err(anyhow::Error::from)??;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            common,
            kind,
            n,
            dim,
            mult,
        } => {
            let mut f = Overrides::default();
            f.set("kind", kind).set("n", n).set("dim", dim).set("budget_multiplier", mult);
            experiment("gen-data", &common, seed, f, None, commands::gen_data)
        }
        Command::TrainRater {
            common,
            items,
            comparisons,
            trainer,
        } => {
            let mut f = Overrides::default();
            trainer.apply(&mut f, "");
            experiment("train-rater", &common, seed, f, None, |cfg: &RatingRun, s, out| {
                commands::train_rater(cfg, s, &items, &comparisons, out)
            })
        }
        Command::EvalRater {
            common,
            model,
            items,
            oracle,
            passes,
        } => {
            let mut f = Overrides::default();
            f.set("passes", passes);
            experiment("eval-rater", &common, seed, f, None, |cfg, s, out| {
                commands::eval_rater(cfg, s, &model, &items, &oracle, out)
            })
        }
        Command::PairsCurve {
            common,
            kind,
            dim,
            n,
            mult,
            threshold,
            trainer,
        } => {
            let mut f = Overrides::default();
            f.set("kind", kind)
                .set("dim", dim)
                .set("ns", n)
                .set("multipliers", mult)
                .set("threshold", threshold);
            trainer.apply(&mut f, "run.");
            experiment::<BudgetCurveConfig>("pairs-curve", &common, seed, f, None, commands::pairs_curve)
        }
        Command::NoiseCurve { grid } => experiment::<NoiseCurveConfig>(
            "noise-curve",
            &grid.common,
            seed,
            grid.overrides(),
            None,
            commands::noise_curve,
        ),
        Command::MarginSweep { grid } => experiment::<NoiseCurveConfig>(
            "margin-sweep",
            &grid.common,
            seed,
            grid.overrides(),
            None,
            commands::margin_sweep_cmd,
        ),
        Command::StrategyTable {
            common,
            kind,
            n,
            dim,
            budget,
            strategies,
            trainer,
        } => {
            let mut f = Overrides::default();
            f.set("kind", kind)
                .set("n", n)
                .set("dim", dim)
                .set("budget", budget)
                .set("strategies", strategies);
            trainer.apply(&mut f, "active.run.");
            experiment::<StrategyTableConfig>("strategy-table", &common, seed, f, None, commands::strategy_table_cmd)
        }
        Command::TrainCgen {
            common,
            items,
            comparisons,
            model,
            steps,
            label_noise,
        } => {
            let mut f = Overrides::default();
            f.set("steps", steps).set("label_noise", label_noise);
            experiment("train-cgen", &common, seed, f, Some("seed"), |cfg: &GanConfig, s, out| {
                commands::train_cgen(cfg, s, &items, &comparisons, &model, out)
            })
        }
        Command::EvalCgen {
            common,
            gan,
            model,
            items,
            pairs,
        } => {
            let mut f = Overrides::default();
            f.set("pairs", pairs);
            experiment("eval-cgen", &common, seed, f, None, |cfg, s, out| {
                commands::eval_cgen(cfg, s, &gan, &model, &items, out)
            })
        }
        Command::EditSweep {
            common,
            gan,
            model,
            items,
            sweep_items,
            points,
        } => {
            let mut f = Overrides::default();
            f.set("items", sweep_items).set("points", points);
            experiment("edit-sweep", &common, seed, f, None, |cfg, _, out| {
                commands::edit_sweep_cmd(cfg, &gan, &model, &items, out)
            })
        }
        Command::DoptCheck { common, bins, steps } => {
            let mut f = Overrides::default();
            f.set("bins", bins).set("dopt.steps", steps);
            experiment("dopt-check", &common, seed, f, Some("dopt.seed"), commands::dopt_check)
        }
        Command::Serve {
            config,
            host,
            port,
            strategy,
            round_size,
            dataset,
            dir,
        } => serve(seed, config.as_deref(), (host, port), strategy, round_size, &dataset, dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("{}", json!({"error": "config", "path": e.path, "message": e.message}));
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", json!({"error": "runtime", "message": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use cryoflow::sampler::Method;
use cryoflow::train::Arm;
use cryoflow::Stage;
use cryoflow_cli::commands::{self, Sampling};
use cryoflow_cli::Config;

#[derive(Parser)]
#[command(name = "cryoflow", version, about = "Iceball growth prediction by residual flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Overrides the seed of the current stage (dataset, training or sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "flow")]
    model: Arm,
    /// Checkpoint to load instead of the run directory's.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "heun")]
    method: Method,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a flow or diffusion model, resuming from its checkpoint if present.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "flow")]
        model: Arm,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Start from scratch even if a checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Forecast one case at one time offset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: String,
        #[arg(long, allow_hyphen_values = true)]
        delta_t: Option<f32>,
        #[arg(long)]
        source_time: Option<f32>,
        /// Freeze cycle, 1 or 2; defaults to the case's.
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Forecast one case at several time offsets from the same source frame.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        horizons: Option<Vec<f32>>,
        #[arg(long, default_value_t = 0.0)]
        source_time: f32,
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Score models on the test split and write per-case metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model to score; defaults to every arm listed in the config.
        #[arg(long)]
        model: Option<Arm>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "heun")]
        method: Method,
        /// Output CSV; defaults to the run directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aggregate metric CSVs into the summary table.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        csv: Vec<PathBuf>,
    },
}

fn setup(common: &Common) -> Result<Config> {
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(commands::UsageError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Config::load(&common.config)
}

fn stage_arg(s: Option<u8>) -> Result<Option<Stage>> {
    s.map(|v| Stage::try_from(v).map_err(|e| commands::UsageError(e.to_string()).into())).transpose()
}

fn sampling(cfg: &Config, m: &ModelArgs) -> Sampling {
    Sampling {
        method: m.method,
        steps: m.steps.unwrap_or(cfg.eval.steps[0]),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let mut cfg = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.dataset.base_seed = s;
            }
            commands::gen(&cfg, force)?;
        }
        Command::Train {
            common,
            model,
            steps,
            force,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.model.param_seed = s;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            let summary = commands::train_cmd(&cfg, model, force)?;
            println!("trained {model} to step {}", summary.steps);
        }
        Command::Predict {
            common,
            model,
            case,
            delta_t,
            source_time,
            stage,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.sample_seed = s;
            }
            let paths = commands::predict_cmd(
                &cfg,
                model.model,
                model.checkpoint.as_deref(),
                &case,
                source_time.unwrap_or(cfg.eval.source_time),
                delta_t.unwrap_or(cfg.eval.delta_t),
                stage_arg(stage)?,
                sampling(&cfg, &model),
            )?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Rollout {
            common,
            model,
            case,
            horizons,
            source_time,
            stage,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.sample_seed = s;
            }
            let horizons = horizons.unwrap_or_else(|| cfg.eval.rollout_horizons.clone());
            let out = commands::rollout_cmd(
                &cfg,
                model.model,
                model.checkpoint.as_deref(),
                &case,
                source_time,
                &horizons,
                stage_arg(stage)?,
                sampling(&cfg, &model),
            )?;
            for (h, ml, dir) in out {
                println!("{h}\t{ml:.3}\t{}", dir.display());
            }
        }
        Command::Eval {
            common,
            model,
            checkpoint,
            steps,
            method,
            csv,
        } => {
            let mut cfg = setup(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.sample_seed = s;
            }
            let steps = steps.map(|s| vec![s]).unwrap_or_else(|| cfg.eval.steps.clone());
            let (path, table) = commands::eval_cmd(&cfg, model, checkpoint.as_deref(), method, &steps, csv.as_deref())?;
            print!("{table}");
            eprintln!("metrics written to {}", path.display());
        }
        Command::Report { csv } => print!("{}", commands::report_cmd(&csv)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}

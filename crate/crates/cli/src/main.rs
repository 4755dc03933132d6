//! Command-line front end for the gazemoe decoder.
//!
//! Configuration precedence is flags over the config file over built-in
//! defaults. Logging level comes from `GAZEMOE_LOG` (error, info, debug).
//! Exits with 0 on success, 2 on usage or configuration errors, and 1 on
//! runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use gazemoe::train::TrainConfig;
use gazemoe::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gazemoe", version, about = "Mixture-of-Experts gaze decoder")]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Checkpoint to evaluate, infer from, or resume training against.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Output directory; overrides `out_dir` from the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Training seed; overrides the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Evaluation worker threads; overrides the config file.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Training profile; replaces the config file's train section.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log.
    Train,
    /// Evaluate a checkpoint and print a metrics report as JSON.
    Eval,
    /// Run one sample through a checkpoint and write heatmap artifacts.
    Infer {
        /// Feature file for the sample.
        #[arg(long, value_name = "PATH")]
        features: PathBuf,
        /// Head bounding box as "x,y,w,h" in normalized coordinates.
        #[arg(long, value_name = "X,Y,W,H")]
        bbox: String,
    },
    /// Compare model gradients against finite differences.
    Gradcheck,
    /// Print the learnable parameter count.
    Params,
    /// Time expert routing across an (N, K) grid.
    BenchRouting,
}

impl Cli {
    /// Merges defaults, the config file, and flags, in rising precedence.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            let seed = cfg.train.seed;
            cfg.train = match mode {
                Mode::Pretrain => TrainConfig::pretrain(),
                Mode::Finetune => TrainConfig::default(),
            };
            cfg.train.seed = seed;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(workers) = self.workers {
            cfg.metrics.workers = workers;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The checkpoint flag, required by commands that read a model.
    fn need_checkpoint(&self) -> Result<&PathBuf> {
        match &self.checkpoint {
            Some(path) if path.exists() => Ok(path),
            Some(path) => Err(Error::config(format!(
                "checkpoint {} does not exist",
                path.display()
            ))),
            None => Err(Error::config(usage_hint("--checkpoint <PATH>"))),
        }
    }
}

/// A missing-argument message in the shape clap uses for its own.
fn usage_hint(missing: &str) -> String {
    let usage = Cli::command().render_usage();
    format!("the following required arguments were not provided: {missing}\n\n{usage}")
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            if cli.config.is_none() {
                return Err(Error::config(usage_hint("--config <PATH>")));
            }
            let cfg = cli.run_config()?;
            commands::cmd_train(&cfg, cli.checkpoint.as_deref())
        }
        Command::Eval => {
            let cfg = cli.run_config()?;
            commands::cmd_eval(&cfg, cli.need_checkpoint()?)
        }
        Command::Infer { features, bbox } => {
            let cfg = cli.run_config()?;
            if !features.exists() {
                return Err(Error::config(format!(
                    "feature file {} does not exist",
                    features.display()
                )));
            }
            commands::cmd_infer(&cfg, cli.need_checkpoint()?, features, bbox)
        }
        Command::Gradcheck => {
            let cfg = match &cli.config {
                Some(_) => Some(cli.run_config()?),
                None => None,
            };
            commands::cmd_gradcheck(cfg.as_ref(), 1e-4)
        }
        Command::Params => {
            let cfg = cli.run_config()?;
            commands::cmd_params(&cfg)
        }
        Command::BenchRouting => {
            let cfg = cli.run_config()?;
            commands::cmd_bench_routing(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GAZEMOE_LOG", "error"))
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

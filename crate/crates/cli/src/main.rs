use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbdm_cli::config::{ExperimentConfig, SEED_ENV};
use cbdm_cli::pipeline::{self, SweepAxis};
use cbdm_cli::report::emit_report;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "cbdm", version, about = "Class-balancing diffusion experiments on synthetic long-tailed data")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<run_id>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces every seed except the dataset seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model and write its checkpoint and log.
    Train,
    /// Sample every class from the run's checkpoint.
    Sample,
    /// Score the run's samples.
    Eval,
    /// Train, sample and evaluate.
    Run,
    /// One sub-run per grid value along an axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Check the prior-adjustment identity and bound on Gaussian cases.
    Oracle,
    /// Per-class tables and plots for a run or sweep directory.
    Report {
        /// Run directory to subtract per class.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut config = ExperimentConfig::load(path)?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| anyhow::anyhow!("{SEED_ENV}={v} is not an unsigned integer"))?),
        Err(_) => None,
    };
    if let Some(seed) = cli.seed_override.or(env_seed) {
        config.override_seed(seed);
    }
    Ok(config)
}

fn run(cli: &Cli, config: &ExperimentConfig) -> anyhow::Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| pipeline::default_out(config));
    match &cli.verb {
        Verb::Train => pipeline::with_manifest(config, &out, "train", || pipeline::train_stage(config, &out).map(|_| ())),
        Verb::Sample => pipeline::with_manifest(config, &out, "sample", || pipeline::sample_stage(config, &out).map(|_| ())),
        Verb::Eval => pipeline::with_manifest(config, &out, "eval", || pipeline::eval_stage(config, &out).map(|_| ())),
        Verb::Run => pipeline::run_experiment(config, &out).map(|_| ()),
        Verb::Sweep { axis } => pipeline::run_sweep(config, &out, *axis).map(|_| ()),
        Verb::Oracle => pipeline::run_oracle(config, &out).map(|_| ()),
        Verb::Report { .. } => unreachable!("handled without a config"),
    }?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Verb::Report { baseline } = &cli.verb {
        let Some(dir) = cli.out.as_ref() else {
            eprintln!("error: report needs --out <run or sweep dir>");
            return ExitCode::from(EXIT_CONFIG);
        };
        return match emit_report(dir, baseline.as_deref()) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        };
    }
    let config = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

//! `dmm`: train, sample, evaluate, verify and oracle runs from a TOML manifest.

use clap::{Args, Parser, Subcommand};
use dmm_core::experiment::{self, ExperimentConfig, CHECKPOINT_FILE};
use dmm_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dmm", version, about = "Denoising Markov models: training, sampling and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run manifest (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; relative paths go under $DMM_OUTPUT_ROOT when set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network; writes checkpoint.json, metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Skip the post-training evaluation.
        #[arg(long)]
        no_eval: bool,
    },
    /// Draw samples from a checkpoint into samples.csv.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Observed values (whitespace or comma separated) for conditional tasks.
        #[arg(long)]
        observation: Option<PathBuf>,
    },
    /// Evaluate a checkpoint into summary.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the structural verification suite into report.json.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Write task reference values into oracle.json.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit status for a failed check suite.
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let path = common.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: Option<&ExperimentConfig>, common: &Common, fallback: &str) -> PathBuf {
    experiment::resolve_output_dir(cfg, common.out.as_deref(), fallback)
}

fn task_name(cfg: &ExperimentConfig) -> &'static str {
    cfg.task.section()
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { common, no_eval } => {
            let cfg = load(&common)?;
            let dir = out_dir(Some(&cfg), &common, task_name(&cfg));
            let out = experiment::train(&cfg, &dir, !no_eval)?;
            println!("trained {} iterations; final loss {}", cfg.optim.iterations, out.final_loss);
            if let Some(s) = out.summary {
                println!("{}", serde_json::to_string_pretty(&s)?);
            }
            println!("artifacts in {}", dir.display());
            Ok(true)
        }
        Command::Sample { common, checkpoint, observation } => {
            let cfg = load(&common)?;
            let dir = out_dir(Some(&cfg), &common, task_name(&cfg));
            let ckpt = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            let t = experiment::sample(&cfg, &ckpt, observation.as_deref(), &dir)?;
            println!("wrote {} samples to {}", t.rows.len(), dir.join(experiment::SAMPLES_FILE).display());
            Ok(true)
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let dir = out_dir(Some(&cfg), &common, task_name(&cfg));
            let ckpt = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            let s = experiment::evaluate(&cfg, &ckpt, &dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(true)
        }
        Command::Verify { common } => {
            let cfg = common.config.as_ref().map(|_| load(&common)).transpose()?;
            let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let dir = out_dir(cfg.as_ref(), &common, "verify");
            let reports = experiment::verify(seed, &dir)?;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<24} metric {:.3e} tolerance {:.3e}", r.check, r.metric, r.tolerance);
            }
            println!("report in {}", dir.join(experiment::REPORT_FILE).display());
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::Oracle { common } => {
            let cfg = load(&common)?;
            let dir = out_dir(Some(&cfg), &common, task_name(&cfg));
            experiment::oracle(&cfg, &dir)?;
            println!("oracle values in {}", dir.join(experiment::ORACLE_FILE).display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

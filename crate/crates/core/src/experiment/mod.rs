//! Run manifests, the training loop and artifact files.
//!
//! A run directory holds `config.toml` (the resolved manifest),
//! `metrics.csv` (deterministic given config and seed), `timing.csv` (wall
//! clock, kept apart so metrics files compare bitwise), `checkpoint.json`,
//! `summary.json`, `samples.csv`, `oracle.json` and `report.json`.

pub mod config;
pub mod tasks;

pub use config::{ExperimentConfig, Space, TaskKind};
pub use tasks::{build_task, gandk_features, quantile_sorted, so3_mixture_means, SampleTable, Task};

use crate::nn::checkpoint::write_atomic;
use crate::nn::{cosine_lr, AdamState, Arch, Checkpoint, ScoreNet};
use crate::verify::{default_suite, reports_to_json, CheckReport};
use crate::{Error, Result, RngStream};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DMM_OUTPUT_ROOT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const ORACLE_FILE: &str = "oracle.json";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

// RNG stream ids within a run.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_SAMPLE: u64 = 4;

/// Output directory: `cli_out`, else the config's `output_dir`, else
/// `runs/<task>`; relative paths are taken under `$DMM_OUTPUT_ROOT` if set.
pub fn resolve_output_dir(cfg: Option<&ExperimentConfig>, cli_out: Option<&Path>, fallback: &str) -> PathBuf {
    let dir = cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs").join(fallback));
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

/// Network shape for the configured task.
pub fn task_arch(cfg: &ExperimentConfig) -> Arch {
    match cfg.task {
        TaskKind::Bimodal => cfg.arch(1, 1, None),
        TaskKind::Gandk => cfg.arch(4, 4, Some(cfg.gandk_config().n_summary + 2)),
        TaskKind::Inpainting => {
            let s = cfg.inpainting_config().states;
            cfg.arch(2 * s, 2 * s, Some(2 * s))
        }
        TaskKind::So3Mixture => cfg.arch(9, 3, None),
        TaskKind::DirichletMixture => {
            let n = cfg.dirichlet_mixture_config().theta.len();
            cfg.arch(2 * n, n, None)
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    /// Mean training loss over the last metrics window.
    pub final_loss: f64,
    pub final_validation_loss: f64,
    pub summary: Option<serde_json::Value>,
}

struct MetricsWriter {
    metrics: std::fs::File,
    timing: std::fs::File,
    start: Instant,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<Self> {
        let mut metrics = std::fs::File::create(dir.join(METRICS_FILE))?;
        writeln!(metrics, "iteration,loss,val_loss,lr")?;
        let mut timing = std::fs::File::create(dir.join(TIMING_FILE))?;
        writeln!(timing, "iteration,wall_seconds")?;
        Ok(Self { metrics, timing, start: Instant::now() })
    }

    fn row(&mut self, it: u64, loss: Option<f64>, val: f64, lr: f64) -> Result<()> {
        let l = loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.metrics, "{it},{l},{val},{lr}")?;
        self.metrics.flush()?;
        writeln!(self.timing, "{it},{:.3}", self.start.elapsed().as_secs_f64())?;
        self.timing.flush()?;
        Ok(())
    }
}

fn checkpoint_meta(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(json!({"task": cfg.task, "space": cfg.space, "config": cfg.to_toml()?}))
}

/// Train with the configured optimizer, writing metrics and checkpoints to
/// `dir`; with `evaluate`, also run the task evaluation into `summary.json`.
pub fn train(cfg: &ExperimentConfig, dir: &Path, evaluate: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let task = build_task(cfg)?;
    let mut net = ScoreNet::init(task_arch(cfg), &mut RngStream::new(cfg.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(&net.arch().param_shapes(), cfg.optim.lr);
    let mut rng = RngStream::new(cfg.seed, STREAM_TRAIN);
    let meta = checkpoint_meta(cfg)?;
    let o = &cfg.optim;
    let mut writer = MetricsWriter::create(dir)?;
    let mut val = task.validation_loss(&net)?;
    writer.row(0, None, val, o.lr)?;
    Checkpoint::capture(&net, &adam, rng.state(), 0, meta.clone()).save_atomic(&dir.join(CHECKPOINT_FILE))?;

    let (mut window, mut count) = (0.0, 0u64);
    let mut last = f64::NAN;
    for it in 1..=o.iterations {
        let lr = if o.cosine { cosine_lr(o.lr, it - 1, o.iterations) } else { o.lr };
        adam.learning_rate = lr;
        let (loss, grads) = task.loss_gradient(&net, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteStep { step: it as usize, what: "training loss".into() });
        }
        adam.step(net.params_mut(), &grads)?;
        window += loss;
        count += 1;
        if it % o.metrics_every == 0 || it == o.iterations {
            last = window / count as f64;
            val = task.validation_loss(&net)?;
            writer.row(it, Some(last), val, lr)?;
            window = 0.0;
            count = 0;
        }
        if it % o.checkpoint_every == 0 || it == o.iterations {
            Checkpoint::capture(&net, &adam, rng.state(), it, meta.clone()).save_atomic(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    let summary = if evaluate {
        let s = task.evaluate(&net, &mut RngStream::new(cfg.seed, STREAM_EVAL))?;
        write_atomic(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&s)?.as_bytes())?;
        Some(s)
    } else {
        None
    };
    Ok(TrainOutcome { net, final_loss: last, final_validation_loss: val, summary })
}

fn load_net(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ScoreNet> {
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let net = Checkpoint::load(checkpoint)?.net()?;
    if *net.arch() != task_arch(cfg) {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured network",
            checkpoint.display()
        )));
    }
    Ok(net)
}

/// Parse an observation file: numbers separated by whitespace or commas.
pub fn read_observation(path: &Path) -> Result<Vec<f64>> {
    let src =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    src.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, s)| {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Config(format!("{}: value {} is not a finite number: {s:?}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Draw samples from a trained checkpoint into `dir/samples.csv`. Nothing is
/// written unless sampling succeeds.
pub fn sample(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    observation: Option<&Path>,
    dir: &Path,
) -> Result<SampleTable> {
    cfg.validate()?;
    let net = load_net(cfg, checkpoint)?;
    let obs = observation.map(read_observation).transpose()?;
    let task = build_task(cfg)?;
    let table = task.sample(&net, obs.as_deref(), &mut RngStream::new(cfg.seed, STREAM_SAMPLE))?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(SAMPLES_FILE), table.to_csv().as_bytes())?;
    Ok(table)
}

/// Evaluate a trained checkpoint into `dir/summary.json`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, dir: &Path) -> Result<serde_json::Value> {
    let net = load_net(cfg, checkpoint)?;
    let s = build_task(cfg)?.evaluate(&net, &mut RngStream::new(cfg.seed, STREAM_EVAL))?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&s)?.as_bytes())?;
    Ok(s)
}

/// Reference values for the task into `dir/oracle.json`.
pub fn oracle(cfg: &ExperimentConfig, dir: &Path) -> Result<serde_json::Value> {
    let v = build_task(cfg)?.oracle()?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(ORACLE_FILE), serde_json::to_string_pretty(&v)?.as_bytes())?;
    Ok(v)
}

/// Run the verification suite into `dir/report.json`.
pub fn verify(seed: u64, dir: &Path) -> Result<Vec<CheckReport>> {
    let reports = default_suite(seed)?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(REPORT_FILE), reports_to_json(&reports)?.as_bytes())?;
    Ok(reports)
}

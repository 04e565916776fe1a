//! TOML run manifests. One file fully determines a run; unknown keys and
//! sections for other tasks are rejected with the offending line.

use crate::nn::Arch;
use crate::{Error, RateSchedule, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Euclidean,
    Discrete,
    So3,
    Simplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Bimodal,
    Gandk,
    Inpainting,
    So3Mixture,
    DirichletMixture,
}

impl TaskKind {
    pub fn space(self) -> Space {
        match self {
            TaskKind::Bimodal | TaskKind::Gandk => Space::Euclidean,
            TaskKind::Inpainting => Space::Discrete,
            TaskKind::So3Mixture => Space::So3,
            TaskKind::DirichletMixture => Space::Simplex,
        }
    }

    pub fn section(self) -> &'static str {
        match self {
            TaskKind::Bimodal => "bimodal",
            TaskKind::Gandk => "gandk",
            TaskKind::Inpainting => "inpainting",
            TaskKind::So3Mixture => "so3_mixture",
            TaskKind::DirichletMixture => "dirichlet_mixture",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { beta_min: 0.001, beta_max: 8.0, horizon: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    pub cond_embed: usize,
    pub time_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128], time_embed: 16, cond_embed: 32, time_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: u64,
    pub cosine: bool,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 256, iterations: 50_000, cosine: true, metrics_every: 100, checkpoint_every: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 1000, n_samples: 10_000 }
    }
}

/// One-dimensional two-component Gaussian mixture `0.5 N(-mu, s^2) + 0.5 N(mu, s^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimodalConfig {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self { mu: 2.0, sigma: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GandkConfig {
    /// Observations per data set.
    pub n_obs: usize,
    /// Standardized order statistics fed to the net.
    pub n_summary: usize,
    pub n_pairs: usize,
    pub theta_true: [f64; 4],
    pub calibration_draws: usize,
    pub calibration_samples: usize,
    /// Samples for the posterior at `theta_true`.
    pub posterior_samples: usize,
}

impl Default for GandkConfig {
    fn default() -> Self {
        Self {
            n_obs: 250,
            n_summary: 16,
            n_pairs: 100_000,
            theta_true: [3.0, 1.0, 2.0, 0.5],
            calibration_draws: 64,
            calibration_samples: 200,
            posterior_samples: 2000,
        }
    }
}

/// Inpainting on `{0..S-1}^4`: coordinates 2 and 3 observed, 0 and 1 missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintingConfig {
    pub states: usize,
    /// Width of the discretized Gaussian reference of the noising chain.
    pub sigma: f64,
    /// Strength of the pairwise couplings of the data law.
    pub coupling: f64,
}

impl Default for InpaintingConfig {
    fn default() -> Self {
        Self { states: 4, sigma: 1.5, coupling: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct So3MixtureConfig {
    pub sigma: f64,
}

impl Default for So3MixtureConfig {
    fn default() -> Self {
        Self { sigma: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirichletMixtureConfig {
    pub theta: Vec<f64>,
    pub alphas: Vec<Vec<f64>>,
    /// Held-out points for the ELBO and the data log-likelihood.
    pub n_test: usize,
    /// Histogram bins per coordinate for the marginal TV.
    pub bins: usize,
}

impl Default for DirichletMixtureConfig {
    fn default() -> Self {
        Self {
            theta: vec![3.0; 3],
            alphas: vec![vec![20.0, 4.0, 4.0], vec![4.0, 20.0, 4.0], vec![4.0, 4.0, 20.0], vec![10.0, 10.0, 10.0]],
            n_test: 2000,
            bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: Space,
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub bimodal: Option<BimodalConfig>,
    #[serde(default)]
    pub gandk: Option<GandkConfig>,
    #[serde(default)]
    pub inpainting: Option<InpaintingConfig>,
    #[serde(default)]
    pub so3_mixture: Option<So3MixtureConfig>,
    #[serde(default)]
    pub dirichlet_mixture: Option<DirichletMixtureConfig>,
}

/// 1-based line of `key` inside `[section]` (or at top level), if present.
fn locate(src: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in src.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = Some(l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            if section == current.as_deref() && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if current.as_deref() == section && !key.is_empty() {
            if let Some((k, _)) = l.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Validator<'a> {
    src: &'a str,
}

impl Validator<'_> {
    fn fail(&self, section: Option<&str>, key: &str, msg: impl std::fmt::Display) -> Error {
        let at = locate(self.src, section, key).or_else(|| section.and_then(|s| locate(self.src, Some(s), "")));
        let name = match section {
            Some(s) if key.is_empty() => format!("[{s}]"),
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        match at {
            Some(l) => Error::Config(format!("line {l}: {name}: {msg}")),
            None => Error::Config(format!("{name}: {msg}")),
        }
    }

    fn check(&self, ok: bool, section: &str, key: &str, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(Some(section), key, msg))
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })?;
        cfg.validate_with(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with("")
    }

    fn validate_with(&self, src: &str) -> Result<()> {
        let v = Validator { src };
        if self.task.space() != self.space {
            return Err(v.fail(None, "space", format!("task {:?} lives in {:?}", self.task, self.task.space())));
        }
        let present = [
            (TaskKind::Bimodal, self.bimodal.is_some()),
            (TaskKind::Gandk, self.gandk.is_some()),
            (TaskKind::Inpainting, self.inpainting.is_some()),
            (TaskKind::So3Mixture, self.so3_mixture.is_some()),
            (TaskKind::DirichletMixture, self.dirichlet_mixture.is_some()),
        ];
        for (kind, here) in present {
            if here && kind != self.task {
                return Err(v.fail(
                    Some(kind.section()),
                    "",
                    format!("section does not apply to task {:?}", self.task),
                ));
            }
        }
        let s = &self.schedule;
        RateSchedule::new(s.beta_min, s.beta_max, s.horizon).map_err(|e| v.fail(Some("schedule"), "", e))?;
        let n = &self.net;
        v.check(
            !n.hidden.is_empty() && n.hidden.iter().all(|&h| h > 0),
            "net",
            "hidden",
            "need at least one positive width",
        )?;
        v.check(n.time_embed >= 2 && n.time_embed % 2 == 0, "net", "time_embed", "must be even and >= 2")?;
        v.check(n.cond_embed > 0, "net", "cond_embed", "must be positive")?;
        v.check(n.time_scale > 0.0 && n.time_scale.is_finite(), "net", "time_scale", "must be positive")?;
        let o = &self.optim;
        v.check(o.lr > 0.0 && o.lr.is_finite(), "optim", "lr", "must be positive")?;
        v.check(o.batch > 0, "optim", "batch", "must be positive")?;
        v.check(o.metrics_every > 0, "optim", "metrics_every", "must be positive")?;
        v.check(o.checkpoint_every > 0, "optim", "checkpoint_every", "must be positive")?;
        v.check(self.sampler.n_steps > 0, "sampler", "n_steps", "must be positive")?;
        v.check(
            self.sampler.n_samples > 0 && self.sampler.n_samples <= 1_000_000,
            "sampler",
            "n_samples",
            "must be in 1..=1000000",
        )?;
        match self.task {
            TaskKind::Bimodal => {
                let c = self.bimodal_config();
                v.check(c.mu.is_finite(), "bimodal", "mu", "must be finite")?;
                v.check(c.sigma > 0.0, "bimodal", "sigma", "must be positive")?;
            }
            TaskKind::Gandk => {
                let c = self.gandk_config();
                v.check(c.n_obs >= 1, "gandk", "n_obs", "must be positive")?;
                v.check(c.n_summary >= 1 && c.n_summary <= c.n_obs, "gandk", "n_summary", "must be in 1..=n_obs")?;
                v.check(c.n_pairs >= 1, "gandk", "n_pairs", "must be positive")?;
                v.check(
                    crate::euclidean::GandKParams::from_slice(&c.theta_true).is_ok(),
                    "gandk",
                    "theta_true",
                    "needs B > 0 and k > -0.5",
                )?;
                v.check(c.calibration_samples >= 20, "gandk", "calibration_samples", "need at least 20")?;
                v.check(c.posterior_samples >= 1, "gandk", "posterior_samples", "must be positive")?;
            }
            TaskKind::Inpainting => {
                let c = self.inpainting_config();
                v.check((2..=6).contains(&c.states), "inpainting", "states", "must be in 2..=6")?;
                v.check(c.sigma > 0.0, "inpainting", "sigma", "must be positive")?;
                v.check(c.coupling.is_finite(), "inpainting", "coupling", "must be finite")?;
            }
            TaskKind::So3Mixture => {
                let c = self.so3_mixture_config();
                v.check(c.sigma > 0.0 && c.sigma < 1.0, "so3_mixture", "sigma", "must be in (0, 1)")?;
            }
            TaskKind::DirichletMixture => {
                let c = self.dirichlet_mixture_config();
                v.check(
                    c.theta.len() >= 2 && c.theta.iter().all(|&t| t > 2.0),
                    "dirichlet_mixture",
                    "theta",
                    "need >= 2 entries, each > 2",
                )?;
                v.check(
                    !c.alphas.is_empty()
                        && c.alphas.iter().all(|a| a.len() == c.theta.len() && a.iter().all(|&x| x > 0.0)),
                    "dirichlet_mixture",
                    "alphas",
                    "each component needs one positive entry per coordinate",
                )?;
                v.check(c.n_test >= 2, "dirichlet_mixture", "n_test", "need at least 2")?;
                v.check(c.bins >= 2, "dirichlet_mixture", "bins", "need at least 2")?;
            }
        }
        Ok(())
    }

    pub fn rate_schedule(&self) -> RateSchedule {
        let s = &self.schedule;
        RateSchedule::new(s.beta_min, s.beta_max, s.horizon).expect("validated schedule")
    }

    /// Network architecture for given input, output and conditioning widths.
    pub fn arch(&self, in_dim: usize, out_dim: usize, cond_dim: Option<usize>) -> Arch {
        let a = Arch::new(in_dim, out_dim, self.net.hidden.clone(), self.net.time_embed)
            .with_time_scale(self.net.time_scale);
        match cond_dim {
            Some(c) => a.with_cond(c, self.net.cond_embed),
            None => a,
        }
    }

    pub fn bimodal_config(&self) -> BimodalConfig {
        self.bimodal.clone().unwrap_or_default()
    }

    pub fn gandk_config(&self) -> GandkConfig {
        self.gandk.clone().unwrap_or_default()
    }

    pub fn inpainting_config(&self) -> InpaintingConfig {
        self.inpainting.clone().unwrap_or_default()
    }

    pub fn so3_mixture_config(&self) -> So3MixtureConfig {
        self.so3_mixture.clone().unwrap_or_default()
    }

    pub fn dirichlet_mixture_config(&self) -> DirichletMixtureConfig {
        self.dirichlet_mixture.clone().unwrap_or_default()
    }
}

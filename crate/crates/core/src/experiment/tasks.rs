//! Training tasks: data generation, loss, evaluation and sampling for each
//! state space.

use super::config::{ExperimentConfig, GandkConfig, InpaintingConfig};
use crate::discrete::oracle::tau_leap_law;
use crate::discrete::{
    decode, discrete_ism_loss, discrete_ism_loss_gradient, encode, gaussian_rate_matrix, one_hot, tau_leaping_sample,
    DiscreteBatch, FactorizedCTMC, NetDenoiser, ReverseRateModel,
};
use crate::euclidean::{
    dsm_loss, dsm_loss_gradient, from_unit_box, gandk_sample, reverse_sample, reverse_sample_rows,
    summarize_observations, symmetric_mixture_score, to_unit_box, DsmBatch, DsmWeighting, GandKParams, NetScore,
    ScoreModel,
};
use crate::nn::{Mat, ScoreNet};
use crate::simplex::{
    elbo_estimate, wf_ism_loss, wf_ism_loss_gradient, wf_reverse_sample, DirichletMixture, NetWfScore, WfBatch,
    WfCache, WfParams,
};
use crate::so3::{
    geodesic_random_walk_reverse, so3_dsm_loss, so3_dsm_loss_gradient, IGSO3Cache, NetSo3Score, Rotation, So3Batch,
    WrappedNormalMixture,
};
use crate::{Error, RateSchedule, Result, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use statrs::distribution::{Beta, ContinuousCDF};

/// Rows of sampled values with a header.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// A trainable experiment.
pub trait Task {
    /// Loss and gradient on a fresh training batch.
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)>;
    /// Loss on a batch fixed at construction.
    fn validation_loss(&self, net: &ScoreNet) -> Result<f64>;
    /// Task metrics for a trained net.
    fn evaluate(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<serde_json::Value>;
    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable>;
    /// Reference values that do not depend on a trained net.
    fn oracle(&self) -> Result<serde_json::Value>;
}

const VALIDATION_ROWS: usize = 1024;

pub fn build_task(cfg: &ExperimentConfig) -> Result<Box<dyn Task>> {
    cfg.validate()?;
    use super::config::TaskKind::*;
    let mut rng = RngStream::new(cfg.seed, 1);
    Ok(match cfg.task {
        Bimodal => Box::new(BimodalTask::new(cfg, &mut rng)),
        Gandk => Box::new(GandkTask::new(cfg, &mut rng)?),
        Inpainting => Box::new(InpaintingTask::new(cfg, &mut rng)?),
        So3Mixture => Box::new(So3MixtureTask::new(cfg, &mut rng)?),
        DirichletMixture => Box::new(DirichletMixtureTask::new(cfg, &mut rng)?),
    })
}

fn no_observation(observation: Option<&[f64]>, task: &str) -> Result<()> {
    match observation {
        Some(_) => Err(Error::Config(format!("task {task} takes no observation file"))),
        None => Ok(()),
    }
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < xs.len() {
        xs[i] * (1.0 - f) + xs[i + 1] * f
    } else {
        xs[i]
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs
}

// ----- Euclidean: bimodal ---------------------------------------------------

pub struct BimodalTask {
    mu: f64,
    sigma: f64,
    schedule: RateSchedule,
    batch: usize,
    sampler: (usize, usize),
    val: DsmBatch,
}

impl BimodalTask {
    fn draw(&self, n: usize, rng: &mut RngStream) -> Mat {
        draw_bimodal(self.mu, self.sigma, n, rng)
    }

    fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Self {
        let c = cfg.bimodal_config();
        let schedule = cfg.rate_schedule();
        let x0 = draw_bimodal(c.mu, c.sigma, VALIDATION_ROWS, rng);
        let val = DsmBatch::sample(x0, None, &schedule, rng);
        Self {
            mu: c.mu,
            sigma: c.sigma,
            schedule,
            batch: cfg.optim.batch,
            sampler: (cfg.sampler.n_steps, cfg.sampler.n_samples),
            val,
        }
    }

    fn model<'a>(&self, net: &'a ScoreNet) -> NetScore<'a> {
        NetScore { net, schedule: self.schedule, scaled: true }
    }
}

fn draw_bimodal(mu: f64, sigma: f64, n: usize, rng: &mut RngStream) -> Mat {
    Mat::from_shape_fn((n, 1), |_| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * mu + sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

impl Task for BimodalTask {
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)> {
        let b = DsmBatch::sample(self.draw(self.batch, rng), None, &self.schedule, rng);
        dsm_loss_gradient(&self.model(net), &b, DsmWeighting::Variance)
    }

    fn validation_loss(&self, net: &ScoreNet) -> Result<f64> {
        dsm_loss(&self.model(net), &self.val, DsmWeighting::Variance)
    }

    fn evaluate(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<serde_json::Value> {
        let xs = reverse_sample(&self.model(net), None, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        let n = xs.nrows() as f64;
        let pos = xs.iter().filter(|&&v| v > 0.0).count() as f64 / n;
        let abs_mean = xs.iter().map(|v| v.abs()).sum::<f64>() / n;
        let abs_var = xs.iter().map(|v| (v.abs() - abs_mean).powi(2)).sum::<f64>() / (n - 1.0);
        let side_mean = |keep: fn(f64) -> bool| {
            let v: Vec<f64> = xs.iter().cloned().filter(|&x| keep(x)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        // Relative score error against the exact marginal score on the validation tuples.
        let pred = self.model(net).score(&self.val.xt, &self.val.t, None)?;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.val.len() {
            let k = crate::euclidean::ou_transition(&self.schedule, self.val.t[i])?;
            let s = symmetric_mixture_score(self.val.xt[[i, 0]], self.mu, self.sigma * self.sigma, &k);
            num += k.variance * (pred[[i, 0]] - s).powi(2);
            den += k.variance * s * s;
        }
        Ok(json!({
            "fraction_positive": pos,
            "abs_mean": abs_mean,
            "abs_var": abs_var,
            "mode_positive": side_mean(|x| x > 0.0),
            "mode_negative": side_mean(|x| x <= 0.0),
            "score_relative_error": (num / den).sqrt(),
        }))
    }

    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable> {
        no_observation(observation, "bimodal")?;
        let xs = reverse_sample(&self.model(net), None, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        Ok(SampleTable { header: vec!["x".into()], rows: xs.rows().into_iter().map(|r| r.to_vec()).collect() })
    }

    fn oracle(&self) -> Result<serde_json::Value> {
        let s2 = self.sigma * self.sigma;
        Ok(json!({"mean": 0.0, "variance": self.mu * self.mu + s2}))
    }
}

// ----- Euclidean: g-and-k ---------------------------------------------------

const GANDK_LO: [f64; 4] = [0.0; 4];
const GANDK_HI: [f64; 4] = [10.0; 4];

/// Conditioning features of a g-and-k data set: the median, the log of the
/// interquartile range, and `n` evenly spaced order statistics standardized
/// by those two and passed through `asinh`.
pub fn gandk_features(xi: &[f64], n: usize) -> Result<Vec<f64>> {
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite observation".into()));
    }
    let s = sorted(xi.to_vec());
    let med = quantile_sorted(&s, 0.5);
    let iqr = (quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)).max(1e-6);
    let os = summarize_observations(&s, n)?;
    let mut out = Vec::with_capacity(n + 2);
    out.push(med / 5.0 - 1.0);
    out.push(iqr.ln());
    out.extend(os.iter().map(|v| ((v - med) / iqr).asinh()));
    Ok(out)
}

pub struct GandkTask {
    cfg: GandkConfig,
    schedule: RateSchedule,
    batch: usize,
    n_steps: usize,
    x0: Mat,
    cond: Mat,
    val: DsmBatch,
}

fn prior_draw(rng: &mut RngStream) -> GandKParams {
    let v: Vec<f64> = (0..4).map(|j| rng.gen_range(GANDK_LO[j]..GANDK_HI[j])).collect();
    // B > 0 and k > -0.5 hold on the prior box except on a null set.
    GandKParams::from_slice(&v).unwrap_or(GandKParams { a: v[0], b: 1e-12, g: v[2], k: v[3] })
}

impl GandkTask {
    fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Self> {
        let c = cfg.gandk_config();
        let schedule = cfg.rate_schedule();
        let width = c.n_summary + 2;
        let mut x0 = Mat::zeros((c.n_pairs, 4));
        let mut cond = Mat::zeros((c.n_pairs, width));
        for i in 0..c.n_pairs {
            let p = prior_draw(rng);
            let xi = gandk_sample(&p, c.n_obs, rng);
            let u = to_unit_box(&p.to_vec(), &GANDK_LO, &GANDK_HI);
            x0.row_mut(i).assign(&ndarray::Array1::from(u));
            cond.row_mut(i).assign(&ndarray::Array1::from(gandk_features(&xi, c.n_summary)?));
        }
        let nv = VALIDATION_ROWS.min(c.n_pairs);
        let val = DsmBatch::sample(
            x0.slice(ndarray::s![..nv, ..]).to_owned(),
            Some(cond.slice(ndarray::s![..nv, ..]).to_owned()),
            &schedule,
            rng,
        );
        Ok(Self { cfg: c, schedule, batch: cfg.optim.batch, n_steps: cfg.sampler.n_steps, x0, cond, val })
    }

    fn model<'a>(&self, net: &'a ScoreNet) -> NetScore<'a> {
        NetScore { net, schedule: self.schedule, scaled: true }
    }

    /// Posterior draws on the parameter scale, one block of `per` rows per
    /// feature row.
    fn posterior(&self, net: &ScoreNet, feats: &[Vec<f64>], per: usize, rng: &mut RngStream) -> Result<Vec<Mat>> {
        let w = feats[0].len();
        let cond = Mat::from_shape_fn((feats.len() * per, w), |(i, j)| feats[i / per][j]);
        let u = reverse_sample_rows(&self.model(net), &cond, &self.schedule, self.n_steps, rng)?;
        Ok((0..feats.len())
            .map(|k| {
                Mat::from_shape_fn((per, 4), |(i, j)| {
                    from_unit_box(&u.row(k * per + i).to_vec(), &GANDK_LO, &GANDK_HI)[j]
                })
            })
            .collect())
    }
}

fn column_summary(m: &Mat) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mut mean = vec![];
    let mut sd = vec![];
    let mut lo = vec![];
    let mut hi = vec![];
    for col in m.columns() {
        let mu = col.sum() / n;
        mean.push(mu);
        sd.push((col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt());
        let s = sorted(col.to_vec());
        lo.push(quantile_sorted(&s, 0.05));
        hi.push(quantile_sorted(&s, 0.95));
    }
    (mean, sd, lo, hi)
}

impl Task for GandkTask {
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)> {
        let idx: Vec<usize> = (0..self.batch).map(|_| rng.gen_range(0..self.x0.nrows())).collect();
        let x0 = self.x0.select(ndarray::Axis(0), &idx);
        let cond = self.cond.select(ndarray::Axis(0), &idx);
        let b = DsmBatch::sample(x0, Some(cond), &self.schedule, rng);
        dsm_loss_gradient(&self.model(net), &b, DsmWeighting::Variance)
    }

    fn validation_loss(&self, net: &ScoreNet) -> Result<f64> {
        dsm_loss(&self.model(net), &self.val, DsmWeighting::Variance)
    }

    fn evaluate(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let truth = GandKParams::from_slice(&c.theta_true)?;
        let xi = gandk_sample(&truth, c.n_obs, rng);
        let post = self.posterior(net, &[gandk_features(&xi, c.n_summary)?], c.posterior_samples, rng)?;
        let (mean, sd, lo, hi) = column_summary(&post[0]);
        let abs_err: Vec<f64> = mean.iter().zip(&c.theta_true).map(|(m, t)| (m - t).abs()).collect();

        let mut truths = Vec::with_capacity(c.calibration_draws);
        let mut feats = Vec::with_capacity(c.calibration_draws);
        for _ in 0..c.calibration_draws {
            let p = prior_draw(rng);
            feats.push(gandk_features(&gandk_sample(&p, c.n_obs, rng), c.n_summary)?);
            truths.push(p.to_vec());
        }
        let mut covered = [0usize; 4];
        if !feats.is_empty() {
            let posts = self.posterior(net, &feats, c.calibration_samples, rng)?;
            for (p, t) in posts.iter().zip(&truths) {
                let (_, _, lo, hi) = column_summary(p);
                for j in 0..4 {
                    covered[j] += (lo[j] <= t[j] && t[j] <= hi[j]) as usize;
                }
            }
        }
        let coverage: Vec<f64> = covered.iter().map(|&k| k as f64 / c.calibration_draws.max(1) as f64).collect();
        Ok(json!({
            "theta_true": c.theta_true,
            "posterior_mean": mean,
            "posterior_sd": sd,
            "interval_05": lo,
            "interval_95": hi,
            "abs_error": abs_err,
            "coverage_90": coverage,
            "calibration_draws": c.calibration_draws,
        }))
    }

    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable> {
        let c = &self.cfg;
        let xi = match observation {
            Some(o) => {
                if o.len() < c.n_summary {
                    return Err(Error::Config(format!(
                        "observation has {} values, need at least {}",
                        o.len(),
                        c.n_summary
                    )));
                }
                o.to_vec()
            }
            None => gandk_sample(&GandKParams::from_slice(&c.theta_true)?, c.n_obs, rng),
        };
        let per = c.posterior_samples;
        let post = self.posterior(net, &[gandk_features(&xi, c.n_summary)?], per, rng)?;
        Ok(SampleTable {
            header: ["A", "B", "g", "k"].iter().map(|s| s.to_string()).collect(),
            rows: post[0].rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    fn oracle(&self) -> Result<serde_json::Value> {
        // Prior moments and 90% interval on the parameter scale.
        Ok(
            json!({"prior_mean": [5.0, 5.0, 5.0, 5.0], "prior_interval_05": [0.5, 0.5, 0.5, 0.5], "prior_interval_95": [9.5, 9.5, 9.5, 9.5]}),
        )
    }
}

// ----- Discrete: inpainting -------------------------------------------------

/// Four coordinates; the first two are inpainted given the last two.
pub struct InpaintingTask {
    s: usize,
    /// Data law over `S^4`, indexed by [`encode`].
    law: Vec<f64>,
    cdf: Vec<f64>,
    forward: FactorizedCTMC,
    schedule: RateSchedule,
    batch: usize,
    sampler: (usize, usize),
    val: DiscreteBatch,
}

/// Unnormalized data weights: a chain of quadratic couplings with a pull
/// towards the top state for the first coordinate.
fn inpainting_weight(x: &[usize], c: &InpaintingConfig) -> f64 {
    let f = |v: usize| v as f64;
    let e =
        (f(x[0]) - f(x[2])).powi(2) + (f(x[1]) - f(x[3])).powi(2) + 0.5 * (f(x[0]) - f(x[1])).powi(2) - 0.5 * f(x[0]);
    (-c.coupling * e).exp()
}

impl InpaintingTask {
    fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Self> {
        let c = cfg.inpainting_config();
        let s = c.states;
        let n = s.pow(4);
        let w: Vec<f64> = (0..n).map(|i| inpainting_weight(&decode(i, s, 4), &c)).collect();
        let z: f64 = w.iter().sum();
        let law: Vec<f64> = w.iter().map(|v| v / z).collect();
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &p in &law {
            acc += p;
            cdf.push(acc);
        }
        let forward = FactorizedCTMC::new(gaussian_rate_matrix(s, c.sigma)?, 2)?;
        let schedule = cfg.rate_schedule();
        let mut me = Self {
            s,
            law,
            cdf,
            forward,
            schedule,
            batch: cfg.optim.batch,
            sampler: (cfg.sampler.n_steps, cfg.sampler.n_samples),
            val: DiscreteBatch { x0: vec![], xt: vec![], t: vec![], cond: None, weights: vec![] },
        };
        me.val = me.batch_of(VALIDATION_ROWS, rng)?;
        Ok(me)
    }

    fn draw(&self, rng: &mut RngStream) -> Vec<usize> {
        let u: f64 = rng.gen();
        let i = self.cdf.partition_point(|&c| c < u).min(self.law.len() - 1);
        decode(i, self.s, 4)
    }

    fn batch_of(&self, n: usize, rng: &mut RngStream) -> Result<DiscreteBatch> {
        let xs: Vec<Vec<usize>> = (0..n).map(|_| self.draw(rng)).collect();
        let missing: Vec<Vec<usize>> = xs.iter().map(|x| x[..2].to_vec()).collect();
        let observed: Vec<Vec<usize>> = xs.iter().map(|x| x[2..].to_vec()).collect();
        DiscreteBatch::sample(missing, Some(one_hot(&observed, self.s, 2)), &self.forward, &self.schedule, rng)
    }

    fn denoiser<'a>(&self, net: &'a ScoreNet) -> NetDenoiser<'a> {
        NetDenoiser { net, s: self.s, d: 2 }
    }

    /// Exact posterior of the missing pair given the observed pair, indexed
    /// by `encode(missing)`, and the probability of the observation.
    pub fn posterior(&self, observed: &[usize]) -> (Vec<f64>, f64) {
        let s = self.s;
        let w: Vec<f64> = (0..s * s)
            .map(|i| {
                let m = decode(i, s, 2);
                self.law[encode(&[m[0], m[1], observed[0], observed[1]], s)]
            })
            .collect();
        let z: f64 = w.iter().sum();
        (w.iter().map(|v| v / z).collect(), z)
    }

    fn cond_row(&self, observed: &[usize]) -> Vec<f64> {
        one_hot(&[observed.to_vec()], self.s, 2).row(0).to_vec()
    }

    fn parse_observation(&self, o: &[f64]) -> Result<Vec<usize>> {
        if o.len() != 2 || o.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v as usize >= self.s) {
            return Err(Error::Config(format!("observation must be two states in 0..{}", self.s)));
        }
        Ok(o.iter().map(|&v| v as usize).collect())
    }
}

impl Task for InpaintingTask {
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)> {
        let b = self.batch_of(self.batch, rng)?;
        discrete_ism_loss_gradient(&self.denoiser(net), &self.forward, &self.schedule, &b)
    }

    fn validation_loss(&self, net: &ScoreNet) -> Result<f64> {
        let den = self.denoiser(net);
        let m = ReverseRateModel { denoiser: &den, forward: &self.forward, schedule: self.schedule };
        Ok(discrete_ism_loss(&m, &self.val)?.value)
    }

    fn evaluate(&self, net: &ScoreNet, _rng: &mut RngStream) -> Result<serde_json::Value> {
        let den = self.denoiser(net);
        let m = ReverseRateModel { denoiser: &den, forward: &self.forward, schedule: self.schedule };
        let s = self.s;
        let (mut weighted, mut worst) = (0.0, 0.0f64);
        let mut per = Vec::new();
        for i in 0..s * s {
            let o = decode(i, s, 2);
            let (exact, p_obs) = self.posterior(&o);
            let law = tau_leap_law(&m, Some(&self.cond_row(&o)), self.sampler.0)?;
            let tv = 0.5 * law.probs().iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
            weighted += p_obs * tv;
            worst = worst.max(tv);
            per.push(tv);
        }
        Ok(json!({"tv_weighted": weighted, "tv_max": worst, "tv_per_observation": per, "n_steps": self.sampler.0}))
    }

    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable> {
        let o = match observation {
            Some(o) => self.parse_observation(o)?,
            None => vec![0, 0],
        };
        let den = self.denoiser(net);
        let m = ReverseRateModel { denoiser: &den, forward: &self.forward, schedule: self.schedule };
        let out = tau_leaping_sample(&m, Some(&self.cond_row(&o)), self.sampler.0, self.sampler.1, rng)?;
        Ok(SampleTable {
            header: ["x0", "x1", "x2", "x3"].iter().map(|s| s.to_string()).collect(),
            rows: out.samples.iter().map(|x| vec![x[0] as f64, x[1] as f64, o[0] as f64, o[1] as f64]).collect(),
        })
    }

    fn oracle(&self) -> Result<serde_json::Value> {
        let s = self.s;
        let rows: Vec<serde_json::Value> = (0..s * s)
            .map(|i| {
                let o = decode(i, s, 2);
                let (post, p) = self.posterior(&o);
                json!({"observed": o, "probability": p, "posterior": post})
            })
            .collect();
        Ok(json!({"posteriors": rows}))
    }
}

// ----- SO(3): wrapped-normal mixture ----------------------------------------

pub struct So3MixtureTask {
    mixture: WrappedNormalMixture,
    cache: IGSO3Cache,
    schedule: RateSchedule,
    batch: usize,
    sampler: (usize, usize),
    val: So3Batch,
}

/// Identity and quarter turns about the three axes.
pub fn so3_mixture_means() -> Vec<Rotation> {
    let h = std::f64::consts::FRAC_PI_2;
    let mut v = vec![Rotation::identity()];
    for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
        v.push(Rotation::from_axis_angle(axis, h).expect("unit axis"));
    }
    v
}

impl So3MixtureTask {
    fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Self> {
        let c = cfg.so3_mixture_config();
        let mixture = WrappedNormalMixture::new(so3_mixture_means(), vec![c.sigma; 4])?;
        let schedule = cfg.rate_schedule();
        let cache = IGSO3Cache::new(schedule)?;
        let x0 = (0..VALIDATION_ROWS).map(|_| mixture.sample(None, rng).map(|v| v.0)).collect::<Result<Vec<_>>>()?;
        let val = So3Batch::sample(x0, None, &cache, rng);
        Ok(Self {
            mixture,
            cache,
            schedule,
            batch: cfg.optim.batch,
            sampler: (cfg.sampler.n_steps, cfg.sampler.n_samples),
            val,
        })
    }

    fn model<'a>(&self, net: &'a ScoreNet) -> NetSo3Score<'a> {
        NetSo3Score { net, schedule: self.schedule }
    }
}

impl Task for So3MixtureTask {
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)> {
        let x0 = (0..self.batch).map(|_| self.mixture.sample(None, rng).map(|v| v.0)).collect::<Result<Vec<_>>>()?;
        let b = So3Batch::sample(x0, None, &self.cache, rng);
        so3_dsm_loss_gradient(&self.model(net), &b, DsmWeighting::Variance)
    }

    fn validation_loss(&self, net: &ScoreNet) -> Result<f64> {
        so3_dsm_loss(&self.model(net), &self.val, DsmWeighting::Variance)
    }

    fn evaluate(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<serde_json::Value> {
        let xs =
            geodesic_random_walk_reverse(&self.model(net), None, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        let k = self.mixture.len();
        let mut counts = vec![0usize; k];
        let mut closest = vec![f64::INFINITY; k];
        for x in &xs {
            let (m, _) = self.mixture.nearest(x);
            counts[m] += 1;
            for (j, mu) in self.mixture.means.iter().enumerate() {
                closest[j] = closest[j].min(mu.distance(x));
            }
        }
        let occ: Vec<f64> = counts.iter().map(|&c| c as f64 / xs.len() as f64).collect();
        let dev = occ.iter().map(|o| (o * k as f64 - 1.0).abs()).fold(0.0, f64::max);
        Ok(json!({"occupancy": occ, "max_relative_occupancy_error": dev, "closest_sample": closest, "n": xs.len()}))
    }

    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable> {
        no_observation(observation, "so3_mixture")?;
        let xs =
            geodesic_random_walk_reverse(&self.model(net), None, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        Ok(SampleTable {
            header: ["qw", "qx", "qy", "qz"].iter().map(|s| s.to_string()).collect(),
            rows: xs.iter().map(|x| x.quaternion().to_vec()).collect(),
        })
    }

    fn oracle(&self) -> Result<serde_json::Value> {
        let q: Vec<[f64; 4]> = self.mixture.means.iter().map(|m| m.quaternion()).collect();
        Ok(json!({"means": q, "sigmas": self.mixture.sigmas}))
    }
}

// ----- Simplex: Dirichlet mixture -------------------------------------------

pub struct DirichletMixtureTask {
    mixture: DirichletMixture,
    params: WfParams,
    cache: WfCache,
    schedule: RateSchedule,
    batch: usize,
    sampler: (usize, usize),
    n_test: usize,
    bins: usize,
    val: WfBatch,
}

impl DirichletMixtureTask {
    fn new(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Self> {
        let c = cfg.dirichlet_mixture_config();
        let mixture = DirichletMixture::new(c.alphas.clone())?;
        let params = WfParams::new(c.theta.clone())?;
        let schedule = cfg.rate_schedule();
        let cache = WfCache::new(params.clone(), schedule)?;
        let p0 = draw_mixture(&mixture, VALIDATION_ROWS, rng)?;
        let val = WfBatch::sample(p0, &cache, rng)?;
        Ok(Self {
            mixture,
            params,
            cache,
            schedule,
            batch: cfg.optim.batch,
            sampler: (cfg.sampler.n_steps, cfg.sampler.n_samples),
            n_test: c.n_test,
            bins: c.bins,
            val,
        })
    }

    /// Probability of each of `bins` equal bins on `[0, 1]` for coordinate `i`.
    pub fn marginal_bins(&self, i: usize) -> Vec<f64> {
        let m = self.mixture.len() as f64;
        let mut out = vec![0.0; self.bins];
        for a in self.mixture.alphas() {
            let a0: f64 = a.iter().sum();
            let beta = Beta::new(a[i], a0 - a[i]).expect("positive parameters");
            for (b, o) in out.iter_mut().enumerate() {
                let lo = b as f64 / self.bins as f64;
                let hi = (b + 1) as f64 / self.bins as f64;
                *o += (beta.cdf(hi) - beta.cdf(lo)) / m;
            }
        }
        out
    }
}

fn draw_mixture(m: &DirichletMixture, n: usize, rng: &mut RngStream) -> Result<Mat> {
    let mut out = Mat::zeros((n, m.dim()));
    for mut row in out.rows_mut() {
        row.assign(&ndarray::Array1::from(m.sample(None, rng)?.0));
    }
    Ok(out)
}

/// Per-coordinate histogram TV between samples and exact bin masses.
fn histogram_tv(samples: &Mat, i: usize, exact: &[f64]) -> f64 {
    let bins = exact.len();
    let mut h = vec![0.0; bins];
    for v in samples.column(i) {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = samples.nrows() as f64;
    0.5 * h.iter().zip(exact).map(|(a, b)| (a / n - b).abs()).sum::<f64>()
}

impl Task for DirichletMixtureTask {
    fn loss_gradient(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<(f64, Vec<Mat>)> {
        let p0 = draw_mixture(&self.mixture, self.batch, rng)?;
        let b = WfBatch::sample(p0, &self.cache, rng)?;
        wf_ism_loss_gradient(&NetWfScore { net }, &b, &self.schedule)
    }

    fn validation_loss(&self, net: &ScoreNet) -> Result<f64> {
        wf_ism_loss(&NetWfScore { net }, &self.val, &self.schedule)
    }

    fn evaluate(&self, net: &ScoreNet, rng: &mut RngStream) -> Result<serde_json::Value> {
        let test = draw_mixture(&self.mixture, self.n_test, rng)?;
        let lls = test
            .rows()
            .into_iter()
            .map(|r| self.mixture.log_pdf(r.as_slice().unwrap()).map(|l| l.value))
            .collect::<Result<Vec<_>>>()?;
        let n = lls.len() as f64;
        let ll = lls.iter().sum::<f64>() / n;
        let ll_sd = (lls.iter().map(|v| (v - ll).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let elbo = elbo_estimate(&NetWfScore { net }, &self.params, &self.schedule, &test, rng)?;
        let xs =
            wf_reverse_sample(&NetWfScore { net }, &self.params, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        let tv: Vec<f64> = (0..self.params.dim()).map(|i| histogram_tv(&xs, i, &self.marginal_bins(i))).collect();
        Ok(json!({
            "data_loglik": ll,
            "data_loglik_sd": ll_sd,
            "elbo": elbo.mean,
            "elbo_se": elbo.se,
            "elbo_prior_term": elbo.prior_term,
            "elbo_ism_term": elbo.ism_term,
            "marginal_tv": tv,
            "marginal_tv_max": tv.iter().cloned().fold(0.0, f64::max),
        }))
    }

    fn sample(&self, net: &ScoreNet, observation: Option<&[f64]>, rng: &mut RngStream) -> Result<SampleTable> {
        no_observation(observation, "dirichlet_mixture")?;
        let xs =
            wf_reverse_sample(&NetWfScore { net }, &self.params, &self.schedule, self.sampler.0, self.sampler.1, rng)?;
        Ok(SampleTable {
            header: (0..self.params.dim()).map(|i| format!("p{i}")).collect(),
            rows: xs.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    fn oracle(&self) -> Result<serde_json::Value> {
        let bins: Vec<Vec<f64>> = (0..self.params.dim()).map(|i| self.marginal_bins(i)).collect();
        Ok(json!({"alphas": self.mixture.alphas(), "marginal_bins": bins}))
    }
}

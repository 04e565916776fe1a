//! Diffusion models on R^d with a time-rescaled Ornstein-Uhlenbeck forward
//! process `dX = -beta(t) X / 2 dt + sqrt(beta(t)) dW`.

pub mod gandk;

use crate::nn::{Mat, ParamVars, ScoreNet, Tape, Var};
use crate::schedule::RateSchedule;
use crate::{Error, Result, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

pub use gandk::{gandk_quantile, gandk_sample, summarize_observations, GandKParams};

/// Forward transition `x_t = m x_0 + sqrt(v) z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OUKernelParams {
    pub mean_coeff: f64,
    pub variance: f64,
}

pub fn ou_transition(schedule: &RateSchedule, t: f64) -> Result<OUKernelParams> {
    let tau = schedule.integrated_beta(t)?;
    Ok(ou_from_tau(tau))
}

pub(crate) fn ou_from_tau(tau: f64) -> OUKernelParams {
    let m = (-0.5 * tau).exp();
    // 1 - m^2 without cancellation for small tau.
    let v = -(-tau).exp_m1();
    OUKernelParams { mean_coeff: m, variance: v }
}

/// Score of the forward transition density, `-(x_t - m x_0) / v`.
pub fn conditional_score(xt: &[f64], x0: &[f64], p: &OUKernelParams) -> Result<Vec<f64>> {
    if xt.len() != x0.len() {
        return Err(Error::Shape("x_t and x_0 lengths differ".into()));
    }
    if !(p.variance > 0.0) {
        return Err(Error::Domain("conditional score undefined at zero variance".into()));
    }
    Ok(xt.iter().zip(x0).map(|(a, b)| -(a - p.mean_coeff * b) / p.variance).collect())
}

/// Anything that returns a score for a batch of states.
pub trait ScoreModel {
    fn dim(&self) -> usize;
    /// `x` is `n x dim`; `cond`, if present, is `n x cond_dim`.
    fn score(&self, x: &Mat, t: &[f64], cond: Option<&Mat>) -> Result<Mat>;
}

/// A score network, optionally with output divided by `sqrt(v(t))`.
///
/// The scaled form keeps the net's output O(1) even where the target score
/// is O(1/sqrt(v)), which is what makes training near `t = 0` workable.
pub struct NetScore<'a> {
    pub net: &'a ScoreNet,
    pub schedule: RateSchedule,
    pub scaled: bool,
}

impl NetScore<'_> {
    fn out_scale(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .map(|&ti| if self.scaled { 1.0 / ou_from_tau(self.schedule.tau(ti)).variance.sqrt() } else { 1.0 })
            .collect()
    }
}

impl ScoreModel for NetScore<'_> {
    fn dim(&self) -> usize {
        self.net.arch().in_dim
    }

    fn score(&self, x: &Mat, t: &[f64], cond: Option<&Mat>) -> Result<Mat> {
        let mut out = self.net.forward(x, t, cond)?;
        for (mut row, s) in out.rows_mut().into_iter().zip(self.out_scale(t)) {
            row.mapv_inplace(|v| v * s);
        }
        Ok(out)
    }
}

/// Closure-backed score, for analytic scores in tests and oracles.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&Mat, &[f64]) -> Mat> ScoreModel for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn score(&self, x: &Mat, t: &[f64], _cond: Option<&Mat>) -> Result<Mat> {
        Ok((self.f)(x, t))
    }
}

/// Time weighting of the denoising loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsmWeighting {
    /// Plain `1/2 E |target - pred|^2`.
    Uniform,
    /// Weight `v(t)`, which turns the scaled net into a noise predictor.
    Variance,
}

/// Training tuples `(x_0, cond, t, x_t)`.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub x0: Mat,
    pub cond: Option<Mat>,
    pub t: Vec<f64>,
    pub xt: Mat,
}

impl DsmBatch {
    /// Draw `t ~ U[t_eps, T]` and `x_t` from the forward kernel for each row.
    pub fn sample(x0: Mat, cond: Option<Mat>, schedule: &RateSchedule, rng: &mut RngStream) -> Self {
        let (lo, hi) = (schedule.t_eps(), schedule.horizon);
        let t: Vec<f64> = (0..x0.nrows()).map(|_| rng.gen_range(lo..hi)).collect();
        let mut xt = x0.clone();
        for (i, mut row) in xt.rows_mut().into_iter().enumerate() {
            let k = ou_from_tau(schedule.tau(t[i]));
            let sd = k.variance.sqrt();
            row.mapv_inplace(|v| k.mean_coeff * v + sd * rng.sample::<f64, _>(StandardNormal));
        }
        Self { x0, cond, t, xt }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Conditional-score targets, one row per tuple.
    pub fn targets(&self, schedule: &RateSchedule) -> Result<Mat> {
        let mut out = Mat::zeros(self.xt.raw_dim());
        for i in 0..self.len() {
            let k = ou_transition(schedule, self.t[i])?;
            let s = conditional_score(self.xt.row(i).as_slice().unwrap(), self.x0.row(i).as_slice().unwrap(), &k)?;
            out.row_mut(i).assign(&ndarray::Array1::from(s));
        }
        Ok(out)
    }

    fn weights(&self, schedule: &RateSchedule, w: DsmWeighting) -> Vec<f64> {
        self.t
            .iter()
            .map(|&t| match w {
                DsmWeighting::Uniform => 1.0,
                DsmWeighting::Variance => ou_from_tau(schedule.tau(t)).variance,
            })
            .collect()
    }
}

/// Denoising loss for given predicted scores (one row per tuple).
pub fn dsm_loss_from_scores(pred: &Mat, batch: &DsmBatch, schedule: &RateSchedule, w: DsmWeighting) -> Result<f64> {
    if pred.dim() != batch.xt.dim() {
        return Err(Error::Shape(format!("predictions {:?} for batch {:?}", pred.dim(), batch.xt.dim())));
    }
    let target = batch.targets(schedule)?;
    let wts = batch.weights(schedule, w);
    let mut acc = 0.0;
    for i in 0..batch.len() {
        let r: f64 = pred.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
        acc += wts[i] * r;
    }
    let loss = 0.5 * acc / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite denoising loss".into()));
    }
    Ok(loss)
}

pub fn dsm_loss(model: &NetScore, batch: &DsmBatch, w: DsmWeighting) -> Result<f64> {
    let pred = model.score(&batch.xt, &batch.t, batch.cond.as_ref())?;
    dsm_loss_from_scores(&pred, batch, &model.schedule, w)
}

/// Denoising loss recorded on a tape (for [`ScoreNet::loss_gradient`]).
pub fn dsm_loss_tape(
    model: &NetScore,
    batch: &DsmBatch,
    w: DsmWeighting,
    tape: &mut Tape,
    pv: &ParamVars,
) -> Result<Var> {
    let x = tape.constant(batch.xt.clone());
    let cond = batch.cond.clone().map(|c| tape.constant(c));
    let out = model.net.forward_tape(tape, pv, x, &batch.t, cond)?;
    let n = batch.len();
    let scale = Mat::from_shape_vec((n, 1), model.out_scale(&batch.t)).unwrap();
    let pred = tape.mul_const(out, scale)?;
    let target = batch.targets(&model.schedule)?;
    let neg = target.mapv(|v| -v);
    let r = tape.add_const(pred, &neg)?;
    let r2 = tape.square(r);
    let rs = tape.row_sum(r2);
    let wts = Mat::from_shape_vec((n, 1), batch.weights(&model.schedule, w)).unwrap();
    let wr = tape.mul_const(rs, wts)?;
    let s = tape.sum_all(wr);
    Ok(tape.scale(s, 0.5 / n as f64))
}

pub fn dsm_loss_gradient(model: &NetScore, batch: &DsmBatch, w: DsmWeighting) -> Result<(f64, Vec<Mat>)> {
    model.net.loss_gradient(|tape, pv| dsm_loss_tape(model, batch, w, tape, pv))
}

/// Rows processed per sampler chunk.
const CHUNK: usize = 4096;

fn broadcast_cond(cond: Option<&[f64]>, n: usize) -> Option<Mat> {
    cond.map(|c| Mat::from_shape_fn((n, c.len()), |(_, j)| c[j]))
}

/// Euler-Maruyama over the reverse clock from `T` down to `t_eps`.
/// `noise(step, out)` fills `out` with the standard normals for that step.
fn em_run<N: FnMut(usize, &mut Mat)>(
    model: &dyn ScoreModel,
    cond: Option<&Mat>,
    schedule: &RateSchedule,
    n_steps: usize,
    x: &mut Mat,
    mut noise: N,
) -> Result<()> {
    let t_end = schedule.t_eps();
    let h = (schedule.horizon - t_end) / n_steps as f64;
    let mut z = Mat::zeros(x.raw_dim());
    for k in 0..n_steps {
        let t = schedule.horizon - k as f64 * h;
        let beta = schedule.beta(t);
        let tv = vec![t; x.nrows()];
        let s = model.score(x, &tv, cond)?;
        noise(k, &mut z);
        let sd = (beta * h).sqrt();
        ndarray::Zip::from(&mut *x).and(&s).and(&z).for_each(|xv, &sv, &zv| {
            *xv += (0.5 * beta * *xv + beta * sv) * h + sd * zv;
        });
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep { step: k, what: "reverse state".into() });
        }
    }
    Ok(())
}

/// Reverse-time sampler started from `N(0, I)`; returns `n_samples x dim`.
pub fn reverse_sample(
    model: &dyn ScoreModel,
    cond: Option<&[f64]>,
    schedule: &RateSchedule,
    n_steps: usize,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<Mat> {
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be >= 1".into()));
    }
    let d = model.dim();
    let mut out = Mat::zeros((n_samples, d));
    let mut start = 0;
    while start < n_samples {
        let n = CHUNK.min(n_samples - start);
        let c = broadcast_cond(cond, n);
        let mut x = Mat::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        em_run(model, c.as_ref(), schedule, n_steps, &mut x, |_, z| {
            z.mapv_inplace(|_| rng.sample(StandardNormal));
        })?;
        out.slice_mut(ndarray::s![start..start + n, ..]).assign(&x);
        start += n;
    }
    Ok(out)
}

/// Reverse-time sampler with one conditioning row per sample.
pub fn reverse_sample_rows(
    model: &dyn ScoreModel,
    cond: &Mat,
    schedule: &RateSchedule,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Mat> {
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be >= 1".into()));
    }
    let (n_samples, d) = (cond.nrows(), model.dim());
    let mut out = Mat::zeros((n_samples, d));
    let mut start = 0;
    while start < n_samples {
        let n = CHUNK.min(n_samples - start);
        let c = cond.slice(ndarray::s![start..start + n, ..]).to_owned();
        let mut x = Mat::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        em_run(model, Some(&c), schedule, n_steps, &mut x, |_, z| {
            z.mapv_inplace(|_| rng.sample(StandardNormal));
        })?;
        out.slice_mut(ndarray::s![start..start + n, ..]).assign(&x);
        start += n;
    }
    Ok(out)
}

/// Reverse sampler driven by one Brownian path per sample, resolved on a fine
/// grid of `fine_steps` steps. Runs at any `n_steps` dividing `fine_steps`
/// share the same paths, so differences between step counts are resolved far
/// below the Monte Carlo error of either run alone.
pub fn reverse_sample_nested(
    model: &dyn ScoreModel,
    cond: Option<&[f64]>,
    schedule: &RateSchedule,
    n_steps: usize,
    fine_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Mat> {
    if n_steps == 0 || fine_steps % n_steps != 0 {
        return Err(Error::Domain(format!("{n_steps} steps must divide {fine_steps}")));
    }
    let r = fine_steps / n_steps;
    let d = model.dim();
    let chunk = 1024;
    let mut out = Mat::zeros((n_samples, d));
    let mut start = 0;
    while start < n_samples {
        let n = chunk.min(n_samples - start);
        // Per sample: d initial normals then fine_steps * d increments.
        let width = d * (1 + fine_steps);
        let mut normals = Mat::zeros((n, width));
        for i in 0..n {
            let mut rng = RngStream::new(seed, (start + i) as u64);
            for v in normals.row_mut(i).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut x = normals.slice(ndarray::s![.., 0..d]).to_owned();
        let c = broadcast_cond(cond, n);
        let norm = 1.0 / (r as f64).sqrt();
        em_run(model, c.as_ref(), schedule, n_steps, &mut x, |k, z| {
            for i in 0..n {
                for j in 0..d {
                    let mut acc = 0.0;
                    for f in k * r..(k + 1) * r {
                        acc += normals[[i, d + f * d + j]];
                    }
                    z[[i, j]] = acc * norm;
                }
            }
        })?;
        out.slice_mut(ndarray::s![start..start + n, ..]).assign(&x);
        start += n;
    }
    Ok(out)
}

/// Map `[lo, hi]` to `[-1, 1]` coordinatewise.
pub fn to_unit_box(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(v, (a, b))| 2.0 * (v - a) / (b - a) - 1.0).collect()
}

pub fn from_unit_box(u: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    u.iter().zip(lo.iter().zip(hi)).map(|(v, (a, b))| a + (v + 1.0) * (b - a) / 2.0).collect()
}

/// Marginal score of `0.5 N(-mu, s^2) + 0.5 N(mu, s^2)` data at time `t`.
pub fn symmetric_mixture_score(x: f64, mu: f64, s2: f64, k: &OUKernelParams) -> f64 {
    let a = k.mean_coeff * mu;
    let var = k.mean_coeff * k.mean_coeff * s2 + k.variance;
    (-x + a * (a * x / var).tanh()) / var
}

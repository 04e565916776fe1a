//! Diffusion models on the probability simplex driven by the Wright-Fisher
//! diffusion with parent-independent mutation.
//!
//! The forward generator is
//! `1/2 sum p_i (delta_ij - p_j) d_i d_j + sum_j (theta_j/2 - p_j |theta|/2) d_j`
//! with stationary law `Dirichlet(theta)`. Scores are parameterized as
//! `s^i = p_i d_i log q_t`, which is the same for every extension of `q_t`
//! off the simplex.

mod ancestral;
mod dirichlet;

pub use ancestral::{normal_moments, AncestralCoefficients, AncestralMethod, ANCESTRAL_TAIL, SERIES_MAX_TERM};
pub use dirichlet::{dirichlet_log_pdf, sample_dirichlet, DirichletMixture, LogDensity};

use crate::error::{domain, shape};
use crate::nn::{Mat, ParamVars, ScoreNet, Tape, Var};
use crate::schedule::RateSchedule;
use crate::{Error, Result, RngStream};
use rand::Rng;
use rand_distr::{Binomial, Gamma, StandardNormal};

/// Interior clamp for the reverse sampler and the loss.
pub const P_FLOOR: f64 = 1e-6;
/// Number of quantized training times.
pub const TIME_GRID: usize = 256;
/// Time strata used by [`elbo_estimate`].
pub const ELBO_STRATA: usize = 16;

/// A point of the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint {
    p: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return domain("simplex points need at least 2 coordinates");
        }
        if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return domain(format!("negative or non-finite coordinate in {p:?}"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return domain(format!("coordinates sum to {s}"));
        }
        Ok(Self { p })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }

    pub fn is_interior(&self) -> bool {
        self.p.iter().all(|&x| x >= P_FLOOR)
    }
}

/// Mutation parameters `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct WfParams {
    theta: Vec<f64>,
}

impl WfParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return domain("need at least 2 types");
        }
        if theta.iter().any(|&v| !(v > 2.0 && v.is_finite())) {
            return domain(format!("every theta_j must exceed 2, got {theta:?}"));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn total(&self) -> f64 {
        self.theta.iter().sum()
    }

    /// Score of the stationary law, `theta - 1`.
    pub fn stationary_score(&self) -> Vec<f64> {
        self.theta.iter().map(|v| v - 1.0).collect()
    }

    /// Forward drift `theta_j/2 - p_j |theta| / 2`.
    pub fn forward_drift(&self, p: &[f64]) -> Vec<f64> {
        let tot = self.total();
        self.theta.iter().zip(p).map(|(&th, &x)| 0.5 * th - 0.5 * x * tot).collect()
    }

    /// Constant term of the full ISM integrand dropped by [`integrand_from_parts`]:
    /// `(N - 1)(|theta| - N) / 2`.
    pub fn ism_constant(&self) -> f64 {
        let n = self.dim() as f64;
        0.5 * (n - 1.0) * (self.total() - n)
    }

    pub fn stationary_log_pdf(&self, p: &[f64]) -> f64 {
        dirichlet_log_pdf(&self.theta, p)
    }

    /// Ancestral weights at integrated time `tau`.
    pub fn coefficients(&self, tau: f64) -> Result<AncestralCoefficients> {
        AncestralCoefficients::new(self.total(), tau, ANCESTRAL_TAIL)
    }
}

/// `ancestral_coefficients` with an explicit tail tolerance.
pub fn ancestral_coefficients(params: &WfParams, tau: f64, tail_tol: f64) -> Result<AncestralCoefficients> {
    AncestralCoefficients::new(params.total(), tau, tail_tol)
}

fn multinomial<R: Rng + ?Sized>(n: usize, p: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    let mut left = n as u64;
    let mut mass = 1.0;
    for i in 0..p.len() - 1 {
        if left == 0 {
            break;
        }
        let q = if mass > 0.0 { (p[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = rng.sample(Binomial::new(left, q).unwrap());
        out[i] = k as f64;
        left -= k;
        mass -= p[i];
    }
    out[p.len() - 1] += left as f64;
    out
}

/// One exact draw of `p_t` given `p_0` from precomputed weights.
pub fn sample_with_coefficients<R: Rng + ?Sized>(
    coeffs: &AncestralCoefficients,
    p0: &[f64],
    params: &WfParams,
    rng: &mut R,
) -> Vec<f64> {
    let n = coeffs.quantile(rng.gen::<f64>());
    let counts = multinomial(n, p0, rng);
    let mut g: Vec<f64> =
        counts.iter().zip(params.theta()).map(|(&c, &th)| rng.sample(Gamma::new(c + th, 1.0).unwrap())).collect();
    let s: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= s;
    }
    g
}

/// Exact forward draw at schedule time `t`.
pub fn wf_exact_sample(
    p0: &SimplexPoint,
    params: &WfParams,
    schedule: &RateSchedule,
    t: f64,
    rng: &mut RngStream,
) -> Result<SimplexPoint> {
    if p0.as_slice().len() != params.dim() {
        return shape("p0 and theta differ in dimension");
    }
    if !p0.is_interior() {
        return domain("p0 must be interior");
    }
    let tau = schedule.integrated_beta(t)?;
    let c = params.coefficients(tau)?;
    Ok(SimplexPoint { p: sample_with_coefficients(&c, p0.as_slice(), params, rng) })
}

/// Ancestral weights on a uniform grid of `TIME_GRID` times in `[t_eps, T]`.
#[derive(Clone, Debug)]
pub struct WfCache {
    pub schedule: RateSchedule,
    pub params: WfParams,
    times: Vec<f64>,
    coeffs: Vec<AncestralCoefficients>,
}

impl WfCache {
    pub fn new(params: WfParams, schedule: RateSchedule) -> Result<Self> {
        let (lo, hi) = (schedule.t_eps(), schedule.horizon);
        let times: Vec<f64> = (0..TIME_GRID).map(|i| lo + (hi - lo) * i as f64 / (TIME_GRID - 1) as f64).collect();
        let coeffs = times.iter().map(|&t| params.coefficients(schedule.tau(t))).collect::<Result<Vec<_>>>()?;
        Ok(Self { schedule, params, times, coeffs })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn coefficients(&self, i: usize) -> &AncestralCoefficients {
        &self.coeffs[i]
    }
}

/// Noised training tuples. Rows with a coordinate below [`P_FLOOR`] are
/// dropped and counted in `rejected`.
#[derive(Clone, Debug)]
pub struct WfBatch {
    pub p0: Mat,
    pub t: Vec<f64>,
    pub pt: Mat,
    pub rejected: usize,
}

impl WfBatch {
    pub fn new(p0: Mat, t: Vec<f64>, pt: Mat) -> Result<Self> {
        if p0.dim() != pt.dim() || t.len() != pt.nrows() {
            return shape("p0, t and p_t must agree");
        }
        let keep: Vec<usize> = (0..pt.nrows()).filter(|&i| pt.row(i).iter().all(|&x| x >= P_FLOOR)).collect();
        let rejected = pt.nrows() - keep.len();
        let take = |m: &Mat| Mat::from_shape_fn((keep.len(), m.ncols()), |(i, j)| m[[keep[i], j]]);
        Ok(Self { p0: take(&p0), t: keep.iter().map(|&i| t[i]).collect(), pt: take(&pt), rejected })
    }

    /// Times drawn uniformly from the cache grid.
    pub fn sample(p0: Mat, cache: &WfCache, rng: &mut RngStream) -> Result<Self> {
        if p0.ncols() != cache.params.dim() {
            return shape("data dimension differs from theta");
        }
        let mut t = Vec::with_capacity(p0.nrows());
        let mut pt = Mat::zeros(p0.dim());
        for (i, row) in p0.rows().into_iter().enumerate() {
            let k = rng.gen_range(0..TIME_GRID);
            let x = sample_with_coefficients(cache.coefficients(k), row.as_slice().unwrap(), &cache.params, rng);
            pt.row_mut(i).assign(&ndarray::Array1::from(x));
            t.push(cache.times()[k]);
        }
        Self::new(p0, t, pt)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Score field on the simplex.
pub trait WfScore {
    fn dim(&self) -> usize;

    /// Scores for each row of `p`, with per-row times.
    fn score(&self, p: &Mat, t: &[f64]) -> Result<Mat>;

    /// Scores together with `sum_i D_{e_i - p} s^i`, the divergence term of
    /// the ISM integrand (one entry per row).
    fn score_and_div(&self, p: &Mat, t: &[f64]) -> Result<(Mat, Vec<f64>)>;
}

/// ISM integrand given the score and divergence at `p`, without the constant
/// [`WfParams::ism_constant`].
pub fn integrand_from_parts(p: &[f64], s: &[f64], div: f64) -> f64 {
    let n = p.len() as f64;
    let sum: f64 = s.iter().sum();
    let weighted: f64 = s.iter().zip(p).map(|(v, x)| v * v / x).sum();
    div + 0.5 * (weighted - sum * sum) + (1.0 - n) * sum
}

fn net_features(p: &Mat) -> Mat {
    let (n, d) = p.dim();
    Mat::from_shape_fn((n, 2 * d), |(i, j)| if j < d { p[[i, j]] } else { p[[i, j - d]].ln() })
}

/// Input directions `[u, u / p]` for `u = e_k - p`, one matrix per `k`.
fn tangent_dirs(p: &Mat) -> Vec<Mat> {
    let (n, d) = p.dim();
    (0..d)
        .map(|k| {
            Mat::from_shape_fn((n, 2 * d), |(i, j)| {
                let jj = j % d;
                let u = if jj == k { 1.0 } else { 0.0 } - p[[i, jj]];
                if j < d {
                    u
                } else {
                    u / p[[i, jj]]
                }
            })
        })
        .collect()
}

/// Network score on features `[p, log p]`.
pub struct NetWfScore<'a> {
    pub net: &'a ScoreNet,
}

impl NetWfScore<'_> {
    pub fn check(&self, d: usize) -> Result<()> {
        let a = self.net.arch();
        if a.in_dim != 2 * d || a.out_dim != d {
            return shape(format!("simplex score net must map {} -> {d}", 2 * d));
        }
        Ok(())
    }

    fn check_points(&self, p: &Mat) -> Result<()> {
        self.check(p.ncols())?;
        if p.iter().any(|&x| !(x > 0.0)) {
            return domain("score net needs interior points");
        }
        Ok(())
    }

    /// Scores and per-row integrand terms on the tape: returns `(s, integrand)`
    /// with `integrand` an `n x 1` column.
    pub fn integrand_tape(&self, tape: &mut Tape, pv: &ParamVars, p: &Mat, t: &[f64]) -> Result<(Var, Var)> {
        self.check_points(p)?;
        let d = p.ncols();
        let x = tape.constant(net_features(p));
        let (s, tangents) = self.net.forward_jvp_tape(tape, pv, x, &tangent_dirs(p), t, None)?;
        let mut div = tape.slice_cols(tangents[0], 0, 1)?;
        for (k, &tk) in tangents.iter().enumerate().skip(1) {
            let c = tape.slice_cols(tk, k, 1)?;
            div = tape.add(div, c)?;
        }
        let inv_p = p.mapv(|x| 1.0 / x);
        let s2 = tape.square(s);
        let w = tape.mul_const(s2, inv_p)?;
        let w = tape.row_sum(w);
        let sum = tape.row_sum(s);
        let sum2 = tape.square(sum);
        let q = tape.sub(w, sum2)?;
        let q = tape.scale(q, 0.5);
        let lin = tape.scale(sum, 1.0 - d as f64);
        let out = tape.add(div, q)?;
        let out = tape.add(out, lin)?;
        Ok((s, out))
    }
}

impl WfScore for NetWfScore<'_> {
    fn dim(&self) -> usize {
        self.net.arch().out_dim
    }

    fn score(&self, p: &Mat, t: &[f64]) -> Result<Mat> {
        self.check_points(p)?;
        self.net.forward(&net_features(p), t, None)
    }

    fn score_and_div(&self, p: &Mat, t: &[f64]) -> Result<(Mat, Vec<f64>)> {
        self.check_points(p)?;
        let mut tape = Tape::new();
        let pv = self.net.bind(&mut tape);
        let x = tape.constant(net_features(p));
        let (s, tangents) = self.net.forward_jvp_tape(&mut tape, &pv, x, &tangent_dirs(p), t, None)?;
        let div =
            (0..p.nrows()).map(|i| tangents.iter().enumerate().map(|(k, &tk)| tape.value(tk)[[i, k]]).sum()).collect();
        Ok((tape.value(s).clone(), div))
    }
}

/// Score given by a closure `(p, t) -> (s, div)`.
pub struct FnWfScore<F: Fn(&[f64], f64) -> (Vec<f64>, f64)> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> (Vec<f64>, f64)> WfScore for FnWfScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, p: &Mat, t: &[f64]) -> Result<Mat> {
        Ok(self.score_and_div(p, t)?.0)
    }

    fn score_and_div(&self, p: &Mat, t: &[f64]) -> Result<(Mat, Vec<f64>)> {
        if p.ncols() != self.dim || t.len() != p.nrows() {
            return shape("points and times must agree with the score dimension");
        }
        let mut s = Mat::zeros(p.dim());
        let mut div = Vec::with_capacity(p.nrows());
        for (i, row) in p.rows().into_iter().enumerate() {
            let (v, d) = (self.f)(row.as_slice().unwrap(), t[i]);
            if v.len() != self.dim {
                return shape("closure returned a score of the wrong length");
            }
            s.row_mut(i).assign(&ndarray::Array1::from(v));
            div.push(d);
        }
        Ok((s, div))
    }
}

/// The constant score `s = c`, whose divergence vanishes. `c = theta - 1` is
/// the stationary score.
pub fn constant_score(c: Vec<f64>) -> FnWfScore<impl Fn(&[f64], f64) -> (Vec<f64>, f64)> {
    FnWfScore { dim: c.len(), f: move |_p: &[f64], _t: f64| (c.clone(), 0.0) }
}

/// Per-row ISM integrand (without the constant).
pub fn wf_ism_integrand(model: &dyn WfScore, p: &Mat, t: &[f64]) -> Result<Vec<f64>> {
    let (s, div) = model.score_and_div(p, t)?;
    Ok((0..p.nrows())
        .map(|i| integrand_from_parts(p.row(i).as_slice().unwrap(), s.row(i).as_slice().unwrap(), div[i]))
        .collect())
}

/// Batch mean of `beta(t)` times the ISM integrand.
pub fn wf_ism_loss(model: &dyn WfScore, batch: &WfBatch, schedule: &RateSchedule) -> Result<f64> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let v = wf_ism_integrand(model, &batch.pt, &batch.t)?;
    let loss = v.iter().zip(&batch.t).map(|(x, &t)| schedule.beta(t) * x).sum::<f64>() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite simplex ISM loss".into()));
    }
    Ok(loss)
}

pub fn wf_ism_loss_tape(
    model: &NetWfScore,
    batch: &WfBatch,
    schedule: &RateSchedule,
    tape: &mut Tape,
    pv: &ParamVars,
) -> Result<Var> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let n = batch.len();
    let (_, integrand) = model.integrand_tape(tape, pv, &batch.pt, &batch.t)?;
    let w = Mat::from_shape_fn((n, 1), |(i, _)| schedule.beta(batch.t[i]) / n as f64);
    let wi = tape.mul_const(integrand, w)?;
    Ok(tape.sum_all(wi))
}

pub fn wf_ism_loss_gradient(model: &NetWfScore, batch: &WfBatch, schedule: &RateSchedule) -> Result<(f64, Vec<Mat>)> {
    model.net.loss_gradient(|tape, pv| wf_ism_loss_tape(model, batch, schedule, tape, pv))
}

/// Reverse-time drift per unit `beta`: `sum_i r_ij p_i`.
pub fn reverse_drift(p: &[f64], s: &[f64], params: &WfParams) -> Vec<f64> {
    let n = p.len() as f64;
    let sum: f64 = s.iter().sum();
    let b = params.forward_drift(p);
    (0..p.len()).map(|j| -b[j] + (1.0 - n * p[j]) + s[j] - p[j] * sum).collect()
}

/// Reverse rate `r_ij` from `i` to `j != i`.
pub fn reverse_rate(p: &[f64], s: &[f64], params: &WfParams, i: usize, j: usize) -> f64 {
    let th = params.theta();
    0.5 * th[j] + p[j] / p[i] * (th[i] - 1.0) - p[j] / p[i] * s[i]
}

fn project(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = v.clamp(P_FLOOR, 1.0);
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
}

/// Euler-Maruyama over the reverse clock from `T` to `t_eps`, started from
/// `Dirichlet(theta)`. Returns `n_samples x N`.
pub fn wf_reverse_sample(
    model: &dyn WfScore,
    params: &WfParams,
    schedule: &RateSchedule,
    n_steps: usize,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<Mat> {
    wf_reverse_sample_observed(model, params, schedule, n_steps, n_samples, rng, |_, _| {})
}

/// As [`wf_reverse_sample`], calling `observe(step, points)` after each step.
pub fn wf_reverse_sample_observed(
    model: &dyn WfScore,
    params: &WfParams,
    schedule: &RateSchedule,
    n_steps: usize,
    n_samples: usize,
    rng: &mut RngStream,
    mut observe: impl FnMut(usize, &Mat),
) -> Result<Mat> {
    if n_steps == 0 {
        return domain("n_steps must be >= 1");
    }
    if model.dim() != params.dim() {
        return shape("score and theta differ in dimension");
    }
    let d = params.dim();
    let mut p = Mat::zeros((n_samples, d));
    for mut row in p.rows_mut() {
        row.assign(&ndarray::Array1::from(sample_dirichlet(params.theta(), rng)));
    }
    let t_end = schedule.t_eps();
    let h = (schedule.horizon - t_end) / n_steps as f64;
    let mut z = vec![0.0; d];
    for k in 0..n_steps {
        let t = schedule.horizon - k as f64 * h;
        let beta = schedule.beta(t);
        let s = model.score(&p, &vec![t; n_samples])?;
        let sd = (beta * h).sqrt();
        for i in 0..n_samples {
            let row = p.row(i).to_vec();
            let drift = reverse_drift(&row, s.row(i).as_slice().unwrap(), params);
            // Gaussian with covariance diag(p) - p p^T.
            let mut w_sum = 0.0;
            for j in 0..d {
                z[j] = row[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
                w_sum += z[j];
            }
            let mut next: Vec<f64> =
                (0..d).map(|j| row[j] + beta * drift[j] * h + sd * (z[j] - row[j] * w_sum)).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteStep { step: k, what: "simplex update".into() });
            }
            project(&mut next);
            p.row_mut(i).assign(&ndarray::Array1::from(next));
        }
        observe(k, &p);
    }
    Ok(p)
}

/// Monte Carlo ELBO with its standard error over data rows.
#[derive(Clone, Debug)]
pub struct ElboEstimate {
    pub mean: f64,
    pub se: f64,
    /// Mean of `log Dirichlet(theta)` at the noised endpoints.
    pub prior_term: f64,
    /// Mean of the time integral of the weighted integrand.
    pub ism_term: f64,
    pub n: usize,
}

/// `E log Dir(theta)(p_T) - int_{t_eps}^T beta(t) E[integrand + constant] dt`,
/// with one time per stratum per data row.
pub fn elbo_estimate(
    model: &dyn WfScore,
    params: &WfParams,
    schedule: &RateSchedule,
    data: &Mat,
    rng: &mut RngStream,
) -> Result<ElboEstimate> {
    let (n, d) = data.dim();
    if n < 2 {
        return domain("ELBO needs at least 2 data points");
    }
    if d != params.dim() || model.dim() != d {
        return shape("data, score and theta differ in dimension");
    }
    let t0 = schedule.t_eps();
    let width = (schedule.horizon - t0) / ELBO_STRATA as f64;
    let c_t = params.coefficients(schedule.tau(schedule.horizon))?;
    let mut prior = Vec::with_capacity(n);
    let mut pts = Mat::zeros((n * ELBO_STRATA, d));
    let mut ts = Vec::with_capacity(n * ELBO_STRATA);
    for i in 0..n {
        let x0 = data.row(i).to_vec();
        if x0.iter().any(|&v| !(v > 0.0)) {
            return domain("ELBO data must be interior");
        }
        let pt = sample_with_coefficients(&c_t, &x0, params, rng);
        prior.push(params.stationary_log_pdf(&pt));
        for k in 0..ELBO_STRATA {
            let t = t0 + (k as f64 + rng.gen::<f64>()) * width;
            let c = params.coefficients(schedule.tau(t))?;
            let mut x = sample_with_coefficients(&c, &x0, params, rng);
            if x.iter().any(|&v| v < P_FLOOR) {
                project(&mut x);
            }
            pts.row_mut(i * ELBO_STRATA + k).assign(&ndarray::Array1::from(x));
            ts.push(t);
        }
    }
    let integrand = wf_ism_integrand(model, &pts, &ts)?;
    let cst = params.ism_constant();
    let mut per = Vec::with_capacity(n);
    let mut ism_acc = 0.0;
    for i in 0..n {
        let ism: f64 = (0..ELBO_STRATA)
            .map(|k| {
                let j = i * ELBO_STRATA + k;
                width * schedule.beta(ts[j]) * (integrand[j] + cst)
            })
            .sum();
        ism_acc += ism;
        per.push(prior[i] - ism);
    }
    let mean = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical("non-finite ELBO".into()));
    }
    Ok(ElboEstimate {
        mean,
        se: (var / n as f64).sqrt(),
        prior_term: prior.iter().sum::<f64>() / n as f64,
        ism_term: ism_acc / n as f64,
        n,
    })
}

//! Diffusion models on finite product spaces `{0..S-1}^D` with a forward
//! chain that acts independently on each coordinate.

pub mod oracle;

use crate::error::domain;
use crate::linalg::GeneratorExp;
use crate::nn::{Mat, ParamVars, ScoreNet, Tape, Var};
use crate::process::DiscreteGenerator;
use crate::schedule::RateSchedule;
use crate::{DiscreteDistribution, Error, Result, RngStream};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Clamp applied inside `log A` terms of the loss.
pub const RATE_FLOOR: f64 = 1e-12;

/// Largest product space the brute-force routines will materialize.
pub const MAX_BRUTE_FORCE_STATES: usize = 10_000;

/// Discretized `N(0, sigma^2)` over the centred states `x - (S-1)/2`.
pub fn discretized_gaussian(s: usize, sigma: f64) -> Array1<f64> {
    let c = (s as f64 - 1.0) / 2.0;
    let w = Array1::from_shape_fn(s, |x| (-((x as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let z = w.sum();
    w / z
}

/// Birth-death generator reversible with respect to [`discretized_gaussian`].
///
/// Neighbour rates are `exp(-(E(y) - E(x)) / 2)` with `E(x) = c_x^2 / (2 sigma^2)`,
/// which balances exactly, then scaled so the mean exit rate over states is 1.
pub fn gaussian_rate_matrix(s: usize, sigma: f64) -> Result<DiscreteGenerator> {
    if s < 2 {
        return domain(format!("need at least 2 states, got {s}"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    let c = (s as f64 - 1.0) / 2.0;
    let energy = |x: usize| (x as f64 - c).powi(2) / (2.0 * sigma * sigma);
    let mut r = Array2::zeros((s, s));
    for x in 0..s {
        for y in [x.wrapping_sub(1), x + 1] {
            if y < s {
                r[[x, y]] = (-(energy(y) - energy(x)) / 2.0).exp();
            }
        }
    }
    let mean_exit = r.sum() / s as f64;
    r /= mean_exit;
    DiscreteGenerator::from_off_diagonal(r)
}

/// `exp(integrated_beta(t) B)`, rows summing to one.
pub fn ctmc_transition(b: &DiscreteGenerator, schedule: &RateSchedule, t: f64) -> Result<Array2<f64>> {
    let tau = schedule.integrated_beta(t)?;
    GeneratorExp::new(b.rates()).kernel(tau)
}

/// The same per-coordinate generator on each of `d` coordinates.
#[derive(Clone, Debug)]
pub struct FactorizedCTMC {
    per_dim: DiscreteGenerator,
    s: usize,
    d: usize,
    exp: GeneratorExp,
    stationary: Array1<f64>,
}

impl FactorizedCTMC {
    pub fn new(per_dim: DiscreteGenerator, d: usize) -> Result<Self> {
        if d == 0 {
            return domain("need at least one coordinate");
        }
        let s = per_dim.size();
        let stationary = crate::linalg::stationary(per_dim.rates())
            .ok_or_else(|| Error::Numerical("per-coordinate chain has no positive stationary law".into()))?;
        let exp = GeneratorExp::new(per_dim.rates());
        Ok(Self { per_dim, s, d, exp, stationary })
    }

    pub fn states(&self) -> usize {
        self.s
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn per_dim(&self) -> &DiscreteGenerator {
        &self.per_dim
    }

    pub fn stationary(&self) -> &Array1<f64> {
        &self.stationary
    }

    /// Per-coordinate transition matrix over integrated time `tau`.
    pub fn kernel_tau(&self, tau: f64) -> Result<Array2<f64>> {
        self.exp.kernel(tau)
    }

    /// Full-space generator (Kronecker sum). Only for brute-force sizes.
    pub fn full_generator(&self) -> Result<DiscreteGenerator> {
        kron_sum(&self.per_dim, self.d)
    }
}

pub fn encode(x: &[usize], s: usize) -> usize {
    x.iter().fold(0, |acc, &v| acc * s + v)
}

pub fn decode(mut idx: usize, s: usize, d: usize) -> Vec<usize> {
    let mut out = vec![0; d];
    for k in (0..d).rev() {
        out[k] = idx % s;
        idx /= s;
    }
    out
}

/// Generator of `d` independent copies of `b` on the product space.
pub fn kron_sum(b: &DiscreteGenerator, d: usize) -> Result<DiscreteGenerator> {
    let s = b.size();
    let n = s.checked_pow(d as u32).filter(|&n| n <= MAX_BRUTE_FORCE_STATES);
    let Some(n) = n else {
        return domain(format!("{s}^{d} states exceeds the brute-force limit"));
    };
    let mut r = Array2::zeros((n, n));
    for i in 0..n {
        let x = decode(i, s, d);
        for k in 0..d {
            for y in 0..s {
                if y == x[k] {
                    continue;
                }
                let mut z = x.clone();
                z[k] = y;
                r[[i, encode(&z, s)]] += b.rates()[[x[k], y]];
            }
        }
    }
    DiscreteGenerator::from_off_diagonal(r)
}

/// Exact marginals `q_0 exp(integrated_beta(t) B)` at each requested time.
pub fn brute_force_marginals(
    b: &DiscreteGenerator,
    schedule: &RateSchedule,
    q0: &DiscreteDistribution,
    times: &[f64],
) -> Result<Vec<DiscreteDistribution>> {
    if b.size() > MAX_BRUTE_FORCE_STATES {
        return domain(format!("{} states exceeds the brute-force limit", b.size()));
    }
    if q0.len() != b.size() {
        return Err(Error::Shape("q0 length differs from generator size".into()));
    }
    let g = GeneratorExp::new(b.rates());
    times
        .iter()
        .map(|&t| {
            let tau = schedule.integrated_beta(t)?;
            q0.push(&g.kernel(tau)?)
        })
        .collect()
}

/// Source of per-coordinate denoising distributions `p(x_0^d | x_t)`.
pub trait Denoiser {
    fn states(&self) -> usize;
    fn dims(&self) -> usize;
    /// One row per input state, `D * S` columns; block `d` is the
    /// distribution of coordinate `d` of the clean point.
    fn posterior(&self, xt: &[Vec<usize>], t: &[f64], cond: Option<&Mat>) -> Result<Mat>;
}

/// One-hot encoding, `D * S` columns.
pub fn one_hot(xs: &[Vec<usize>], s: usize, d: usize) -> Mat {
    let mut m = Mat::zeros((xs.len(), s * d));
    for (i, x) in xs.iter().enumerate() {
        for (k, &v) in x.iter().enumerate() {
            m[[i, k * s + v]] = 1.0;
        }
    }
    m
}

/// Denoiser backed by a score network emitting `D * S` logits from a one-hot
/// input.
pub struct NetDenoiser<'a> {
    pub net: &'a ScoreNet,
    pub s: usize,
    pub d: usize,
}

impl NetDenoiser<'_> {
    pub fn check(&self) -> Result<()> {
        let a = self.net.arch();
        if a.in_dim != self.s * self.d || a.out_dim != self.s * self.d {
            return Err(Error::Shape(format!("net must map {0} -> {0}", self.s * self.d)));
        }
        Ok(())
    }

    /// Log-probabilities on a tape.
    pub fn log_posterior_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        xt: &[Vec<usize>],
        t: &[f64],
        cond: Option<&Mat>,
    ) -> Result<Var> {
        let x = tape.constant(one_hot(xt, self.s, self.d));
        let c = cond.map(|c| tape.constant(c.clone()));
        let logits = self.net.forward_tape(tape, pv, x, t, c)?;
        tape.log_softmax_blocks(logits, self.s)
    }
}

impl Denoiser for NetDenoiser<'_> {
    fn states(&self) -> usize {
        self.s
    }
    fn dims(&self) -> usize {
        self.d
    }
    fn posterior(&self, xt: &[Vec<usize>], t: &[f64], cond: Option<&Mat>) -> Result<Mat> {
        self.check()?;
        let mut out = self.net.forward(&one_hot(xt, self.s, self.d), t, cond)?;
        for mut row in out.rows_mut() {
            for mut chunk in row.exact_chunks_mut(self.s) {
                let m = chunk.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                chunk.mapv_inplace(|v| (v - m).exp());
                let z = chunk.sum();
                chunk.mapv_inplace(|v| v / z);
            }
        }
        Ok(out)
    }
}

/// Reverse-rate model: a denoiser plus the forward chain it inverts.
pub struct ReverseRateModel<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub forward: &'a FactorizedCTMC,
    pub schedule: RateSchedule,
}

/// Coefficients `c[k] = q(to | k) / q(from | k)` for one coordinate.
fn ratio_coeffs(kernel: &Array2<f64>, from: usize, to: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = kernel[[k, to]] / kernel[[k, from]];
    }
}

impl ReverseRateModel<'_> {
    fn check(&self) -> Result<()> {
        if self.denoiser.states() != self.forward.states() || self.denoiser.dims() != self.forward.dims() {
            return Err(Error::Shape("denoiser and forward chain disagree on S or D".into()));
        }
        Ok(())
    }

    /// Rates from given posterior rows, `D x S` with diagonal entries set to
    /// minus the coordinate's exit rate.
    fn rates_from_posterior(
        &self,
        x: &[usize],
        post: ndarray::ArrayView1<f64>,
        t: f64,
        kernel: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let (s, d) = (self.forward.states(), self.forward.dims());
        let beta = self.schedule.beta(t);
        let b = self.forward.per_dim().rates();
        let mut out = Array2::zeros((d, s));
        let mut coef = vec![0.0; s];
        for k in 0..d {
            let xk = x[k];
            let pk = post.slice(ndarray::s![k * s..(k + 1) * s]);
            if (0..s).all(|j| pk[j] == 0.0 || kernel[[j, xk]] == 0.0) {
                return Err(Error::Domain(format!("coordinate {k}: state {xk} unreachable from every x_0 with mass")));
            }
            let mut exit = 0.0;
            for y in 0..s {
                if y == xk || b[[y, xk]] == 0.0 {
                    continue;
                }
                ratio_coeffs(kernel, xk, y, &mut coef);
                let mut acc = 0.0;
                for j in 0..s {
                    if pk[j] > 0.0 {
                        acc += coef[j] * pk[j];
                    }
                }
                let a = beta * b[[y, xk]] * acc;
                out[[k, y]] = a;
                exit += a;
            }
            out[[k, xk]] = -exit;
        }
        Ok(out)
    }

    /// Reverse rates at one state: row `d` holds the rates of moving
    /// coordinate `d` to each value.
    pub fn reverse_rates(&self, xt: &[usize], cond: Option<&[f64]>, t: f64) -> Result<Array2<f64>> {
        self.check()?;
        if !(t >= self.schedule.t_eps() * (1.0 - 1e-12) && t <= self.schedule.horizon) {
            return domain(format!("t = {t} outside [t_eps, T]"));
        }
        if xt.len() != self.forward.dims() || xt.iter().any(|&v| v >= self.forward.states()) {
            return Err(Error::Shape("state has wrong length or out-of-range value".into()));
        }
        let c = cond.map(|c| Mat::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        let post = self.denoiser.posterior(&[xt.to_vec()], &[t], c.as_ref())?;
        let kernel = self.forward.kernel_tau(self.schedule.tau(t))?;
        self.rates_from_posterior(xt, post.row(0), t, &kernel)
    }

    /// Rates for a batch of states sharing one time.
    pub fn reverse_rates_batch(&self, xt: &[Vec<usize>], cond: Option<&Mat>, t: f64) -> Result<Vec<Array2<f64>>> {
        self.check()?;
        let post = self.denoiser.posterior(xt, &vec![t; xt.len()], cond)?;
        let kernel = self.forward.kernel_tau(self.schedule.tau(t))?;
        xt.iter().enumerate().map(|(i, x)| self.rates_from_posterior(x, post.row(i), t, &kernel)).collect()
    }
}

/// Training tuples for the discrete losses. `weights` sum to one.
#[derive(Clone, Debug)]
pub struct DiscreteBatch {
    pub x0: Vec<Vec<usize>>,
    pub xt: Vec<Vec<usize>>,
    pub t: Vec<f64>,
    pub cond: Option<Mat>,
    pub weights: Vec<f64>,
}

impl DiscreteBatch {
    /// Draw `t ~ U[t_eps, T]` and noise each coordinate independently.
    pub fn sample(
        x0: Vec<Vec<usize>>,
        cond: Option<Mat>,
        forward: &FactorizedCTMC,
        schedule: &RateSchedule,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let n = x0.len();
        let mut t = Vec::with_capacity(n);
        let mut xt = Vec::with_capacity(n);
        for x in &x0 {
            let ti = rng.gen_range(schedule.t_eps()..schedule.horizon);
            let k = forward.kernel_tau(schedule.tau(ti))?;
            xt.push(x.iter().map(|&v| sample_row(k.row(v), rng)).collect());
            t.push(ti);
        }
        Ok(Self { x0, xt, t, cond, weights: vec![1.0 / n as f64; n] })
    }

    pub fn len(&self) -> usize {
        self.xt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xt.is_empty()
    }
}

pub(crate) fn sample_row<R: Rng + ?Sized>(p: ndarray::ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return j;
        }
    }
    p.len() - 1
}

/// Outcome of a loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Reverse rates clamped at [`RATE_FLOOR`] inside a log.
    pub floor_hits: usize,
}

/// Neighbours `y` of `x` (differing in one coordinate) with `B[x^d, y^d] > 0`.
fn neighbours(x: &[usize], b: &Array2<f64>) -> Vec<(usize, usize)> {
    let s = b.nrows();
    let mut out = Vec::new();
    for (k, &v) in x.iter().enumerate() {
        for y in 0..s {
            if y != v && b[[v, y]] > 0.0 {
                out.push((k, y));
            }
        }
    }
    out
}

/// Implicit score-matching loss
/// `E[-A(x,x) - sum_{y != x} B(x,y) log A(y,x)]` in the denoising
/// parameterization, evaluated through [`ReverseRateModel`].
pub fn discrete_ism_loss(model: &ReverseRateModel, batch: &DiscreteBatch) -> Result<LossValue> {
    model.check()?;
    let d = model.forward.dims();
    let b = model.forward.per_dim().rates();
    let mut total = 0.0;
    let mut hits = 0;
    for i in 0..batch.len() {
        let x = &batch.xt[i];
        let t = batch.t[i];
        let cond_row = batch.cond.as_ref().map(|c| c.row(i).to_vec());
        let a = model.reverse_rates(x, cond_row.as_deref(), t)?;
        let mut v = 0.0;
        for k in 0..d {
            v -= a[[k, x[k]]];
        }
        let beta = model.schedule.beta(t);
        for (k, yk) in neighbours(x, b) {
            let mut y = x.clone();
            y[k] = yk;
            let ay = model.reverse_rates(&y, cond_row.as_deref(), t)?;
            let back = ay[[k, x[k]]];
            let lb = if back > RATE_FLOOR {
                back.ln()
            } else {
                hits += 1;
                RATE_FLOOR.ln()
            };
            v -= beta * b[[x[k], yk]] * lb;
        }
        total += batch.weights[i] * v;
    }
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite discrete loss".into()));
    }
    Ok(LossValue { value: total, floor_hits: hits })
}

/// The same loss on a tape. `log_post(tape, states, t, cond)` must return
/// per-coordinate log-probabilities (`rows x D*S`).
pub fn discrete_ism_loss_tape<F>(
    forward: &FactorizedCTMC,
    schedule: &RateSchedule,
    batch: &DiscreteBatch,
    tape: &mut Tape,
    mut log_post: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, &[Vec<usize>], &[f64], Option<&Mat>) -> Result<Var>,
{
    let (s, d) = (forward.states(), forward.dims());
    let b = forward.per_dim().rates();
    let n = batch.len();
    // Exit-rate coefficients at the base states.
    let mut w_exit = Mat::zeros((n, d * s));
    let mut nb_states = Vec::new();
    let mut nb_t = Vec::new();
    let mut nb_src = Vec::new();
    let mut nb_coef: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    let mut coef = vec![0.0; s];
    for i in 0..n {
        let x = &batch.xt[i];
        let t = batch.t[i];
        let beta = schedule.beta(t);
        let kernel = forward.kernel_tau(schedule.tau(t))?;
        for k in 0..d {
            for y in 0..s {
                if y == x[k] || b[[y, x[k]]] == 0.0 {
                    continue;
                }
                ratio_coeffs(&kernel, x[k], y, &mut coef);
                for j in 0..s {
                    w_exit[[i, k * s + j]] += batch.weights[i] * beta * b[[y, x[k]]] * coef[j];
                }
            }
        }
        for (k, yk) in neighbours(x, b) {
            let mut y = x.clone();
            y[k] = yk;
            ratio_coeffs(&kernel, yk, x[k], &mut coef);
            nb_states.push(y);
            nb_t.push(t);
            nb_src.push(i);
            // Rate back from y to x uses B[x^k, y^k]; the log term is weighted by it too.
            nb_coef.push((k, coef.clone(), beta * b[[x[k], yk]]));
        }
    }
    let lp = log_post(tape, &batch.xt, &batch.t, batch.cond.as_ref())?;
    let p = tape.exp(lp);
    let e = tape.mul_const(p, w_exit)?;
    let exit_term = tape.sum_all(e);
    if nb_states.is_empty() {
        return Ok(exit_term);
    }
    let m = nb_states.len();
    let nb_cond = batch.cond.as_ref().map(|c| Mat::from_shape_fn((m, c.ncols()), |(r, j)| c[[nb_src[r], j]]));
    let lq = log_post(tape, &nb_states, &nb_t, nb_cond.as_ref())?;
    let q = tape.exp(lq);
    let mut cmat = Mat::zeros((m, d * s));
    let mut wlog = Mat::zeros((m, 1));
    for (r, (k, c, w)) in nb_coef.iter().enumerate() {
        for j in 0..s {
            cmat[[r, k * s + j]] = w * c[j];
        }
        wlog[[r, 0]] = -w * batch.weights[nb_src[r]];
    }
    let back = tape.mul_const(q, cmat)?;
    let back = tape.row_sum(back);
    let lb = tape.log_floor(back, RATE_FLOOR);
    let wl = tape.mul_const(lb, wlog)?;
    let log_term = tape.sum_all(wl);
    tape.add(exit_term, log_term)
}

/// Loss value and parameter gradient for a net denoiser.
pub fn discrete_ism_loss_gradient(
    den: &NetDenoiser,
    forward: &FactorizedCTMC,
    schedule: &RateSchedule,
    batch: &DiscreteBatch,
) -> Result<(f64, Vec<Mat>)> {
    den.check()?;
    den.net.loss_gradient(|tape, pv| {
        discrete_ism_loss_tape(forward, schedule, batch, tape, |tape, xs, t, c| {
            den.log_posterior_tape(tape, pv, xs, t, c)
        })
    })
}

/// Result of a tau-leaping run.
#[derive(Clone, Debug)]
pub struct TauLeapOutput {
    pub samples: Vec<Vec<usize>>,
    /// Jumps truncated at the edge of the state range.
    pub clamps: usize,
}

/// Apply Poisson jump counts to one coordinate: destinations in increasing
/// order, each moving by `count * (y - x)` from the current value and clamped
/// to `[0, S-1]`. Returns the new value and whether any clamp occurred.
pub fn apply_jumps(x: usize, counts: &[(usize, u64)], s: usize) -> (usize, bool) {
    let mut v = x as i64;
    let mut clamped = false;
    for &(y, c) in counts {
        if c == 0 {
            continue;
        }
        let next = v + c as i64 * (y as i64 - x as i64);
        let bounded = next.clamp(0, s as i64 - 1);
        clamped |= bounded != next;
        v = bounded;
    }
    (v as usize, clamped)
}

/// Tau-leaping simulation of the reverse chain from the stationary
/// reference at `T` down to time 0 in `n_steps` equal steps.
pub fn tau_leaping_sample(
    model: &ReverseRateModel,
    cond: Option<&[f64]>,
    n_steps: usize,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<TauLeapOutput> {
    model.check()?;
    if n_steps == 0 {
        return domain("n_steps must be >= 1");
    }
    let (s, d) = (model.forward.states(), model.forward.dims());
    let pi = model.forward.stationary().clone();
    let mut xs: Vec<Vec<usize>> =
        (0..n_samples).map(|_| (0..d).map(|_| sample_row(pi.view(), rng)).collect()).collect();
    let h = model.schedule.horizon / n_steps as f64;
    let cmat = cond.map(|c| Mat::from_shape_fn((n_samples, c.len()), |(_, j)| c[j]));
    let mut clamps = 0;
    let mut counts = Vec::with_capacity(s);
    for k in 0..n_steps {
        let t = model.schedule.horizon - k as f64 * h;
        let rates = model.reverse_rates_batch(&xs, cmat.as_ref(), t)?;
        for (x, a) in xs.iter_mut().zip(&rates) {
            for dim in 0..d {
                counts.clear();
                for y in 0..s {
                    if y == x[dim] {
                        continue;
                    }
                    let lam = a[[dim, y]] * h;
                    if lam > 0.0 {
                        let c = Poisson::new(lam).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng) as u64;
                        counts.push((y, c));
                    }
                }
                let (v, cl) = apply_jumps(x[dim], &counts, s);
                x[dim] = v;
                clamps += cl as usize;
            }
        }
    }
    Ok(TauLeapOutput { samples: xs, clamps })
}

/// Empirical law over the product space.
pub fn empirical_law(samples: &[Vec<usize>], s: usize, d: usize) -> Result<DiscreteDistribution> {
    let n = s.pow(d as u32);
    let mut w = Array1::zeros(n);
    for x in samples {
        w[encode(x, s)] += 1.0;
    }
    DiscreteDistribution::from_weights(w)
}

/// Denoising score-matching counterpart of [`discrete_ism_loss`]; needs the
/// clean points of the batch. Differs from the ISM loss by a quantity that
/// does not depend on the denoiser.
pub fn discrete_dsm_loss(model: &ReverseRateModel, batch: &DiscreteBatch) -> Result<LossValue> {
    model.check()?;
    let b = model.forward.per_dim().rates();
    let mut total = 0.0;
    let mut hits = 0;
    for i in 0..batch.len() {
        let (x, x0, t) = (&batch.xt[i], &batch.x0[i], batch.t[i]);
        let cond_row = batch.cond.as_ref().map(|c| c.row(i).to_vec());
        let kernel = model.forward.kernel_tau(model.schedule.tau(t))?;
        let beta = model.schedule.beta(t);
        let mut v = 0.0;
        for (k, yk) in neighbours(x, b) {
            let mut y = x.clone();
            y[k] = yk;
            let back = model.reverse_rates(&y, cond_row.as_deref(), t)?[[k, x[k]]];
            let bxy = beta * b[[x[k], yk]];
            let g = kernel[[x0[k], yk]] / kernel[[x0[k], x[k]]];
            let r = g * back / bxy;
            let lr = if r > RATE_FLOOR {
                r.ln()
            } else {
                hits += 1;
                RATE_FLOOR.ln()
            };
            v += bxy * (r - lr - 1.0);
        }
        total += batch.weights[i] * v;
    }
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite discrete loss".into()));
    }
    Ok(LossValue { value: total, floor_hits: hits })
}

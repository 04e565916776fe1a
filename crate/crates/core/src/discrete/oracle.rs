//! Brute-force references on enumerable product spaces.

use super::{decode, encode, Denoiser, DiscreteBatch, FactorizedCTMC, ReverseRateModel, MAX_BRUTE_FORCE_STATES};
use crate::error::domain;
use crate::nn::Mat;
use crate::schedule::RateSchedule;
use crate::{DiscreteDistribution, Error, Result};
use ndarray::{Array1, Array2};

/// Exact Bayes posterior over clean points given a joint data law on the
/// whole product space. Ignores conditioning.
pub struct ExactDenoiser {
    pub q0: DiscreteDistribution,
    pub forward: FactorizedCTMC,
    pub schedule: RateSchedule,
}

impl ExactDenoiser {
    pub fn new(q0: DiscreteDistribution, forward: FactorizedCTMC, schedule: RateSchedule) -> Result<Self> {
        let n = forward.states().checked_pow(forward.dims() as u32);
        if n != Some(q0.len()) || q0.len() > MAX_BRUTE_FORCE_STATES {
            return Err(Error::Shape("q0 must cover the (enumerable) product space".into()));
        }
        Ok(Self { q0, forward, schedule })
    }
}

impl Denoiser for ExactDenoiser {
    fn states(&self) -> usize {
        self.forward.states()
    }
    fn dims(&self) -> usize {
        self.forward.dims()
    }
    fn posterior(&self, xt: &[Vec<usize>], t: &[f64], _cond: Option<&Mat>) -> Result<Mat> {
        let (s, d) = (self.states(), self.dims());
        let mut out = Mat::zeros((xt.len(), s * d));
        let mut cached: Option<(f64, Array2<f64>)> = None;
        let clean: Vec<Vec<usize>> = (0..self.q0.len()).map(|i| decode(i, s, d)).collect();
        for (r, x) in xt.iter().enumerate() {
            if cached.as_ref().map(|c| c.0) != Some(t[r]) {
                cached = Some((t[r], self.forward.kernel_tau(self.schedule.tau(t[r]))?));
            }
            let k = &cached.as_ref().unwrap().1;
            let mut z = 0.0;
            for (i, x0) in clean.iter().enumerate() {
                let mut w = self.q0.probs()[i];
                if w == 0.0 {
                    continue;
                }
                for e in 0..d {
                    w *= k[[x0[e], x[e]]];
                }
                z += w;
                for e in 0..d {
                    out[[r, e * s + x0[e]]] += w;
                }
            }
            if z <= 0.0 {
                return domain(format!("state {x:?} has zero probability at t = {}", t[r]));
            }
            out.row_mut(r).mapv_inplace(|v| v / z);
        }
        Ok(out)
    }
}

/// True time-reversal rates `beta(t) B(y, x) q_t(y) / q_t(x)` of a
/// full-space generator, returned as a matrix with the usual diagonal.
pub fn time_reversal_rates(b_full: &Array2<f64>, beta: f64, q_t: &Array1<f64>) -> Array2<f64> {
    let n = q_t.len();
    let mut a = Array2::zeros((n, n));
    for x in 0..n {
        let mut exit = 0.0;
        for y in 0..n {
            if y != x && q_t[x] > 0.0 {
                let v = beta * b_full[[y, x]] * q_t[y] / q_t[x];
                a[[x, y]] = v;
                exit += v;
            }
        }
        a[[x, x]] = -exit;
    }
    a
}

/// Batch enumerating every state, weighted by `q_t`, all at time `t`.
pub fn exhaustive_batch(q_t: &DiscreteDistribution, s: usize, d: usize, t: f64) -> DiscreteBatch {
    let mut xt = Vec::new();
    let mut w = Vec::new();
    for (i, &p) in q_t.probs().iter().enumerate() {
        if p > 0.0 {
            xt.push(decode(i, s, d));
            w.push(p);
        }
    }
    let n = xt.len();
    DiscreteBatch { x0: xt.clone(), xt, t: vec![t; n], cond: None, weights: w }
}

/// Poisson pmf truncated once past the mode and the terms drop below `1e-17`.
fn poisson_support(lam: f64) -> Vec<f64> {
    if lam == 0.0 {
        return vec![1.0];
    }
    let mut out = Vec::new();
    let mut p = (-lam).exp();
    let mut k = 0u64;
    loop {
        out.push(p);
        k += 1;
        p *= lam / k as f64;
        if (k as f64 > lam && p < 1e-17) || k > 100_000 {
            break;
        }
    }
    out
}

/// Law of one coordinate after one tau-leap step from value `x` with the
/// given jump rates (row of length S).
fn coordinate_step(x: usize, rates: ndarray::ArrayView1<f64>, h: f64) -> Array1<f64> {
    let s = rates.len();
    let dests: Vec<(usize, Vec<f64>)> =
        (0..s).filter(|&y| y != x && rates[y] > 0.0).map(|y| (y, poisson_support(rates[y] * h))).collect();
    let mut out = Array1::zeros(s);
    // Enumerate count vectors recursively; the jump rule is order dependent.
    fn rec(
        dests: &[(usize, Vec<f64>)],
        idx: usize,
        counts: &mut Vec<(usize, u64)>,
        p: f64,
        x: usize,
        s: usize,
        out: &mut Array1<f64>,
    ) {
        if idx == dests.len() {
            let (v, _) = super::apply_jumps(x, counts, s);
            out[v] += p;
            return;
        }
        for (c, &pc) in dests[idx].1.iter().enumerate() {
            counts.push((dests[idx].0, c as u64));
            rec(dests, idx + 1, counts, p * pc, x, s, out);
            counts.pop();
        }
    }
    rec(&dests, 0, &mut Vec::new(), 1.0, x, s, &mut out);
    let z = out.sum();
    out / z
}

/// Exact law of the tau-leaping chain with `n_steps` steps, starting from
/// the product stationary law. Full-space enumeration.
pub fn tau_leap_law(model: &ReverseRateModel, cond: Option<&[f64]>, n_steps: usize) -> Result<DiscreteDistribution> {
    let (s, d) = (model.forward.states(), model.forward.dims());
    let n = s.pow(d as u32);
    if n > MAX_BRUTE_FORCE_STATES {
        return domain("product space too large for the tau-leap law");
    }
    if n_steps == 0 {
        return domain("n_steps must be >= 1");
    }
    let pi = model.forward.stationary();
    let mut law = Array1::from_shape_fn(n, |i| decode(i, s, d).iter().map(|&v| pi[v]).product::<f64>());
    let states: Vec<Vec<usize>> = (0..n).map(|i| decode(i, s, d)).collect();
    let h = model.schedule.horizon / n_steps as f64;
    let cmat = cond.map(|c| Mat::from_shape_fn((n, c.len()), |(_, j)| c[j]));
    for k in 0..n_steps {
        let t = model.schedule.horizon - k as f64 * h;
        let rates = model.reverse_rates_batch(&states, cmat.as_ref(), t)?;
        let mut next = Array1::zeros(n);
        for (i, x) in states.iter().enumerate() {
            if law[i] == 0.0 {
                continue;
            }
            let per: Vec<Array1<f64>> = (0..d).map(|e| coordinate_step(x[e], rates[i].row(e), h)).collect();
            for (j, y) in states.iter().enumerate() {
                let p: f64 = (0..d).map(|e| per[e][y[e]]).product();
                next[j] += law[i] * p;
            }
        }
        law = next;
    }
    DiscreteDistribution::new(law)
}

/// Score-ratio objective `sum_x q(x) [sum_{y != x} B(y,x) s(x,y) - sum_{y != x} B(x,y) log(B(x,y) s(y,x))]`
/// for a tabular ratio `s(x, y)` standing in for `q(y)/q(x)`.
pub fn ratio_ism_objective(b: &Array2<f64>, q: &Array1<f64>, s: &Array2<f64>) -> f64 {
    let n = q.len();
    let mut v = 0.0;
    for x in 0..n {
        for y in 0..n {
            if y == x {
                continue;
            }
            if b[[y, x]] > 0.0 {
                v += q[x] * b[[y, x]] * s[[x, y]];
            }
            if b[[x, y]] > 0.0 {
                v -= q[x] * b[[x, y]] * (b[[x, y]] * s[[y, x]]).ln();
            }
        }
    }
    v
}

/// Index helper re-exported for callers building full-space tables.
pub fn state_index(x: &[usize], s: usize) -> usize {
    encode(x, s)
}

/// Time-independent denoiser given by a probability table with one row per
/// full-space state (`D * S` columns, each block normalized).
pub struct TableDenoiser {
    pub table: Mat,
    pub s: usize,
    pub d: usize,
}

impl Denoiser for TableDenoiser {
    fn states(&self) -> usize {
        self.s
    }
    fn dims(&self) -> usize {
        self.d
    }
    fn posterior(&self, xt: &[Vec<usize>], _t: &[f64], _cond: Option<&Mat>) -> Result<Mat> {
        let mut out = Mat::zeros((xt.len(), self.s * self.d));
        for (r, x) in xt.iter().enumerate() {
            out.row_mut(r).assign(&self.table.row(encode(x, self.s)));
        }
        Ok(out)
    }
}

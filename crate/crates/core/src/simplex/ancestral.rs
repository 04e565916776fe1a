//! Ancestral-process mixture weights for the Wright-Fisher transition law.
//!
//! Started from any `p0`, the law at time `t` is a mixture over the number
//! `n` of surviving ancestral lineages: `p_t ~ Dirichlet(alpha + Theta)` with
//! `alpha ~ Multinomial(n, p0)`. The lineage count is a pure death process
//! from infinity with rates `n (n + theta - 1) / 2`.

use crate::error::domain;
use crate::{Error, Result};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// Largest series term magnitude for which the alternating series is trusted.
pub const SERIES_MAX_TERM: f64 = 1e6;
/// Default truncation tail.
pub const ANCESTRAL_TAIL: f64 = 1e-8;

const MAX_LINEAGES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AncestralMethod {
    Series,
    Normal,
}

/// Weights `d_n(t)` over lineage counts `offset, offset + 1, ...`.
#[derive(Clone, Debug)]
pub struct AncestralCoefficients {
    pub t: f64,
    pub method: AncestralMethod,
    offset: usize,
    weights: Vec<f64>,
    cdf: Vec<f64>,
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Log-magnitude of the `(n, k)` series term. The sign is `(-1)^(k-n)`.
fn log_term(n: usize, k: usize, theta: f64, t: f64) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    -kf * (kf + theta - 1.0) * t / 2.0 + (2.0 * kf + theta - 1.0).ln() + ln_gamma(nf + theta + kf - 1.0)
        - ln_gamma(nf + theta)
        - ln_gamma(nf + 1.0)
        - ln_gamma(kf - nf + 1.0)
}

/// Terms below this log-magnitude are dropped.
const LOG_NEGLIGIBLE: f64 = -55.0;

struct SeriesOutcome {
    weights: Vec<f64>,
    max_log_term: f64,
}

fn series(theta: f64, t: f64, stop_log: f64) -> SeriesOutcome {
    let mut weights = Vec::new();
    let mut max_log_term = f64::NEG_INFINITY;
    for n in 0..MAX_LINEAGES {
        let mut acc = KahanSum::default();
        let mut row_max = f64::NEG_INFINITY;
        let mut prev = f64::NEG_INFINITY;
        let mut k = n;
        loop {
            let lt = log_term(n, k, theta, t);
            if lt > stop_log {
                return SeriesOutcome { weights, max_log_term: lt };
            }
            row_max = row_max.max(lt);
            let sign = if (k - n) % 2 == 0 { 1.0 } else { -1.0 };
            acc.add(sign * lt.exp());
            // Terms grow at first, then fall like exp(-k^2 t / 2).
            if lt < LOG_NEGLIGIBLE && lt < prev {
                break;
            }
            prev = lt;
            k += 1;
        }
        max_log_term = max_log_term.max(row_max);
        weights.push(acc.value());
        if max_log_term > stop_log || row_max < LOG_NEGLIGIBLE {
            break;
        }
    }
    SeriesOutcome { weights, max_log_term }
}

/// Moments of the normal approximation to the lineage count.
pub fn normal_moments(theta: f64, t: f64) -> (f64, f64) {
    let b = 0.5 * (theta - 1.0) * t;
    if b.abs() < 1e-6 {
        return (2.0 / t, 2.0 / (3.0 * t));
    }
    let eta = b / b.exp_m1();
    let mean = 2.0 * eta / t;
    let var = mean * (eta + b).powi(2) * (1.0 + eta / (eta + b) - 2.0 * eta) / (b * b);
    (mean, var)
}

impl AncestralCoefficients {
    /// Weights for total mutation rate `theta` at time `t > 0`.
    pub fn new(theta: f64, t: f64, tail_tol: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!("ancestral coefficients need t > 0, got {t}"));
        }
        if !(theta > 1.0 && theta.is_finite()) {
            return domain(format!("total mutation rate must exceed 1, got {theta}"));
        }
        if !(tail_tol > 0.0 && tail_tol < 1.0) {
            return domain("tail tolerance must be in (0, 1)");
        }
        let out = series(theta, t, SERIES_MAX_TERM.ln());
        if out.max_log_term <= SERIES_MAX_TERM.ln() {
            Self::from_series(t, out.weights, tail_tol)
        } else {
            Self::normal(theta, t, tail_tol)
        }
    }

    fn from_series(t: f64, mut w: Vec<f64>, tail_tol: f64) -> Result<Self> {
        // Cancellation leaves errors of a few hundred ulps of the largest term.
        let noise = SERIES_MAX_TERM * 1e-12;
        if let Some(v) = w.iter().find(|&&v| v < -noise) {
            return Err(Error::Numerical(format!("alternating series failure: weight {v} at t = {t}")));
        }
        for v in w.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > tail_tol.max(noise) {
            return Err(Error::Numerical(format!("alternating series failure: weights sum to {total} at t = {t}")));
        }
        Ok(Self::finish(t, AncestralMethod::Series, 0, w))
    }

    /// Discretized normal approximation, without trying the series.
    pub fn normal(theta: f64, t: f64, tail_tol: f64) -> Result<Self> {
        let (mean, var) = normal_moments(theta, t);
        let sd = var.sqrt();
        if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
            return Err(Error::Numerical(format!("normal approximation degenerate at t = {t}")));
        }
        // Half-width so that each tail holds less than tail_tol.
        let z = {
            let mut z = 4.0;
            while 0.5 * erfc(z / std::f64::consts::SQRT_2) > 0.5 * tail_tol {
                z += 0.5;
            }
            z
        };
        let lo = (mean - z * sd - 1.0).floor().max(0.0) as usize;
        let hi = (mean + z * sd + 1.0).ceil() as usize;
        let cdf = |x: f64| 0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2));
        let w: Vec<f64> = (lo..=hi)
            .map(|n| {
                let a = if n == 0 { 0.0 } else { cdf(n as f64 - 0.5) };
                cdf(n as f64 + 0.5) - a
            })
            .collect();
        let total: f64 = w.iter().sum();
        Ok(Self::finish(t, AncestralMethod::Normal, lo, w.into_iter().map(|v| v / total).collect()))
    }

    fn finish(t: f64, method: AncestralMethod, offset: usize, mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        for v in weights.iter_mut() {
            *v /= total;
        }
        while weights.len() > 1 && *weights.last().unwrap() == 0.0 {
            weights.pop();
        }
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &v in &weights {
            acc += v;
            cdf.push(acc);
        }
        Self { t, method, offset, weights, cdf }
    }

    /// Smallest lineage count with a stored weight.
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Stored weights, starting at [`offset`](Self::offset).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, n: usize) -> f64 {
        if n < self.offset {
            return 0.0;
        }
        self.weights.get(n - self.offset).copied().unwrap_or(0.0)
    }

    /// `(n, d_n)` pairs with nonzero weight.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().enumerate().map(move |(i, &w)| (i + self.offset, w))
    }

    /// Lineage count for a uniform variate `u`.
    pub fn quantile(&self, u: f64) -> usize {
        let i = self.cdf.partition_point(|&c| c < u).min(self.weights.len() - 1);
        i + self.offset
    }
}

//! Finite-space generators, distributions and the score-matching operator.

use crate::error::{domain, shape};
use crate::Result;
use ndarray::{Array1, Array2};

/// Generator matrix of a continuous-time Markov chain on a finite space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteGenerator {
    rates: Array2<f64>,
}

/// Row-sum tolerance for a generator.
pub const GENERATOR_TOL: f64 = 1e-12;

impl DiscreteGenerator {
    pub fn new(rates: Array2<f64>) -> Result<Self> {
        let n = rates.nrows();
        if n == 0 || rates.ncols() != n {
            return shape(format!("generator must be square and nonempty, got {:?}", rates.dim()));
        }
        for x in 0..n {
            let mut sum = 0.0;
            let mut scale = 0.0f64;
            for y in 0..n {
                let r = rates[[x, y]];
                if !r.is_finite() {
                    return domain(format!("non-finite rate at ({x}, {y})"));
                }
                if x != y && r < 0.0 {
                    return domain(format!("negative off-diagonal rate {r} at ({x}, {y})"));
                }
                sum += r;
                scale = scale.max(r.abs());
            }
            if sum.abs() > GENERATOR_TOL * scale.max(1.0) {
                return domain(format!("row {x} sums to {sum}"));
            }
        }
        Ok(Self { rates })
    }

    /// Build from off-diagonal rates; the diagonal is overwritten with minus
    /// the row sum.
    pub fn from_off_diagonal(mut rates: Array2<f64>) -> Result<Self> {
        let n = rates.nrows();
        if rates.ncols() != n {
            return shape("generator must be square");
        }
        for x in 0..n {
            rates[[x, x]] = 0.0;
            let s: f64 = rates.row(x).sum();
            rates[[x, x]] = -s;
        }
        Self::new(rates)
    }

    pub fn size(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.rates
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { rates: &self.rates * c }
    }
}

/// Probability vector on a finite space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    probs: Array1<f64>,
}

pub const DISTRIBUTION_TOL: f64 = 1e-12;

impl DiscreteDistribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.is_empty() {
            return shape("empty distribution");
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return domain("probabilities must be finite and nonnegative");
        }
        let s = probs.sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOL * probs.len() as f64 {
            return domain(format!("probabilities sum to {s}"));
        }
        Ok(Self { probs })
    }

    /// Normalize nonnegative weights.
    pub fn from_weights(w: Array1<f64>) -> Result<Self> {
        let s = w.sum();
        if !(s > 0.0) || w.iter().any(|&p| !(p >= 0.0)) {
            return domain("weights must be nonnegative with positive total");
        }
        Self::new(w / s)
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: Array1::from_elem(n, 1.0 / n as f64) }
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Evolve by a row-stochastic kernel: p K.
    pub fn push(&self, kernel: &Array2<f64>) -> Result<Self> {
        if kernel.nrows() != self.len() {
            return shape("kernel rows must match distribution length");
        }
        let mut q = self.probs.dot(kernel);
        q.mapv_inplace(|v| v.max(0.0));
        let s = q.sum();
        Ok(Self { probs: q / s })
    }

    /// Total variation distance.
    pub fn tv(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return shape("length mismatch");
        }
        Ok(0.5 * (&self.probs - &other.probs).mapv(f64::abs).sum())
    }
}

/// Score-matching operator on a finite space:
/// `sum_y B[x,y] f(y)/f(x) - sum_y B[x,y] log f(y)`.
pub fn phi_discrete(b: &DiscreteGenerator, f: &[f64], x: usize) -> Result<f64> {
    let n = b.size();
    if f.len() != n {
        return shape(format!("f has length {}, space has {n} states", f.len()));
    }
    if x >= n {
        return domain(format!("state {x} out of range"));
    }
    if let Some(i) = f.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return domain(format!("f must be positive and finite, f[{i}] = {}", f[i]));
    }
    Ok(phi_unchecked(b.rates(), f, x))
}

/// Same as [`phi_discrete`] without validation. Written as
/// `sum_{y != x} B[x,y] (r - log r - 1)` with `r = f(y)/f(x)`, which is the
/// same quantity since rows of B sum to zero, and is nonnegative termwise.
pub(crate) fn phi_unchecked(b: &Array2<f64>, f: &[f64], x: usize) -> f64 {
    let fx = f[x];
    let mut acc = 0.0;
    for (y, &fy) in f.iter().enumerate() {
        if y == x {
            continue;
        }
        let bxy = b[[x, y]];
        if bxy == 0.0 {
            continue;
        }
        let r = fy / fx;
        acc += bxy * (r - r.ln() - 1.0);
    }
    acc
}

/// Kullback-Leibler divergence with the convention 0 log 0 = 0.
pub fn kl_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return shape("length mismatch");
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return domain(format!("q[{i}] = 0 where p[{i}] = {pi}"));
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

//! Matrix exponentials of generators and small dense helpers.

use crate::{Error, Result};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

pub fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Stationary distribution of an irreducible generator, or `None` if the
/// linear solve fails or produces a clearly negative entry. Round-off
/// negatives (below `1e-12` of the largest entry) are set to zero.
pub fn stationary(b: &Array2<f64>) -> Option<Array1<f64>> {
    let n = b.nrows();
    // Solve pi B = 0 with sum(pi) = 1 by replacing one equation.
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = b[[j, i]];
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    let top = sol.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(top > 0.0) || sol.iter().any(|&v| !(v >= -1e-12 * top)) {
        return None;
    }
    let pi = Array1::from_iter(sol.iter().map(|&v| v.max(0.0)));
    let z = pi.sum();
    Some(pi / z)
}

/// Relative tolerance for accepting detailed balance.
const REVERSIBLE_TOL: f64 = 1e-10;

/// Precomputed decomposition of a generator for repeated `exp(tau B)`.
#[derive(Clone, Debug)]
pub struct GeneratorExp {
    b: Array2<f64>,
    sym: Option<SymDecomp>,
}

#[derive(Clone, Debug)]
struct SymDecomp {
    sqrt_pi: Array1<f64>,
    evals: Array1<f64>,
    evecs: Array2<f64>,
}

impl GeneratorExp {
    pub fn new(b: &Array2<f64>) -> Self {
        Self { b: b.clone(), sym: symmetric_decomposition(b) }
    }

    /// True when the fast symmetric route is in use.
    pub fn is_reversible(&self) -> bool {
        self.sym.is_some()
    }

    /// Row-stochastic `exp(tau B)` with negative entries clipped and the
    /// clipped mass returned to the diagonal.
    pub fn kernel(&self, tau: f64) -> Result<Array2<f64>> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("exponent scale {tau} must be finite and >= 0")));
        }
        let lambda = (0..self.b.nrows()).map(|i| -self.b[[i, i]]).fold(0.0f64, f64::max);
        let raw = match &self.sym {
            _ if lambda * tau <= UNIFORMIZATION_MAX => uniformized(&self.b, lambda, tau),
            Some(d) => {
                let n = d.evals.len();
                let mut scaled = d.evecs.clone();
                for k in 0..n {
                    let e = (tau * d.evals[k]).exp();
                    scaled.column_mut(k).mapv_inplace(|v| v * e);
                }
                let mut m = scaled.dot(&d.evecs.t());
                for i in 0..n {
                    for j in 0..n {
                        m[[i, j]] *= d.sqrt_pi[j] / d.sqrt_pi[i];
                    }
                }
                m
            }
            None => {
                let m = to_dmatrix(&self.b) * tau;
                from_dmatrix(&m.exp())
            }
        };
        clean_stochastic(raw)
    }
}

fn symmetric_decomposition(b: &Array2<f64>) -> Option<SymDecomp> {
    let n = b.nrows();
    let pi = stationary(b)?;
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in (i + 1)..n {
            let lhs = pi[i] * b[[i, j]];
            let rhs = pi[j] * b[[j, i]];
            if (lhs - rhs).abs() > REVERSIBLE_TOL * scale * (pi[i] + pi[j]) {
                return None;
            }
        }
    }
    let sqrt_pi = pi.mapv(f64::sqrt);
    let sym = DMatrix::from_fn(n, n, |i, j| {
        let v = sqrt_pi[i] * b[[i, j]] / sqrt_pi[j];
        let w = sqrt_pi[j] * b[[j, i]] / sqrt_pi[i];
        0.5 * (v + w)
    });
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(SymDecomp {
        sqrt_pi,
        evals: Array1::from_iter(eig.eigenvalues.iter().copied()),
        evecs: from_dmatrix(&eig.eigenvectors),
    })
}

/// Deficit from clipping allowed before the result is rejected.
const CLIP_TOL: f64 = 1e-10;

/// Largest `lambda * tau` handled by uniformization.
const UNIFORMIZATION_MAX: f64 = 1.0;

/// `exp(tau B)` as a Poisson mixture of powers of `I + B / lambda`. Every
/// term is nonnegative, so entries of order `tau^k` keep full relative
/// precision where the eigenvector route would round them to zero.
fn uniformized(b: &Array2<f64>, lambda: f64, tau: f64) -> Array2<f64> {
    let n = b.nrows();
    if lambda == 0.0 || tau == 0.0 {
        return Array2::eye(n);
    }
    let p = Array2::eye(n) + b / lambda;
    let x = lambda * tau;
    let mut power = Array2::eye(n);
    let mut coef = (-x).exp();
    let mut out = &power * coef;
    for k in 1..200 {
        power = power.dot(&p);
        coef *= x / k as f64;
        out.scaled_add(coef, &power);
        let smallest = out.iter().filter(|&&v| v > 0.0).fold(f64::INFINITY, |m, &v| m.min(v));
        if k >= n && coef < 1e-20 * smallest {
            break;
        }
    }
    out
}

fn clean_stochastic(mut m: Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    for i in 0..n {
        let mut deficit = 0.0;
        for j in 0..n {
            let v = m[[i, j]];
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite matrix exponential".into()));
            }
            if v < 0.0 {
                deficit -= v;
                m[[i, j]] = 0.0;
            }
        }
        if deficit > CLIP_TOL {
            return Err(Error::Numerical(format!("clipped mass {deficit} in row {i}")));
        }
        let s: f64 = m.row(i).sum();
        m[[i, i]] += 1.0 - s;
        if m[[i, i]] < 0.0 {
            return Err(Error::Numerical(format!("row {i} could not be renormalized")));
        }
    }
    Ok(m)
}

/// One-shot `exp(tau B)` for a generator.
pub fn expm_generator(b: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    GeneratorExp::new(b).kernel(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn symmetric_and_fallback_agree() {
        // Reversible birth-death chain.
        let b = array![[-1.0, 1.0, 0.0], [0.5, -1.5, 1.0], [0.0, 2.0, -2.0]];
        let g = GeneratorExp::new(&b);
        assert!(g.is_reversible());
        let fast = g.kernel(0.7).unwrap();
        let slow = from_dmatrix(&(to_dmatrix(&b) * 0.7).exp());
        for (a, c) in fast.iter().zip(slow.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn nonreversible_uses_fallback() {
        let b = array![[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]];
        let g = GeneratorExp::new(&b);
        assert!(!g.is_reversible());
        let k = g.kernel(0.3).unwrap();
        for i in 0..3 {
            assert!((k.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_scale_keeps_distant_entries() {
        // Path graph: the corner entry of exp(tau B) is tau^3 (B^3)_{03} / 6 to leading order.
        let b = array![[-1.0, 1.0, 0.0, 0.0], [1.0, -2.0, 1.0, 0.0], [0.0, 1.0, -2.0, 1.0], [0.0, 0.0, 1.0, -1.0]];
        let g = GeneratorExp::new(&b);
        for tau in [1e-6, 1e-4, 1e-2] {
            let k = g.kernel(tau).unwrap();
            let lead = tau.powi(3) / 6.0;
            assert!((k[[0, 3]] / lead - 1.0).abs() < 10.0 * tau, "tau {tau}: {} vs {lead}", k[[0, 3]]);
        }
        let mid = g.kernel(0.4).unwrap();
        let reference = from_dmatrix(&(to_dmatrix(&b) * 0.4).exp());
        for (a, c) in mid.iter().zip(reference.iter()) {
            assert!((a - c).abs() < 1e-13);
        }
    }
}

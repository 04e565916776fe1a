//! Dirichlet laws and uniform Dirichlet mixtures.
//!
//! Densities are with respect to Lebesgue measure on the coordinates
//! `(p_1, ..., p_{N-1})`.

use crate::error::domain;
use crate::Result;
use rand::Rng;
use rand_distr::Gamma;
use statrs::function::gamma::ln_gamma;

/// Log Dirichlet density; `-inf` on the boundary where some `alpha_i > 1`
/// vanishes, `+inf` where some `alpha_i < 1` does.
pub fn dirichlet_log_pdf(alpha: &[f64], p: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let mut v = ln_gamma(a0) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    for (&a, &x) in alpha.iter().zip(p) {
        if a != 1.0 {
            v += (a - 1.0) * x.ln();
        }
    }
    v
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = alpha.iter().map(|&a| rng.sample(Gamma::new(a, 1.0).unwrap())).collect();
    let s: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= s;
    }
    g
}

/// Uniform mixture of Dirichlet laws.
#[derive(Clone, Debug)]
pub struct DirichletMixture {
    alphas: Vec<Vec<f64>>,
}

/// Log-density value together with a boundary flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    /// Set when `p` has a zero coordinate and some component has `alpha_i < 1`
    /// there; `value` is then `-inf` by convention.
    pub boundary: bool,
}

impl DirichletMixture {
    pub fn new(alphas: Vec<Vec<f64>>) -> Result<Self> {
        let n = match alphas.first() {
            Some(a) => a.len(),
            None => return domain("mixture needs at least one component"),
        };
        if n < 2 {
            return domain("Dirichlet dimension must be at least 2");
        }
        for a in &alphas {
            if a.len() != n {
                return domain("all components must have the same dimension");
            }
            if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return domain(format!("Dirichlet parameters must be positive, got {a:?}"));
            }
        }
        Ok(Self { alphas })
    }

    pub fn dim(&self) -> usize {
        self.alphas[0].len()
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn component_mean(&self, m: usize) -> Vec<f64> {
        let a = &self.alphas[m];
        let s: f64 = a.iter().sum();
        a.iter().map(|v| v / s).collect()
    }

    /// Draw from component `m`, or from a uniformly chosen one.
    pub fn sample<R: Rng + ?Sized>(&self, m: Option<usize>, rng: &mut R) -> Result<(Vec<f64>, usize)> {
        let m = match m {
            Some(m) if m >= self.len() => return domain(format!("component {m} out of range")),
            Some(m) => m,
            None => rng.gen_range(0..self.len()),
        };
        Ok((sample_dirichlet(&self.alphas[m], rng), m))
    }

    pub fn log_pdf(&self, p: &[f64]) -> Result<LogDensity> {
        if p.len() != self.dim() {
            return domain(format!("point of dimension {} for a {}-simplex mixture", p.len(), self.dim()));
        }
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return domain(format!("{p:?} is not on the simplex"));
        }
        let on_edge = |a: &[f64]| a.iter().zip(p).any(|(&ai, &x)| x == 0.0 && ai < 1.0);
        if self.alphas.iter().any(|a| on_edge(a)) {
            return Ok(LogDensity { value: f64::NEG_INFINITY, boundary: true });
        }
        let logs: Vec<f64> = self.alphas.iter().map(|a| dirichlet_log_pdf(a, p)).collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value = if mx == f64::NEG_INFINITY {
            mx
        } else {
            mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() - (self.len() as f64).ln()
        };
        Ok(LogDensity { value, boundary: false })
    }
}

//! The g-and-k distribution, defined through its quantile function.

use crate::{Error, Result};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GandKParams {
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub k: f64,
}

/// Fixed overall asymmetry constant of the family.
const C: f64 = 0.8;

impl GandKParams {
    pub fn new(a: f64, b: f64, g: f64, k: f64) -> Result<Self> {
        if !(b > 0.0) || !(k > -0.5) || ![a, b, g, k].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("invalid g-and-k parameters ({a}, {b}, {g}, {k})")));
        }
        Ok(Self { a, b, g, k })
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::Shape("g-and-k needs 4 parameters".into()));
        }
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.a, self.b, self.g, self.k]
    }

    /// Quantile at standard-normal quantile `z`.
    pub fn quantile_z(&self, z: f64) -> f64 {
        self.a + self.b * (1.0 + C * (self.g * z / 2.0).tanh()) * (1.0 + z * z).powf(self.k) * z
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn gandk_quantile(q: f64, p: &GandKParams) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    Ok(p.quantile_z(std_normal().inverse_cdf(q)))
}

/// `n` draws by inverse transform of uniforms.
pub fn gandk_sample<R: Rng + ?Sized>(p: &GandKParams, n: usize, rng: &mut R) -> Vec<f64> {
    let nd = std_normal();
    (0..n)
        .map(|_| {
            // Open interval so the quantile stays finite.
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            p.quantile_z(nd.inverse_cdf(u))
        })
        .collect()
}

/// `n` evenly spaced order statistics at ranks `floor((i + 1/2) N / n)`;
/// for `n = N` this is the full sorted sample.
pub fn summarize_observations(xi: &[f64], n: usize) -> Result<Vec<f64>> {
    let big_n = xi.len();
    if n > big_n {
        return Err(Error::Domain(format!("asked for {n} order statistics of {big_n} observations")));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    if xi.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN observation".into()));
    }
    let mut s = xi.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((0..n).map(|i| s[((2 * i + 1) * big_n) / (2 * n)]).collect())
}

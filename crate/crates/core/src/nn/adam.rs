//! Bias-corrected Adam with an optional cosine learning-rate schedule.

use super::tape::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Mat>,
    pub second_moment: Vec<Mat>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], learning_rate: f64) -> Self {
        Self {
            first_moment: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            second_moment: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first_moment[i].dim() {
                return Err(Error::Shape(format!("param {i}: {:?} vs grad {:?}", p.dim(), g.dim())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite gradient for param {i}")));
            }
        }
        self.step_count += 1;
        let k = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at iteration `k` of `total`.
pub fn cosine_lr(base: f64, k: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (k as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

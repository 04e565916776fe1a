//! Linear time rescaling shared by every forward process.

use crate::error::domain;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

/// Relative slack allowed when checking `t` against `[0, T]`.
const RANGE_SLACK: f64 = 1e-12;

impl RateSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return domain(format!("need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return domain(format!("horizon must be positive, got {horizon}"));
        }
        Ok(Self { beta_min, beta_max, horizon })
    }

    fn check(&self, t: f64) -> Result<()> {
        let slack = RANGE_SLACK * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return domain(format!("t = {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    /// beta(t), validated.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta(t))
    }

    /// Integral of beta over [0, t], validated.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.tau(t))
    }

    /// Unchecked beta(t) for inner loops.
    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
    }

    /// Unchecked integrated beta for inner loops.
    #[inline]
    pub fn tau(&self, t: f64) -> f64 {
        self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)
    }

    /// Truncation time near zero used by the continuous samplers.
    pub fn t_eps(&self) -> f64 {
        1e-3 * self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_schedule() -> RateSchedule {
        RateSchedule::new(0.001, 2.0, 1.0).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = default_schedule();
        assert_eq!(s.beta_at(0.0).unwrap(), 0.001);
        assert_eq!(s.beta_at(1.0).unwrap(), 2.0);
    }

    #[test]
    fn integrated_at_horizon() {
        let s = default_schedule();
        let v = s.integrated_beta(1.0).unwrap();
        assert!((v - 1.0005).abs() < 1e-15);
        // Simpson's rule on a linear integrand is exact.
        let n = 1000;
        let h = 1.0 / n as f64;
        let mut acc = s.beta(0.0) + s.beta(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * s.beta(i as f64 * h);
        }
        assert!((acc * h / 3.0 - 1.0005).abs() < 1e-12);
    }

    #[test]
    fn out_of_range() {
        let s = default_schedule();
        assert!(s.beta_at(-0.1).is_err());
        assert!(s.beta_at(1.1).is_err());
        assert!(s.integrated_beta(f64::NAN).is_err());
        assert!(RateSchedule::new(0.0, 1.0, 1.0).is_err());
        assert!(RateSchedule::new(2.0, 1.0, 1.0).is_err());
        assert!(RateSchedule::new(1.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_matches_trapezoid(
            bmin in 1e-3f64..2.0, span in 0.0f64..20.0, horizon in 0.1f64..5.0,
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let s = RateSchedule::new(bmin, bmin + span, horizon).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (t0, t1) = (lo * horizon, hi * horizon);
            prop_assert!(s.beta(t0) <= s.beta(t1));
            if t1 > t0 {
                prop_assert!(s.tau(t0) < s.tau(t1));
            }
            // Trapezoid quadrature is exact for a linear integrand up to rounding.
            let n = 64;
            let h = t1 / n as f64;
            let mut acc = 0.5 * (s.beta(0.0) + s.beta(t1));
            for i in 1..n {
                acc += s.beta(i as f64 * h);
            }
            prop_assert!((acc * h - s.tau(t1)).abs() <= 1e-10 * (1.0 + s.tau(t1)));
        }
    }
}

use super::rotation::{norm3, uniform_axis, Rotation};
use crate::error::domain;
use crate::Result;
use rand::Rng;
use std::f64::consts::PI;

/// Below this diffusion time the closed-form small-time density is used.
pub const SMALL_TIME_THRESHOLD: f64 = 1.0;
/// Tail bound required of the truncated series.
pub const SERIES_TAIL: f64 = 1e-8;
/// Distance from `0` or `pi` where the score falls back to a nearby angle.
pub const SCORE_EDGE: f64 = 1e-6;
/// Grid size of the inverse-transform angle tables.
pub const ANGLE_GRID: usize = 4096;

/// How the score is computed below [`SMALL_TIME_THRESHOLD`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmallTimeScore {
    /// Exact log-derivative of the small-time density.
    ClosedForm,
    /// `log_x(x_0) / t`.
    Varadhan,
}

/// Heat kernel of Brownian motion on SO(3) at diffusion time `t`, as a
/// function of the angle between the two rotations.
#[derive(Clone, Debug)]
pub struct IGSO3Kernel {
    t: f64,
    l_max: usize,
    small_time_threshold: f64,
    small_score: SmallTimeScore,
}

/// Smallest `l` with `(2l + 3) exp(-l(l+1) t / 2) <= tail`, at least 5.
pub fn series_cutoff(t: f64, tail: f64) -> usize {
    let mut l = 5;
    while (2.0 * l as f64 + 3.0) * (-((l * (l + 1)) as f64) * t / 2.0).exp() > tail {
        l += 1;
    }
    l
}

/// `1/a - cot(a/2)/2` without cancellation.
fn inv_minus_half_cot(a: f64) -> f64 {
    if a < 1e-2 {
        let a2 = a * a;
        a / 12.0 + a * a2 / 720.0 + a * a2 * a2 / 30240.0
    } else {
        1.0 / a - 0.5 / (a / 2.0).tan()
    }
}

impl IGSO3Kernel {
    pub fn new(t: f64) -> Result<Self> {
        Self::with_threshold(t, SMALL_TIME_THRESHOLD)
    }

    pub fn with_threshold(t: f64, threshold: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!("diffusion time must be positive, got {t}"));
        }
        let l_max = series_cutoff(t.max(threshold), SERIES_TAIL);
        Ok(Self { t, l_max, small_time_threshold: threshold, small_score: SmallTimeScore::ClosedForm })
    }

    pub fn with_small_time_score(mut self, s: SmallTimeScore) -> Self {
        self.small_score = s;
        self
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn uses_series(&self) -> bool {
        self.t >= self.small_time_threshold
    }

    fn coeff(&self, l: usize) -> f64 {
        (2 * l + 1) as f64 * (-((l * (l + 1)) as f64) * self.t / 2.0).exp()
    }

    /// Series density of the angle.
    pub fn series_density(&self, alpha: f64) -> f64 {
        // (1 - cos a)/sin(a/2) = 2 sin(a/2), so no division is needed.
        let s: f64 = (0..=self.l_max).map(|l| self.coeff(l) * ((l as f64 + 0.5) * alpha).sin()).sum();
        2.0 * (alpha / 2.0).sin() / PI * s
    }

    /// Closed-form small-time density of the angle.
    pub fn small_time_density(&self, alpha: f64) -> f64 {
        let t = self.t;
        let g = alpha * (-alpha * alpha / (2.0 * t)).exp()
            - (alpha - 2.0 * PI) * (-(alpha - 2.0 * PI).powi(2) / (2.0 * t)).exp()
            - (alpha + 2.0 * PI) * (-(alpha + 2.0 * PI).powi(2) / (2.0 * t)).exp();
        (alpha / 2.0).sin() / PI.sqrt() * (t / 2.0).powf(-1.5) * (t / 8.0).exp() * g
    }

    /// Density of the angle on `[0, pi]`.
    pub fn density(&self, alpha: f64) -> f64 {
        if self.uses_series() {
            self.series_density(alpha)
        } else {
            self.small_time_density(alpha)
        }
    }

    /// Density relative to the Haar measure.
    pub fn haar_density(&self, alpha: f64) -> f64 {
        let w = (1.0 - alpha.cos()) / PI;
        if w > 0.0 {
            self.density(alpha) / w
        } else {
            // Limit at the identity for the series; the closed form is only
            // evaluated away from zero by callers.
            (0..=self.l_max).map(|l| self.coeff(l) * (2 * l + 1) as f64).sum()
        }
    }

    /// `d/da log` of the Haar density.
    pub fn log_density_derivative(&self, alpha: f64) -> f64 {
        if self.uses_series() {
            // chi_l(a) = 1 + 2 sum_{k<=l} cos(k a) avoids the 0/0 at a = 0.
            let (mut h, mut dh) = (0.0, 0.0);
            for l in 0..=self.l_max {
                let c = self.coeff(l);
                let (mut chi, mut dchi) = (1.0, 0.0);
                for k in 1..=l {
                    let (s, co) = (k as f64 * alpha).sin_cos();
                    chi += 2.0 * co;
                    dchi -= 2.0 * k as f64 * s;
                }
                h += c * chi;
                dh += c * dchi;
            }
            return dh / h;
        }
        let t = self.t;
        if self.small_score == SmallTimeScore::Varadhan {
            return -alpha / t;
        }
        // h = C e^{-a^2/2t} G(a) / sin(a/2) with
        // G = a - (a - 2pi) E1 - (a + 2pi) E2.
        let e1 = (2.0 * PI * (alpha - PI) / t).exp();
        let e2 = (-2.0 * PI * (alpha + PI) / t).exp();
        let g = alpha - (alpha - 2.0 * PI) * e1 - (alpha + 2.0 * PI) * e2;
        // a G' - G, expanded so that the leading terms cancel exactly.
        let agp_minus_g = -2.0 * PI * e1 * (1.0 + alpha * (alpha - 2.0 * PI) / t)
            + 2.0 * PI * e2 * (1.0 + alpha * (alpha + 2.0 * PI) / t);
        let g_over = if alpha > 0.0 { agp_minus_g / (alpha * g) } else { 0.0 };
        -alpha / t + g_over + inv_minus_half_cot(alpha)
    }

    /// Log Haar density of `x_t` given `x_0`.
    pub fn log_density(&self, xt: &Rotation, x0: &Rotation) -> f64 {
        self.haar_density(xt.distance(x0)).ln()
    }

    /// Score of `log q(x_t | x_0)` in tangent coefficients at `x_t`.
    pub fn score(&self, xt: &Rotation, x0: &Rotation) -> ScoreOutput {
        let v = xt.log_at(x0);
        let a = norm3(v);
        if a == 0.0 {
            return ScoreOutput { tangent: [0.0; 3], fallback: true };
        }
        let (eval_at, fallback) = if a < SCORE_EDGE {
            (SCORE_EDGE, true)
        } else if a > PI - SCORE_EDGE {
            (PI - SCORE_EDGE, true)
        } else {
            (a, false)
        };
        // Near zero the derivative is linear in the angle, so scale by eval_at.
        let slope = self.log_density_derivative(eval_at) / eval_at;
        ScoreOutput { tangent: v.map(|c| -slope * c), fallback }
    }

    /// Inverse-transform table for this kernel.
    pub fn angle_table(&self) -> AngleTable {
        AngleTable::new(self)
    }
}

/// Score value with a flag set when an edge fallback was used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOutput {
    pub tangent: [f64; 3],
    pub fallback: bool,
}

pub fn heat_kernel_score(xt: &Rotation, x0: &Rotation, t: f64) -> Result<ScoreOutput> {
    Ok(IGSO3Kernel::new(t)?.score(xt, x0))
}

/// Monotone CDF of the angle on a uniform grid over `[0, pi]`.
#[derive(Clone, Debug)]
pub struct AngleTable {
    cdf: Vec<f64>,
}

impl AngleTable {
    pub fn new(kernel: &IGSO3Kernel) -> Self {
        let h = PI / ANGLE_GRID as f64;
        let f: Vec<f64> = (0..=ANGLE_GRID).map(|i| kernel.density(i as f64 * h).max(0.0)).collect();
        let mut cdf = vec![0.0; ANGLE_GRID + 1];
        for i in 1..=ANGLE_GRID {
            cdf[i] = cdf[i - 1] + 0.5 * h * (f[i - 1] + f[i]);
        }
        let z = cdf[ANGLE_GRID];
        cdf.iter_mut().for_each(|c| *c /= z);
        Self { cdf }
    }

    /// CDF at `alpha`, linear between nodes.
    pub fn cdf(&self, alpha: f64) -> f64 {
        let x = (alpha / PI * ANGLE_GRID as f64).clamp(0.0, ANGLE_GRID as f64);
        let i = (x.floor() as usize).min(ANGLE_GRID - 1);
        let w = x - i as f64;
        self.cdf[i] * (1.0 - w) + self.cdf[i + 1] * w
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, ANGLE_GRID);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        (i as f64 - 1.0 + w.clamp(0.0, 1.0)) * PI / ANGLE_GRID as f64
    }

    /// `R x_0` with uniform axis and tabulated angle.
    pub fn sample<R: Rng + ?Sized>(&self, center: &Rotation, rng: &mut R) -> Rotation {
        let axis = uniform_axis(rng);
        let a = self.quantile(rng.gen());
        Rotation::exp(axis.map(|c| c * a)).compose(center)
    }
}

pub fn sample_igso3<R: Rng + ?Sized>(kernel: &IGSO3Kernel, center: &Rotation, rng: &mut R) -> Rotation {
    kernel.angle_table().sample(center, rng)
}

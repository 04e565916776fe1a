use crate::error::domain;
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// Unit quaternion `(w, x, y, z)` with `w >= 0`.
///
/// The matrix of `(cos(a/2), sin(a/2) v)` is `I + sin(a) V + (1 - cos(a)) V^2`
/// with `V = [[0, z, -y], [-z, 0, x], [y, -x, 0]]`. This is the transpose of
/// the usual right-handed convention, so the matrix product `A B` corresponds
/// to the quaternion product `q_B q_A`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: [f64; 4],
}

pub type Mat3 = [[f64; 3]; 3];

fn qmul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Skew matrix `V` of `v` in the sign convention above.
pub fn skew(v: [f64; 3]) -> Mat3 {
    [[0.0, v[2], -v[1]], [-v[2], 0.0, v[0]], [v[1], -v[0], 0.0]]
}

/// Inverse of [`skew`] applied to the skew part of `m`.
pub fn unskew(m: &Mat3) -> [f64; 3] {
    [(m[1][2] - m[2][1]) / 2.0, (m[2][0] - m[0][2]) / 2.0, (m[0][1] - m[1][0]) / 2.0]
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl Rotation {
    pub fn identity() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0] }
    }

    /// Normalize and canonicalize; errors on a zero or non-finite input.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return domain(format!("cannot normalize quaternion {q:?}"));
        }
        Ok(Self::canonical(q.map(|v| v / n)))
    }

    fn canonical(q: [f64; 4]) -> Self {
        if q[0] < 0.0 {
            Self { q: q.map(|v| -v) }
        } else {
            Self { q }
        }
    }

    fn renormalized(q: [f64; 4]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::canonical(q.map(|v| v / n))
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    pub fn from_axis_angle(axis: [f64; 3], alpha: f64) -> Result<Self> {
        if (norm3(axis) - 1.0).abs() > 1e-9 {
            return domain(format!("axis {axis:?} is not a unit vector"));
        }
        if !(0.0..=std::f64::consts::PI).contains(&alpha) {
            return domain(format!("angle {alpha} outside [0, pi]"));
        }
        let (s, c) = (alpha / 2.0).sin_cos();
        Ok(Self::renormalized([c, s * axis[0], s * axis[1], s * axis[2]]))
    }

    /// Axis and angle in `[0, pi]`; the axis is `(1, 0, 0)` for the identity.
    pub fn to_axis_angle(&self) -> ([f64; 3], f64) {
        let v = [self.q[1], self.q[2], self.q[3]];
        let s = norm3(v);
        if s == 0.0 {
            return ([1.0, 0.0, 0.0], 0.0);
        }
        (v.map(|c| c / s), 2.0 * s.atan2(self.q[0]))
    }

    pub fn matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.q;
        // Transpose of the standard quaternion-to-matrix map.
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)],
            [2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)],
            [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Row-major matrix entries, used as network features.
    pub fn features(&self) -> [f64; 9] {
        let m = self.matrix();
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::renormalized(qmul(other.q, self.q))
    }

    pub fn inverse(&self) -> Rotation {
        Self::canonical([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
    }

    /// Group exponential of tangent coefficients `omega` (angle `|omega|`).
    pub fn exp(omega: [f64; 3]) -> Rotation {
        let a = norm3(omega);
        if a < 1e-300 {
            return Self::identity();
        }
        let (s, c) = (a / 2.0).sin_cos();
        Self::renormalized([c, s * omega[0] / a, s * omega[1] / a, s * omega[2] / a])
    }

    /// Inverse of [`Rotation::exp`] with angle in `[0, pi]`.
    pub fn log(&self) -> [f64; 3] {
        let (axis, a) = self.to_axis_angle();
        axis.map(|v| v * a)
    }

    /// `self * exp(omega)`.
    pub fn exp_at(&self, omega: [f64; 3]) -> Rotation {
        self.compose(&Self::exp(omega))
    }

    /// Tangent coefficients at `self` of the geodesic towards `other`.
    pub fn log_at(&self, other: &Rotation) -> [f64; 3] {
        self.inverse().compose(other).log()
    }

    pub fn angle(&self) -> f64 {
        2.0 * norm3([self.q[1], self.q[2], self.q[3]]).atan2(self.q[0])
    }

    /// Geodesic distance, the angle of `self^-1 other`.
    pub fn distance(&self, other: &Rotation) -> f64 {
        // |<q1, q2>| = cos(alpha / 2).
        let d: f64 = self.q.iter().zip(other.q).map(|(a, b)| a * b).sum::<f64>().abs().min(1.0);
        let s = {
            let r = qmul([self.q[0], -self.q[1], -self.q[2], -self.q[3]], other.q);
            norm3([r[1], r[2], r[3]])
        };
        2.0 * s.atan2(d)
    }

    /// Haar-uniform draw via a normalized Gaussian 4-vector.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
        loop {
            let q = [0; 4].map(|_| rng.sample::<f64, _>(StandardNormal));
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-20 {
                return Self::renormalized(q);
            }
        }
    }

    pub fn quat_norm(&self) -> f64 {
        self.q.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Uniform direction on the unit sphere.
pub fn uniform_axis<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal));
        let n = norm3(v);
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

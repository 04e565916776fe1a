//! Diffusion models on the rotation group.

mod kernel;
mod rotation;

pub use kernel::{
    heat_kernel_score, sample_igso3, series_cutoff, AngleTable, IGSO3Kernel, ScoreOutput, SmallTimeScore, ANGLE_GRID,
    SCORE_EDGE, SERIES_TAIL, SMALL_TIME_THRESHOLD,
};
pub use rotation::{matmul3, norm3, skew, uniform_axis, unskew, Mat3, Rotation};

use crate::error::domain;
use crate::euclidean::DsmWeighting;
use crate::nn::{Mat, ParamVars, ScoreNet, Tape, Var};
use crate::schedule::RateSchedule;
use crate::{Error, Result, RngStream};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};

/// Number of quantized training times.
pub const TIME_GRID: usize = 256;

pub fn rotation_from_axis_angle(axis: [f64; 3], alpha: f64) -> Result<Rotation> {
    Rotation::from_axis_angle(axis, alpha)
}

/// Kernels and angle tables on a uniform grid of `TIME_GRID` times in
/// `[t_eps, T]`.
#[derive(Clone, Debug)]
pub struct IGSO3Cache {
    pub schedule: RateSchedule,
    times: Vec<f64>,
    kernels: Vec<IGSO3Kernel>,
    tables: Vec<AngleTable>,
}

impl IGSO3Cache {
    pub fn new(schedule: RateSchedule) -> Result<Self> {
        let (lo, hi) = (schedule.t_eps(), schedule.horizon);
        let times: Vec<f64> = (0..TIME_GRID).map(|i| lo + (hi - lo) * i as f64 / (TIME_GRID - 1) as f64).collect();
        let kernels = times.iter().map(|&t| IGSO3Kernel::new(schedule.tau(t))).collect::<Result<Vec<_>>>()?;
        let tables = kernels.iter().map(AngleTable::new).collect();
        Ok(Self { schedule, times, kernels, tables })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kernel(&self, i: usize) -> &IGSO3Kernel {
        &self.kernels[i]
    }

    pub fn table(&self, i: usize) -> &AngleTable {
        &self.tables[i]
    }
}

/// Output scale `sqrt(1 - exp(-tau))` applied to network scores.
pub fn score_scale(schedule: &RateSchedule, t: f64) -> f64 {
    (-(-schedule.tau(t)).exp_m1()).sqrt()
}

/// Training tuples with their score targets.
#[derive(Clone, Debug)]
pub struct So3Batch {
    pub x0: Vec<Rotation>,
    pub cond: Option<Mat>,
    pub t: Vec<f64>,
    pub xt: Vec<Rotation>,
    pub target: Vec<[f64; 3]>,
    /// Targets that used an edge fallback.
    pub fallbacks: usize,
}

impl So3Batch {
    /// Times drawn uniformly from the cache grid.
    pub fn sample(x0: Vec<Rotation>, cond: Option<Mat>, cache: &IGSO3Cache, rng: &mut RngStream) -> Self {
        let mut t = Vec::with_capacity(x0.len());
        let mut xt = Vec::with_capacity(x0.len());
        let mut target = Vec::with_capacity(x0.len());
        let mut fallbacks = 0;
        for c in &x0 {
            let i = rng.gen_range(0..TIME_GRID);
            let x = cache.table(i).sample(c, rng);
            let s = cache.kernel(i).score(&x, c);
            fallbacks += s.fallback as usize;
            t.push(cache.times()[i]);
            xt.push(x);
            target.push(s.tangent);
        }
        Self { x0, cond, t, xt, target, fallbacks }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn weights(&self, schedule: &RateSchedule, w: DsmWeighting) -> Vec<f64> {
        self.t
            .iter()
            .map(|&t| match w {
                DsmWeighting::Uniform => 1.0,
                DsmWeighting::Variance => score_scale(schedule, t).powi(2),
            })
            .collect()
    }
}

pub fn features(xs: &[Rotation]) -> Mat {
    let mut m = Mat::zeros((xs.len(), 9));
    for (i, x) in xs.iter().enumerate() {
        for (j, v) in x.features().into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Score field on SO(3), evaluated for many points at one time.
pub trait So3Score {
    fn score_batch(&self, xs: &[Rotation], t: f64, cond: Option<&[f64]>) -> Result<Vec<[f64; 3]>>;
}

/// Network score: 9 matrix entries in, 3 tangent coefficients out, divided
/// by [`score_scale`].
pub struct NetSo3Score<'a> {
    pub net: &'a ScoreNet,
    pub schedule: RateSchedule,
}

impl NetSo3Score<'_> {
    pub fn check(&self) -> Result<()> {
        let a = self.net.arch();
        if a.in_dim != 9 || a.out_dim != 3 {
            return Err(Error::Shape("SO(3) score net must map 9 -> 3".into()));
        }
        Ok(())
    }
}

impl So3Score for NetSo3Score<'_> {
    fn score_batch(&self, xs: &[Rotation], t: f64, cond: Option<&[f64]>) -> Result<Vec<[f64; 3]>> {
        self.check()?;
        let c = cond.map(|c| Mat::from_shape_fn((xs.len(), c.len()), |(_, j)| c[j]));
        let out = self.net.forward(&features(xs), &vec![t; xs.len()], c.as_ref())?;
        let k = 1.0 / score_scale(&self.schedule, t);
        Ok(out.rows().into_iter().map(|r| [r[0] * k, r[1] * k, r[2] * k]).collect())
    }
}

/// Score given by a closure of `(x, t)`.
pub struct FnSo3Score<F: Fn(&Rotation, f64) -> [f64; 3]>(pub F);

impl<F: Fn(&Rotation, f64) -> [f64; 3]> So3Score for FnSo3Score<F> {
    fn score_batch(&self, xs: &[Rotation], t: f64, _cond: Option<&[f64]>) -> Result<Vec<[f64; 3]>> {
        Ok(xs.iter().map(|x| (self.0)(x, t)).collect())
    }
}

/// `1/2 mean w |target - s_theta|^2` for given predictions.
pub fn so3_dsm_loss_from_scores(
    pred: &[[f64; 3]],
    batch: &So3Batch,
    schedule: &RateSchedule,
    w: DsmWeighting,
) -> Result<f64> {
    if pred.len() != batch.len() {
        return Err(Error::Shape("one prediction per tuple required".into()));
    }
    let wts = batch.weights(schedule, w);
    let mut acc = 0.0;
    for i in 0..batch.len() {
        let r: f64 = (0..3).map(|k| (pred[i][k] - batch.target[i][k]).powi(2)).sum();
        acc += wts[i] * r;
    }
    let loss = 0.5 * acc / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite SO(3) loss".into()));
    }
    Ok(loss)
}

pub fn so3_dsm_loss(model: &NetSo3Score, batch: &So3Batch, w: DsmWeighting) -> Result<f64> {
    model.check()?;
    let out = model.net.forward(&features(&batch.xt), &batch.t, batch.cond.as_ref())?;
    let pred: Vec<[f64; 3]> = out
        .rows()
        .into_iter()
        .zip(&batch.t)
        .map(|(r, &t)| {
            let k = 1.0 / score_scale(&model.schedule, t);
            [r[0] * k, r[1] * k, r[2] * k]
        })
        .collect();
    so3_dsm_loss_from_scores(&pred, batch, &model.schedule, w)
}

pub fn so3_dsm_loss_tape(
    model: &NetSo3Score,
    batch: &So3Batch,
    w: DsmWeighting,
    tape: &mut Tape,
    pv: &ParamVars,
) -> Result<Var> {
    model.check()?;
    let n = batch.len();
    let x = tape.constant(features(&batch.xt));
    let cond = batch.cond.clone().map(|c| tape.constant(c));
    let out = model.net.forward_tape(tape, pv, x, &batch.t, cond)?;
    let scale = Mat::from_shape_fn((n, 1), |(i, _)| 1.0 / score_scale(&model.schedule, batch.t[i]));
    let pred = tape.mul_const(out, scale)?;
    let neg = Mat::from_shape_fn((n, 3), |(i, k)| -batch.target[i][k]);
    let r = tape.add_const(pred, &neg)?;
    let r2 = tape.square(r);
    let rs = tape.row_sum(r2);
    let wts = Mat::from_shape_vec((n, 1), batch.weights(&model.schedule, w)).unwrap();
    let wr = tape.mul_const(rs, wts)?;
    let s = tape.sum_all(wr);
    Ok(tape.scale(s, 0.5 / n as f64))
}

pub fn so3_dsm_loss_gradient(model: &NetSo3Score, batch: &So3Batch, w: DsmWeighting) -> Result<(f64, Vec<Mat>)> {
    model.net.loss_gradient(|tape, pv| so3_dsm_loss_tape(model, batch, w, tape, pv))
}

/// Geodesic random walk over the reverse clock from `T` to `t_eps`, started
/// from the uniform law.
pub fn geodesic_random_walk_reverse(
    model: &dyn So3Score,
    cond: Option<&[f64]>,
    schedule: &RateSchedule,
    n_steps: usize,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<Rotation>> {
    if n_steps == 0 {
        return domain("n_steps must be >= 1");
    }
    let mut xs: Vec<Rotation> = (0..n_samples).map(|_| Rotation::uniform(rng)).collect();
    let t_end = schedule.t_eps();
    let h = (schedule.horizon - t_end) / n_steps as f64;
    for k in 0..n_steps {
        let t = schedule.horizon - k as f64 * h;
        let beta = schedule.beta(t);
        let s = model.score_batch(&xs, t, cond)?;
        let sd = (beta * h).sqrt();
        for (x, sv) in xs.iter_mut().zip(&s) {
            let mut d = [0.0; 3];
            for j in 0..3 {
                d[j] = beta * sv[j] * h + sd * rng.sample::<f64, _>(StandardNormal);
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteStep { step: k, what: "tangent update".into() });
            }
            *x = x.exp_at(d);
        }
    }
    Ok(xs)
}

/// Mixture of wrapped normals with uniform component weights.
#[derive(Clone, Debug)]
pub struct WrappedNormalMixture {
    pub means: Vec<Rotation>,
    pub sigmas: Vec<f64>,
}

impl WrappedNormalMixture {
    pub fn new(means: Vec<Rotation>, sigmas: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != sigmas.len() {
            return domain("need equal, nonzero numbers of means and sigmas");
        }
        if sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return domain("sigmas must be finite and nonnegative");
        }
        Ok(Self { means, sigmas })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Draw from component `m`, or from a uniformly chosen one.
    pub fn sample<R: Rng + ?Sized>(&self, m: Option<usize>, rng: &mut R) -> Result<(Rotation, usize)> {
        let m = match m {
            Some(m) if m >= self.len() => return domain(format!("component {m} out of range")),
            Some(m) => m,
            None => rng.gen_range(0..self.len()),
        };
        let sigma = self.sigmas[m];
        if sigma == 0.0 {
            return Ok((self.means[m], m));
        }
        let nd = Normal::new(0.0, sigma).unwrap();
        let mut w = [[0.0; 3]; 3];
        for row in w.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(nd);
            }
        }
        let v = unskew(&w);
        Ok((self.means[m].exp_at(v), m))
    }

    /// Index of the nearest mean.
    pub fn nearest(&self, x: &Rotation) -> (usize, f64) {
        self.means.iter().enumerate().map(|(i, m)| (i, m.distance(x))).fold((0, f64::INFINITY), |a, b| {
            if b.1 < a.1 {
                b
            } else {
                a
            }
        })
    }
}

pub fn wrapped_normal_mixture_sample<R: Rng + ?Sized>(
    means: &[Rotation],
    sigmas: &[f64],
    m: Option<usize>,
    rng: &mut R,
) -> Result<(Rotation, usize)> {
    WrappedNormalMixture::new(means.to_vec(), sigmas.to_vec())?.sample(m, rng)
}

/// Chordal mean: the principal eigenvector of `sum q q^T` over quaternions.
pub fn rotation_mean(xs: &[Rotation]) -> Result<Rotation> {
    if xs.is_empty() {
        return domain("mean of no rotations");
    }
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    for x in xs {
        let q = nalgebra::Vector4::from(x.quaternion());
        m += q * q.transpose();
    }
    let e = m.symmetric_eigen();
    let i = e.eigenvalues.imax();
    let v = e.eigenvectors.column(i);
    Rotation::from_quaternion([v[0], v[1], v[2], v[3]])
}

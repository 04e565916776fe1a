//! Oracles shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use dmm_core::nn::{Arch, Mat, ScoreNet, Tape, Var};
use dmm_core::so3::{uniform_axis, IGSO3Kernel, Rotation, SmallTimeScore};
use dmm_core::RngStream;
use rand::Rng;
use std::f64::consts::PI;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared on an absolute scale.
pub const FD_REL_FLOOR: f64 = 1e-3;

pub fn random_mat(r: usize, c: usize, rng: &mut RngStream) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// A random net of 2-3 linear layers with widths 4-32, sometimes conditional.
pub fn random_net(rng: &mut RngStream) -> ScoreNet {
    let n_hidden = rng.gen_range(1..=2);
    let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.gen_range(4..=32)).collect();
    let in_dim = rng.gen_range(2..=4);
    let out_dim = rng.gen_range(2..=4);
    let temb = [0, 4, 8][rng.gen_range(0..3)];
    let mut arch = Arch::new(in_dim, out_dim, hidden, temb).with_time_scale(3.0);
    if rng.gen_bool(0.5) {
        arch = arch.with_cond(rng.gen_range(1..=3), rng.gen_range(2..=6));
    }
    ScoreNet::init(arch, rng).unwrap()
}

pub struct GradProblem {
    pub x: Mat,
    pub t: Vec<f64>,
    pub cond: Option<Mat>,
    pub dir: Mat,
    pub target: Mat,
}

pub fn random_problem(net: &ScoreNet, rng: &mut RngStream) -> GradProblem {
    let a = net.arch();
    let n = rng.gen_range(2..=6);
    GradProblem {
        x: random_mat(n, a.in_dim, rng),
        t: (0..n).map(|_| rng.gen::<f64>()).collect(),
        cond: (a.cond_dim > 0).then(|| random_mat(n, a.cond_dim, rng)),
        dir: random_mat(n, a.in_dim, rng),
        target: random_mat(n, a.out_dim, rng),
    }
}

/// A loss touching every tape operation the crate's objectives use:
/// squared residual, input-directional derivative, log-softmax and a floored log.
pub fn composite_loss(
    net: &ScoreNet,
    p: &GradProblem,
    tape: &mut Tape,
    pv: &dmm_core::nn::ParamVars,
) -> dmm_core::Result<Var> {
    let x = tape.constant(p.x.clone());
    let cond = p.cond.clone().map(|c| tape.constant(c));
    let (out, tans) = net.forward_jvp_tape(tape, pv, x, &[p.dir.clone()], &p.t, cond)?;
    let target = tape.constant(p.target.clone());
    let r = tape.sub(out, target)?;
    let r2 = tape.square(r);
    let l1 = tape.mean_all(r2);
    let j2 = tape.square(tans[0]);
    let l2 = tape.mean_all(j2);
    let lsm = tape.log_softmax_blocks(out, net.arch().out_dim)?;
    let w = tape.mul_const(lsm, p.target.clone())?;
    let l3 = tape.mean_all(w);
    let e = tape.exp(lsm);
    let rs = tape.row_sum(e);
    let lg = tape.log_floor(rs, 1e-12);
    let l4 = tape.mean_all(lg);
    let s = tape.add(l1, l2)?;
    let s = tape.add(s, l3)?;
    let s = tape.add(s, l4)?;
    Ok(tape.scale(s, 0.5))
}

pub fn loss_value(net: &ScoreNet, p: &GradProblem) -> f64 {
    let mut tape = Tape::new();
    let pv = net.bind(&mut tape);
    let v = composite_loss(net, p, &mut tape, &pv).unwrap();
    tape.scalar(v)
}

/// Max relative error between autodiff and central differences over up to
/// `max_entries` parameter entries of one random net.
pub fn gradcheck_one(seed: u64, max_entries: usize) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let net = random_net(&mut rng);
    let prob = random_problem(&net, &mut rng);
    let (_, grads) = net.loss_gradient(|tape, pv| composite_loss(&net, &prob, tape, pv)).unwrap();
    let total = net.n_params();
    let stride = (total / max_entries).max(1);
    let mut worst = 0.0f64;
    let mut flat = 0usize;
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            flat += 1;
            if flat % stride != 0 {
                continue;
            }
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = net.clone();
            plus.params_mut()[pi][[r, c]] += FD_STEP;
            let mut minus = net.clone();
            minus.params_mut()[pi][[r, c]] -= FD_STEP;
            let fd = (loss_value(&plus, &prob) - loss_value(&minus, &prob)) / (2.0 * FD_STEP);
            let ad = g[[r, c]];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(FD_REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Forward Wright-Fisher Euler-Maruyama over integrated time `tau`, with the
/// same clamp-and-renormalize projection as the reverse sampler.
pub fn wf_forward_em(p0: &[f64], theta: &[f64], tau: f64, n_steps: usize, rng: &mut RngStream) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let d = p0.len();
    let tot: f64 = theta.iter().sum();
    let h = tau / n_steps as f64;
    let sd = h.sqrt();
    let mut p = p0.to_vec();
    let mut z = vec![0.0; d];
    for _ in 0..n_steps {
        let mut w = 0.0;
        for j in 0..d {
            z[j] = p[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
            w += z[j];
        }
        let mut s = 0.0;
        for j in 0..d {
            let b = 0.5 * theta[j] - 0.5 * p[j] * tot;
            p[j] = (p[j] + b * h + sd * (z[j] - p[j] * w)).clamp(1e-6, 1.0);
            s += p[j];
        }
        for v in p.iter_mut() {
            *v /= s;
        }
    }
    p
}

/// Exact mean and second-moment matrix of the forward Wright-Fisher law at
/// integrated time `tau`, from the closed moment equations (RK4).
pub fn wf_moments(p0: &[f64], theta: &[f64], tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = p0.len();
    let tot: f64 = theta.iter().sum();
    let rhs = |m: &[f64], mm: &[Vec<f64>]| {
        let dm: Vec<f64> = (0..d).map(|i| 0.5 * theta[i] - 0.5 * tot * m[i]).collect();
        let dmm: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diag = if i == j { m[i] } else { 0.0 };
                        diag + 0.5 * theta[i] * m[j] + 0.5 * theta[j] * m[i] - (1.0 + tot) * mm[i][j]
                    })
                    .collect()
            })
            .collect();
        (dm, dmm)
    };
    let mut m = p0.to_vec();
    let mut mm: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| p0[i] * p0[j]).collect()).collect();
    let n = 4000;
    let h = tau / n as f64;
    let axpy = |m: &[f64], mm: &[Vec<f64>], k: &(Vec<f64>, Vec<Vec<f64>>), c: f64| {
        let a: Vec<f64> = m.iter().zip(&k.0).map(|(x, y)| x + c * y).collect();
        let b: Vec<Vec<f64>> =
            mm.iter().zip(&k.1).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + c * y).collect()).collect();
        (a, b)
    };
    for _ in 0..n {
        let k1 = rhs(&m, &mm);
        let s2 = axpy(&m, &mm, &k1, h / 2.0);
        let k2 = rhs(&s2.0, &s2.1);
        let s3 = axpy(&m, &mm, &k2, h / 2.0);
        let k3 = rhs(&s3.0, &s3.1);
        let s4 = axpy(&m, &mm, &k3, h);
        let k4 = rhs(&s4.0, &s4.1);
        for i in 0..d {
            m[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
            for j in 0..d {
                mm[i][j] += h / 6.0 * (k1.1[i][j] + 2.0 * k2.1[i][j] + 2.0 * k3.1[i][j] + k4.1[i][j]);
            }
        }
    }
    (m, mm)
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// CDF of the angle by fine cumulative Simpson integration of the density.
pub fn cdf_oracle(k: &IGSO3Kernel) -> impl Fn(f64) -> f64 {
    let n = 100_000;
    let h = PI / n as f64;
    let mut c = vec![0.0; n + 1];
    for i in 1..=n {
        let a = (i - 1) as f64 * h;
        c[i] = c[i - 1] + h / 6.0 * (k.density(a) + 4.0 * k.density(a + h / 2.0) + k.density(a + h));
    }
    let z = c[n];
    move |a: f64| {
        let x = (a / h).clamp(0.0, n as f64);
        let i = (x as usize).min(n - 1);
        let w = x - i as f64;
        (c[i] * (1.0 - w) + c[i + 1] * w) / z
    }
}

pub fn ks<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the kernel score against central differences of
/// the log density, over 200 random pairs away from the angle endpoints.
pub fn fd_score_error(t: f64, mode: SmallTimeScore, seed: u64) -> f64 {
    let k = IGSO3Kernel::new(t).unwrap().with_small_time_score(mode);
    let mut rng = RngStream::new(seed, 0);
    let mut worst = 0.0f64;
    let h = 1e-5;
    let mut n = 0;
    while n < 200 {
        let x0 = Rotation::uniform(&mut rng);
        let xt = IGSO3Kernel::new(t).unwrap().angle_table().sample(&x0, &mut rng);
        let a = xt.distance(&x0);
        if !(0.05..PI - 0.05).contains(&a) {
            continue;
        }
        n += 1;
        let d = uniform_axis(&mut rng);
        let s = k.score(&xt, &x0).tangent;
        let an = (0..3).map(|i| s[i] * d[i]).sum::<f64>();
        let fd = (k.log_density(&xt.exp_at(d.map(|c| c * h)), &x0) - k.log_density(&xt.exp_at(d.map(|c| -c * h)), &x0))
            / (2.0 * h);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-2));
    }
    worst
}

/// Per-coordinate mean and variance of draws with standard errors of both.
pub fn moments_with_se(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let c2: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let (v, v_se) = mean_se(&c2);
    (m, (v / n).sqrt(), v, v_se)
}

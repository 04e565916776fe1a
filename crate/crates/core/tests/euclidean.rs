mod common;

use dmm_core::euclidean::*;
use dmm_core::nn::Mat;
use dmm_core::{RateSchedule, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

fn default_schedule() -> RateSchedule {
    RateSchedule::new(0.001, 2.0, 1.0).unwrap()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn ou_kernel_matches_forward_euler_paths() {
    // Oracle: simulate the forward SDE directly with a fine Euler-Maruyama grid.
    let s = default_schedule();
    let (x0, t_end, steps, n) = (1.5, 0.5, 100, 1_000_000);
    let h = t_end / steps as f64;
    let mut rng = RngStream::new(1, 0);
    let mut xs = vec![x0; n];
    for k in 0..steps {
        let beta = s.beta((k as f64 + 0.5) * h);
        for x in xs.iter_mut() {
            *x += -0.5 * beta * *x * h + (beta * h).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (m, v) = mean_var(&xs);
    let k = ou_transition(&s, t_end).unwrap();
    let se_m = (k.variance / n as f64).sqrt();
    let se_v = k.variance * (2.0 / n as f64).sqrt();
    assert!((m - k.mean_coeff * x0).abs() < 3.0 * se_m, "mean {m} vs {}", k.mean_coeff * x0);
    assert!((v - k.variance).abs() < 3.0 * se_v, "var {v} vs {}", k.variance);
}

#[test]
fn ou_kernel_composes() {
    let s = default_schedule();
    let (x0, ts, tt, n) = (-0.7, 0.3, 0.8, 400_000);
    let mut rng = RngStream::new(2, 0);
    let ks = ou_transition(&s, ts).unwrap();
    let kt = ou_transition(&s, tt).unwrap();
    // Kernel from s to t.
    let m_st = (-0.5 * (s.tau(tt) - s.tau(ts))).exp();
    let v_st = 1.0 - m_st * m_st;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let a = ks.mean_coeff * x0 + ks.variance.sqrt() * rng.sample::<f64, _>(StandardNormal);
            m_st * a + v_st.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let (m, v) = mean_var(&xs);
    assert!((m - kt.mean_coeff * x0).abs() < 3.0 * (kt.variance / n as f64).sqrt());
    assert!((v - kt.variance).abs() < 3.0 * kt.variance * (2.0 / n as f64).sqrt());
}

fn fixed_time_batch(x0: f64, t: f64, n: usize, s: &RateSchedule, rng: &mut RngStream) -> DsmBatch {
    let k = ou_transition(s, t).unwrap();
    let xt =
        Mat::from_shape_fn((n, 1), |_| k.mean_coeff * x0 + k.variance.sqrt() * rng.sample::<f64, _>(StandardNormal));
    DsmBatch { x0: Mat::from_elem((n, 1), x0), cond: None, t: vec![t; n], xt }
}

#[test]
fn teacher_injection_gives_zero_loss() {
    let s = default_schedule();
    let mut rng = RngStream::new(3, 0);
    let b = DsmBatch::sample(Mat::from_shape_fn((64, 2), |_| rng.gen_range(-1.0..1.0)), None, &s, &mut rng);
    let pred = b.targets(&s).unwrap();
    assert_eq!(dsm_loss_from_scores(&pred, &b, &s, DsmWeighting::Uniform).unwrap(), 0.0);
}

#[test]
fn zero_prediction_loss_is_half_inverse_variance() {
    let s = default_schedule();
    let mut rng = RngStream::new(4, 0);
    let (t, n) = (0.4, 200_000);
    let b = fixed_time_batch(0.9, t, n, &s, &mut rng);
    let loss = dsm_loss_from_scores(&Mat::zeros((n, 1)), &b, &s, DsmWeighting::Uniform).unwrap();
    let v = ou_transition(&s, t).unwrap().variance;
    // 1/2 z^2 / v has standard deviation sqrt(2)/(2v).
    let se = (2.0f64).sqrt() / (2.0 * v) / (n as f64).sqrt();
    assert!((loss - 1.0 / (2.0 * v)).abs() < 3.0 * se, "{loss} vs {}", 1.0 / (2.0 * v));
}

#[test]
fn gaussian_loss_floor_at_marginal_score() {
    // Data N(0, s0^2). The marginal score -x/V, V = m^2 s0^2 + v, leaves
    // 1/2 (1/v - 1/V) of irreducible loss.
    let s = default_schedule();
    let (t, n, s0) = (0.3, 400_000, 0.5f64);
    let k = ou_transition(&s, t).unwrap();
    let big_v = k.mean_coeff.powi(2) * s0 * s0 + k.variance;
    let mut rng = RngStream::new(5, 0);
    let x0 = Mat::from_shape_fn((n, 1), |_| s0 * rng.sample::<f64, _>(StandardNormal));
    let xt = x0.mapv(|a| k.mean_coeff * a + k.variance.sqrt() * rng.sample::<f64, _>(StandardNormal));
    let b = DsmBatch { x0, cond: None, t: vec![t; n], xt };
    let marg = b.xt.mapv(|x| -x / big_v);
    let floor = dsm_loss_from_scores(&marg, &b, &s, DsmWeighting::Uniform).unwrap();
    let expect = 0.5 * (1.0 / k.variance - 1.0 / big_v);
    assert!((floor - expect).abs() < 0.01 * expect, "{floor} vs {expect}");
    let off = b.xt.mapv(|x| -1.1 * x / big_v);
    assert!(dsm_loss_from_scores(&off, &b, &s, DsmWeighting::Uniform).unwrap() > floor);
}

#[test]
fn denoising_minimizer_is_marginal_score() {
    // Least-squares fit of a piecewise-linear table to conditional-score
    // targets reproduces the analytic marginal score of a two-component mixture.
    let s = default_schedule();
    let (t, mu, s0, n) = (1.0, 2.0, 0.25f64, 2_000_000);
    let k = ou_transition(&s, t).unwrap();
    let mut rng = RngStream::new(6, 0);
    let nodes = 65;
    let (lo, hi) = (-4.0, 4.0);
    let dx = (hi - lo) / (nodes - 1) as f64;
    let mut ata = vec![[0.0f64; 3]; nodes];
    let mut atb = vec![0.0; nodes];
    for _ in 0..n {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let x0 = sign * mu + s0 * rng.sample::<f64, _>(StandardNormal);
        let xt = k.mean_coeff * x0 + k.variance.sqrt() * rng.sample::<f64, _>(StandardNormal);
        if !(lo..hi).contains(&xt) {
            continue;
        }
        let target = conditional_score(&[xt], &[x0], &k).unwrap()[0];
        let u = (xt - lo) / dx;
        let i = (u.floor() as usize).min(nodes - 2);
        let w = u - i as f64;
        let (a, b) = (1.0 - w, w);
        ata[i][1] += a * a;
        ata[i + 1][1] += b * b;
        ata[i][2] += a * b;
        ata[i + 1][0] += a * b;
        atb[i] += a * target;
        atb[i + 1] += b * target;
    }
    // Tridiagonal solve (Thomas).
    let mut c = vec![0.0; nodes];
    let mut d = vec![0.0; nodes];
    for i in 0..nodes {
        let denom = ata[i][1] - if i > 0 { ata[i][0] * c[i - 1] } else { 0.0 };
        c[i] = ata[i][2] / denom;
        d[i] = (atb[i] - if i > 0 { ata[i][0] * d[i - 1] } else { 0.0 }) / denom;
    }
    let mut table = vec![0.0; nodes];
    for i in (0..nodes).rev() {
        table[i] = d[i] - if i + 1 < nodes { c[i] * table[i + 1] } else { 0.0 };
    }
    let mut mse = 0.0;
    for (i, v) in table.iter().enumerate() {
        let x = lo + i as f64 * dx;
        mse += (v - symmetric_mixture_score(x, mu, s0 * s0, &k)).powi(2);
    }
    mse /= nodes as f64;
    assert!(mse <= 1e-3, "table mse {mse}");
}

#[test]
fn zero_score_matches_linear_covariance_recursion() {
    // With a zero score the reverse update is x <- (1 + beta h / 2) x + sqrt(beta h) z,
    // so Var_{k+1} = (1 + beta h / 2)^2 Var_k + beta h from Var_0 = 1.
    let s = RateSchedule::new(0.5, 0.5, 1.0).unwrap();
    let zero = FnScore { dim: 1, f: |x: &Mat, _t: &[f64]| Mat::zeros(x.raw_dim()) };
    let (steps, n) = (100, 200_000);
    let out = reverse_sample(&zero, None, &s, steps, n, &mut RngStream::new(7, 0)).unwrap();
    let h = (s.horizon - s.t_eps()) / steps as f64;
    let mut var = 1.0;
    for _ in 0..steps {
        var = (1.0 + 0.5 * 0.5 * h).powi(2) * var + 0.5 * h;
    }
    let (_, v) = mean_var(out.as_slice().unwrap());
    assert!((v - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt(), "{v} vs {var}");
}

#[test]
fn nested_sampler_at_full_resolution_is_deterministic() {
    let s = default_schedule();
    let exact = FnScore { dim: 1, f: |x: &Mat, _t: &[f64]| -x.clone() };
    let a = reverse_sample_nested(&exact, None, &s, 50, 100, 300, 9).unwrap();
    let b = reverse_sample_nested(&exact, None, &s, 50, 100, 300, 9).unwrap();
    assert_eq!(a, b);
    assert!(reverse_sample_nested(&exact, None, &s, 30, 100, 10, 9).is_err());
}

#[test]
fn reverse_sampler_rejects_zero_steps_and_reports_blowup() {
    let s = default_schedule();
    let bad = FnScore { dim: 1, f: |x: &Mat, _t: &[f64]| x.mapv(|_| f64::INFINITY) };
    let r = reverse_sample(&bad, None, &s, 10, 5, &mut RngStream::new(0, 0));
    assert!(matches!(r, Err(dmm_core::Error::NonFiniteStep { step: 0, .. })));
    let zero = FnScore { dim: 1, f: |x: &Mat, _t: &[f64]| Mat::zeros(x.raw_dim()) };
    assert!(reverse_sample(&zero, None, &s, 0, 5, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn mid_rank_order_statistics() {
    let mut rng = RngStream::new(10, 0);
    let xi: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let got = summarize_observations(&xi, 100).unwrap();
    let mut sorted = xi.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (i, g) in got.iter().enumerate() {
        let rank = ((i as f64 + 0.5) * 10_000.0 / 100.0).floor() as usize;
        assert_eq!(*g, sorted[rank]);
    }
    assert!(got[0] >= sorted[0] && got[99] <= sorted[9_999]);
    assert_eq!(summarize_observations(&xi, 10_000).unwrap(), sorted);
}

#[test]
fn gandk_inverse_transform_matches_quantiles() {
    let p = GandKParams::new(3.0, 1.0, 2.0, 0.5).unwrap();
    let mut rng = RngStream::new(11, 0);
    let mut x = gandk_sample(&p, 100_000, &mut rng);
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &q in &[0.1, 0.25, 0.5, 0.75, 0.9] {
        let emp = x[(q * 100_000.0) as usize];
        let lo = gandk_quantile(q - 0.005, &p).unwrap();
        let hi = gandk_quantile(q + 0.005, &p).unwrap();
        assert!(emp > lo && emp < hi, "q {q}: {emp} not in ({lo}, {hi})");
    }
}

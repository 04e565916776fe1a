mod common;

use common::{cdf_oracle, fd_score_error, ks, simpson};
use dmm_core::euclidean::DsmWeighting;
use dmm_core::nn::{Arch, ScoreNet};
use dmm_core::so3::{
    geodesic_random_walk_reverse, matmul3, norm3, rotation_from_axis_angle, rotation_mean, so3_dsm_loss,
    so3_dsm_loss_from_scores, so3_dsm_loss_gradient, uniform_axis, wrapped_normal_mixture_sample, FnSo3Score,
    IGSO3Cache, IGSO3Kernel, NetSo3Score, Rotation, SmallTimeScore, So3Batch,
};
use dmm_core::{RateSchedule, RngStream};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::f64::consts::PI;

fn random_rotation(rng: &mut RngStream) -> Rotation {
    Rotation::uniform(rng)
}

#[test]
fn axis_angle_examples() {
    let id = rotation_from_axis_angle([0.0, 0.0, 1.0], 0.0).unwrap();
    assert_eq!(id, Rotation::identity());
    let r = rotation_from_axis_angle([0.0, 0.0, 1.0], PI / 2.0).unwrap();
    let m = r.matrix();
    let e1 = [m[0][0], m[1][0], m[2][0]];
    for (a, b) in e1.iter().zip([0.0, -1.0, 0.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    for row in m {
        for v in row {
            assert!([0.0f64, 1.0, -1.0].iter().any(|c| (v - c).abs() < 1e-15));
        }
    }
    assert!(rotation_from_axis_angle([1.0, 1.0, 0.0], 0.3).is_err());
    assert!(rotation_from_axis_angle([1.0, 0.0, 0.0], 3.5).is_err());
}

#[test]
fn rodrigues_matches_quaternion_matrix() {
    let mut rng = RngStream::new(1, 0);
    for _ in 0..200 {
        let v = uniform_axis(&mut rng);
        let a: f64 = rng.gen_range(0.0..PI);
        let r = rotation_from_axis_angle(v, a).unwrap().matrix();
        let vm = dmm_core::so3::skew(v);
        let v2 = matmul3(&vm, &vm);
        for i in 0..3 {
            for j in 0..3 {
                let want = (i == j) as u8 as f64 + a.sin() * vm[i][j] + (1.0 - a.cos()) * v2[i][j];
                assert!((r[i][j] - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn axis_angle_round_trip() {
    let mut rng = RngStream::new(2, 0);
    for _ in 0..1000 {
        let v = uniform_axis(&mut rng);
        let a: f64 = rng.gen_range(1e-6..PI - 1e-6);
        let (v2, a2) = rotation_from_axis_angle(v, a).unwrap().to_axis_angle();
        assert!((a - a2).abs() < 1e-9);
        assert!((0..3).all(|k| (v[k] - v2[k]).abs() < 1e-9));
    }
}

#[test]
fn group_structure() {
    let mut rng = RngStream::new(3, 0);
    for _ in 0..200 {
        let (x, y) = (random_rotation(&mut rng), random_rotation(&mut rng));
        assert!((x.quat_norm() - 1.0).abs() < 1e-12 && x.quaternion()[0] >= 0.0);
        let xy = x.compose(&y).matrix();
        let want = matmul3(&x.matrix(), &y.matrix());
        let m = x.matrix();
        let mut det = 0.0;
        for j in 0..3 {
            det += m[0][j] * (m[1][(j + 1) % 3] * m[2][(j + 2) % 3] - m[1][(j + 2) % 3] * m[2][(j + 1) % 3]);
        }
        assert!((det - 1.0).abs() < 1e-10);
        let mmt = matmul3(&m, &x.inverse().matrix());
        for i in 0..3 {
            for j in 0..3 {
                assert!((xy[i][j] - want[i][j]).abs() < 1e-12);
                assert!((mmt[i][j] - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn exp_log_inverse() {
    let mut rng = RngStream::new(4, 0);
    let mut n = 0;
    while n < 1000 {
        let (x, y) = (random_rotation(&mut rng), random_rotation(&mut rng));
        if x.distance(&y) >= PI - 1e-3 {
            continue;
        }
        n += 1;
        let v = x.log_at(&y);
        assert!(x.exp_at(v).distance(&y) < 1e-9);
        assert!((norm3(v) - x.distance(&y)).abs() < 1e-9);
    }
}

#[test]
fn density_limits_and_normalization() {
    let k = IGSO3Kernel::new(50.0).unwrap();
    for i in 0..=1000 {
        let a = PI * i as f64 / 1000.0;
        assert!((k.density(a) - (1.0 - a.cos()) / PI).abs() <= 1e-6);
    }
    for t in [0.05, 0.5, 5.0] {
        let k = IGSO3Kernel::new(t).unwrap();
        let z = simpson(|a| k.density(a), 0.0, PI, 20_000);
        assert!((z - 1.0).abs() < 1e-3, "t = {t}: {z}");
    }
}

#[test]
fn cutoff_meets_tail_bound() {
    for t in [1.0, 1.5, 3.0, 10.0] {
        let k = IGSO3Kernel::new(t).unwrap();
        let l = k.l_max() as f64;
        assert!((2.0 * l + 3.0) * (-l * (l + 1.0) * t / 2.0).exp() <= 1e-8);
        assert!(k.l_max() >= 5);
    }
    assert_eq!(IGSO3Kernel::new(1.0).unwrap().l_max(), 7);
}

#[test]
fn series_and_small_time_agree_at_crossover() {
    let k = IGSO3Kernel::new(1.0).unwrap();
    let (mut err, mut top) = (0.0f64, 0.0f64);
    for i in 0..=2000 {
        let a = PI * i as f64 / 2000.0;
        let s = k.series_density(a);
        err = err.max((s - k.small_time_density(a)).abs());
        top = top.max(s);
    }
    assert!(err <= 0.02 * top, "{err} vs {top}");
}

#[test]
fn sampler_angle_ks() {
    let k = IGSO3Kernel::new(0.5).unwrap();
    let table = k.angle_table();
    let mut rng = RngStream::new(5, 0);
    let c = random_rotation(&mut rng);
    let angles: Vec<f64> = (0..100_000).map(|_| table.sample(&c, &mut rng).distance(&c)).collect();
    let d = ks(angles, cdf_oracle(&k));
    assert!(d <= 0.01, "KS {d}");
}

#[test]
fn long_time_sampler_is_uniform() {
    let k = IGSO3Kernel::new(50.0).unwrap();
    let table = k.angle_table();
    let mut rng = RngStream::new(6, 0);
    let c = random_rotation(&mut rng);
    let n = 100_000;
    let mut sum = [0.0; 9];
    for _ in 0..n {
        for (s, v) in sum.iter_mut().zip(table.sample(&c, &mut rng).features()) {
            *s += v;
        }
    }
    // Each entry of a Haar rotation has mean 0 and variance 1/3.
    let se = (1.0f64 / 3.0 / n as f64).sqrt();
    assert!(sum.iter().all(|s| (s / n as f64).abs() < 3.0 * se), "{sum:?}");
}

#[test]
fn brownian_scaling_at_small_times() {
    let mut rng = RngStream::new(7, 0);
    let mut means = Vec::new();
    for t in [1e-3, 4e-3, 1.6e-2] {
        let table = IGSO3Kernel::new(t).unwrap().angle_table();
        let n = 20_000;
        let m = (0..n).map(|_| table.sample(&Rotation::identity(), &mut rng).angle()).sum::<f64>() / n as f64;
        // Tangent increments are N(0, t I_3), so E|w| = 2 sqrt(2t/pi).
        assert!((m / (2.0 * (2.0 * t / PI).sqrt()) - 1.0).abs() < 0.03, "t = {t}: {m}");
        means.push(m);
    }
    for w in means.windows(2) {
        assert!((w[1] / w[0] - 2.0).abs() < 0.1);
    }
}

#[test]
fn chapman_kolmogorov() {
    let (k1, k2, k) = (IGSO3Kernel::new(0.2).unwrap(), IGSO3Kernel::new(0.3).unwrap(), IGSO3Kernel::new(0.5).unwrap());
    let (t1, t2) = (k1.angle_table(), k2.angle_table());
    let mut rng = RngStream::new(8, 0);
    let angles: Vec<f64> = (0..100_000)
        .map(|_| {
            let x = t1.sample(&Rotation::identity(), &mut rng);
            t2.sample(&x, &mut rng).angle()
        })
        .collect();
    let d = ks(angles, cdf_oracle(&k));
    assert!(d <= 0.015, "KS {d}");
}

#[test]
fn kernel_depends_only_on_relative_rotation() {
    let mut rng = RngStream::new(9, 0);
    for t in [0.3, 2.0] {
        let k = IGSO3Kernel::new(t).unwrap();
        for _ in 0..100 {
            let (a, b, g) = (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
            let l1 = k.log_density(&a, &b);
            let l2 = k.log_density(&g.compose(&a), &g.compose(&b));
            assert!((l1 - l2).abs() < 1e-10);
        }
    }
}

#[test]
fn score_properties() {
    let mut rng = RngStream::new(10, 0);
    let k = IGSO3Kernel::new(0.3).unwrap();
    let x = random_rotation(&mut rng);
    assert_eq!(k.score(&x, &x).tangent, [0.0; 3]);
    for _ in 0..1000 {
        let (xt, x0) = (random_rotation(&mut rng), random_rotation(&mut rng));
        let s = k.score(&xt, &x0).tangent;
        let v = xt.log_at(&x0);
        let cos = (0..3).map(|i| s[i] * v[i]).sum::<f64>() / (norm3(s) * norm3(v));
        assert!(cos > 1.0 - 1e-12, "cos {cos}");
    }
}

#[test]
fn score_matches_finite_differences() {
    for t in [0.5, 0.05, 1.5, 4.0] {
        let e = fd_score_error(t, SmallTimeScore::ClosedForm, 11);
        assert!(e <= 1e-4, "t = {t}: {e}");
    }
    // Varadhan is only the leading-order term.
    assert!(fd_score_error(0.5, SmallTimeScore::Varadhan, 11) > 1e-3);
}

#[test]
fn score_edge_fallback() {
    let k = IGSO3Kernel::new(0.5).unwrap();
    let x0 = Rotation::identity();
    let near = Rotation::exp([1e-8, 0.0, 0.0]);
    let s = k.score(&near, &x0);
    assert!(s.fallback && s.tangent.iter().all(|v| v.is_finite()));
    let mid = Rotation::exp([1e-4, 0.0, 0.0]);
    let sm = k.score(&mid, &x0);
    assert!(!sm.fallback);
    // Linear regime: the score scales with the offset.
    assert!((s.tangent[0] / 1e-8 - sm.tangent[0] / 1e-4).abs() < 1e-3 * (sm.tangent[0] / 1e-4).abs());
}

#[test]
fn zero_net_loss_matches_radial_quadrature() {
    let sched = RateSchedule::new(0.001, 14.0, 1.0).unwrap();
    let arch = Arch::new(9, 3, vec![8], 4);
    let net = ScoreNet::zeros(arch).unwrap();
    let model = NetSo3Score { net: &net, schedule: sched };
    let mut rng = RngStream::new(12, 0);
    for t in [0.05, 0.2, 0.6] {
        let tau = sched.tau(t);
        let k = IGSO3Kernel::new(tau).unwrap();
        let table = k.angle_table();
        let n = 20_000;
        let mut b = So3Batch { x0: vec![], cond: None, t: vec![], xt: vec![], target: vec![], fallbacks: 0 };
        for _ in 0..n {
            let x0 = random_rotation(&mut rng);
            let xt = table.sample(&x0, &mut rng);
            b.target.push(k.score(&xt, &x0).tangent);
            b.x0.push(x0);
            b.xt.push(xt);
            b.t.push(t);
        }
        let loss = so3_dsm_loss(&model, &b, DsmWeighting::Uniform).unwrap();
        let quad = 0.5 * simpson(|a| k.density(a) * k.log_density_derivative(a).powi(2), 1e-9, PI, 20_000);
        assert!((loss / quad - 1.0).abs() < 0.02, "t = {t}: {loss} vs {quad}");
        assert_eq!(so3_dsm_loss_from_scores(&b.target, &b, &sched, DsmWeighting::Uniform).unwrap(), 0.0);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let sched = RateSchedule::new(0.001, 14.0, 1.0).unwrap();
    let mut rng = RngStream::new(13, 0);
    let arch = Arch::new(9, 3, vec![10, 10], 4).with_cond(2, 3);
    let net = ScoreNet::init(arch, &mut rng).unwrap();
    let cache = IGSO3Cache::new(sched).unwrap();
    let x0: Vec<Rotation> = (0..12).map(|_| random_rotation(&mut rng)).collect();
    let cond = dmm_core::nn::Mat::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
    let b = So3Batch::sample(x0, Some(cond), &cache, &mut rng);
    let model = NetSo3Score { net: &net, schedule: sched };
    let (v, g) = so3_dsm_loss_gradient(&model, &b, DsmWeighting::Variance).unwrap();
    assert!((v - so3_dsm_loss(&model, &b, DsmWeighting::Variance).unwrap()).abs() < 1e-12 * v.max(1.0));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..net.params().len() {
        for idx in [0usize, 5] {
            if idx >= net.params()[p].len() {
                continue;
            }
            let eval = |d: f64| {
                let mut n2 = net.clone();
                n2.params_mut()[p].as_slice_mut().unwrap()[idx] += d;
                so3_dsm_loss(&NetSo3Score { net: &n2, schedule: sched }, &b, DsmWeighting::Variance).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g[p].as_slice().unwrap()[idx];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn zero_score_walk_stays_uniform() {
    let sched = RateSchedule::new(0.001, 14.0, 1.0).unwrap();
    let zero = FnSo3Score(|_: &Rotation, _| [0.0; 3]);
    let n = 10_000;
    let xs = geodesic_random_walk_reverse(&zero, None, &sched, 100, n, &mut RngStream::new(14, 0)).unwrap();
    let mut sum = [0.0; 9];
    for x in &xs {
        for (s, v) in sum.iter_mut().zip(x.features()) {
            *s += v;
        }
    }
    let se = (1.0f64 / 3.0 / n as f64).sqrt();
    assert!(sum.iter().all(|s| (s / n as f64).abs() < 3.0 * se), "{sum:?}");
    let long = geodesic_random_walk_reverse(&zero, None, &sched, 1000, 20, &mut RngStream::new(15, 0)).unwrap();
    assert!(long.iter().all(|x| (x.quat_norm() - 1.0).abs() <= 1e-9));
    assert!(geodesic_random_walk_reverse(&zero, None, &sched, 0, 1, &mut RngStream::new(1, 0)).is_err());
    let bad = FnSo3Score(|_: &Rotation, _| [f64::NAN; 3]);
    assert!(matches!(
        geodesic_random_walk_reverse(&bad, None, &sched, 5, 2, &mut RngStream::new(1, 0)),
        Err(dmm_core::Error::NonFiniteStep { step: 0, .. })
    ));
}

#[test]
fn exact_score_walk_concentrates_at_mean() {
    // Data = heat kernel around mu at diffusion time tau0 = sigma^2/2, so the
    // marginal at t is the heat kernel at tau0 + tau(t).
    let sched = RateSchedule::new(0.001, 14.0, 1.0).unwrap();
    let mut rng = RngStream::new(16, 0);
    let mu = random_rotation(&mut rng);
    let tau0 = 0.3f64 * 0.3 / 2.0;
    let score = FnSo3Score(move |x: &Rotation, t| IGSO3Kernel::new(tau0 + sched.tau(t)).unwrap().score(x, &mu).tangent);
    let xs = geodesic_random_walk_reverse(&score, None, &sched, 500, 2000, &mut rng).unwrap();
    let m = rotation_mean(&xs).unwrap();
    assert!(m.distance(&mu) <= 0.05, "{}", m.distance(&mu));
    // Spread matches the data law: E angle^2 ~ 3 tau0.
    let ms = xs.iter().map(|x| x.distance(&mu).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((ms / (3.0 * tau0) - 1.0).abs() < 0.15, "{ms}");
}

#[test]
fn wrapped_normal_sampling() {
    let mut rng = RngStream::new(17, 0);
    let means: Vec<Rotation> = (0..3).map(|_| random_rotation(&mut rng)).collect();
    for m in 0..3 {
        let (x, c) = wrapped_normal_mixture_sample(&means, &[0.0, 0.0, 0.0], Some(m), &mut rng).unwrap();
        assert_eq!((x, c), (means[m], m));
    }
    for _ in 0..100 {
        let (_, c) = wrapped_normal_mixture_sample(&means, &[0.1, 0.2, 0.3], Some(1), &mut rng).unwrap();
        assert_eq!(c, 1);
    }
    assert!(wrapped_normal_mixture_sample(&[], &[], None, &mut rng).is_err());
    assert!(wrapped_normal_mixture_sample(&means, &[0.1], None, &mut rng).is_err());
    assert!(wrapped_normal_mixture_sample(&means, &[0.1, 0.2, 0.3], Some(3), &mut rng).is_err());

    // Skew part of a N(0, s^2) matrix has coefficients N(0, s^2/2), so the
    // angle is (s/sqrt 2) times a chi(3) variable.
    let s = 0.2f64;
    let angles: Vec<f64> = (0..100_000)
        .map(|_| wrapped_normal_mixture_sample(&[Rotation::identity()], &[s], None, &mut rng).unwrap().0.angle())
        .collect();
    let chi = ChiSquared::new(3.0).unwrap();
    let d = ks(angles, |a| chi.cdf((a / (s / 2f64.sqrt())).powi(2)));
    assert!(d <= 0.01, "KS {d}");
}

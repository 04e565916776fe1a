mod common;

use dmm_core::nn::{AdamState, Arch, Checkpoint, Mat, ScoreNet, Tape};
use dmm_core::{Error, RngStream};
use ndarray::{array, Axis};

#[test]
fn zero_net_outputs_zero() {
    let arch = Arch::new(3, 2, vec![8, 8], 16).with_cond(2, 4);
    let net = ScoreNet::zeros(arch).unwrap();
    let out = net.forward_one(&[1.0, -2.0, 0.5], 0.3, Some(&[0.1, 0.2])).unwrap();
    assert_eq!(out, vec![0.0, 0.0]);
}

#[test]
fn identity_layer_passes_input() {
    let arch = Arch::new(3, 3, vec![], 0);
    let eye = Mat::eye(3);
    let net = ScoreNet::from_params(arch, vec![eye, Mat::zeros((1, 3))]).unwrap();
    let x = [0.25, -1.5, 7.0];
    assert_eq!(net.forward_one(&x, 0.9, None).unwrap(), x.to_vec());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = RngStream::new(5, 0);
    let net = common::random_net(&mut rng);
    let p = common::random_problem(&net, &mut rng);
    let a = net.forward(&p.x, &p.t, p.cond.as_ref()).unwrap();
    let b = net.forward(&p.x, &p.t, p.cond.as_ref()).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn tape_forward_matches_plain_forward() {
    let mut rng = RngStream::new(6, 0);
    for _ in 0..10 {
        let net = common::random_net(&mut rng);
        let p = common::random_problem(&net, &mut rng);
        let plain = net.forward(&p.x, &p.t, p.cond.as_ref()).unwrap();
        let mut tape = Tape::new();
        let pv = net.bind(&mut tape);
        let x = tape.constant(p.x.clone());
        let c = p.cond.clone().map(|c| tape.constant(c));
        let out = net.forward_tape(&mut tape, &pv, x, &p.t, c).unwrap();
        for (u, v) in plain.iter().zip(tape.value(out).iter()) {
            assert!((u - v).abs() < 1e-13);
        }
    }
}

#[test]
fn jvp_matches_input_finite_difference() {
    let mut rng = RngStream::new(8, 0);
    for _ in 0..10 {
        let net = common::random_net(&mut rng);
        let p = common::random_problem(&net, &mut rng);
        let mut tape = Tape::new();
        let pv = net.bind(&mut tape);
        let x = tape.constant(p.x.clone());
        let c = p.cond.clone().map(|c| tape.constant(c));
        let (_, tans) = net.forward_jvp_tape(&mut tape, &pv, x, &[p.dir.clone()], &p.t, c).unwrap();
        let h = 1e-6;
        let fp = net.forward(&(&p.x + &(&p.dir * h)), &p.t, p.cond.as_ref()).unwrap();
        let fm = net.forward(&(&p.x - &(&p.dir * h)), &p.t, p.cond.as_ref()).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        for (u, v) in fd.iter().zip(tape.value(tans[0]).iter()) {
            assert!((u - v).abs() < 1e-7 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn linear_net_quadratic_loss_gradient() {
    let w = array![[0.5, -1.0], [2.0, 0.25], [-0.3, 0.7]];
    let b = array![[0.1, -0.2]];
    let net = ScoreNet::from_params(Arch::new(3, 2, vec![], 0), vec![w.clone(), b.clone()]).unwrap();
    let x = array![[1.0, 2.0, -1.0], [0.5, -0.5, 3.0], [0.0, 1.0, 1.0], [-2.0, 0.3, 0.1]];
    let n = x.nrows() as f64;
    let (_, g) = net
        .loss_gradient(|tape, pv| {
            let xv = tape.constant(x.clone());
            let out = net.forward_tape(tape, pv, xv, &[0.0; 4], None)?;
            let sq = tape.square(out);
            let s = tape.sum_all(sq);
            Ok(tape.scale(s, 0.5 / n))
        })
        .unwrap();
    // loss = 1/(2n) sum ||x W + b||^2, so dW = X^T R / n and db = mean(R).
    let resid = x.dot(&w) + &b;
    let gw = x.t().dot(&resid) / n;
    let gb = resid.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    for (u, v) in g[0].iter().zip(gw.iter()) {
        assert!((u - v).abs() < 1e-14);
    }
    for (u, v) in g[1].iter().zip(gb.iter()) {
        assert!((u - v).abs() < 1e-14);
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut rng = RngStream::new(9, 0);
    let net = common::random_net(&mut rng);
    let (v, g) = net.loss_gradient(|tape, _| Ok(tape.constant(Mat::from_elem((1, 1), 3.5)))).unwrap();
    assert_eq!(v, 3.5);
    assert!(g.iter().all(|m| m.iter().all(|&x| x == 0.0)));
}

#[test]
fn non_finite_reports_layer() {
    let arch = Arch::new(1, 1, vec![2], 0);
    let net = ScoreNet::from_params(
        arch,
        vec![array![[1e308, 1.0]], array![[0.0, 0.0]], array![[1.0], [1.0]], array![[0.0]]],
    )
    .unwrap();
    match net.forward_one(&[10.0], 0.0, None) {
        Err(Error::NonFiniteLayer { layer, .. }) => assert_eq!(layer, 0),
        other => panic!("expected layer error, got {other:?}"),
    }
    let r = net.loss_gradient(|tape, pv| {
        let x = tape.constant(array![[10.0]]);
        let o = net.forward_tape(tape, pv, x, &[0.0], None)?;
        Ok(tape.sum_all(o))
    });
    assert!(matches!(r, Err(Error::NonFiniteLayer { layer: 0, .. })));
}

#[test]
fn shape_mismatch_is_error() {
    let net = ScoreNet::zeros(Arch::new(3, 2, vec![4], 4)).unwrap();
    assert!(net.forward_one(&[1.0, 2.0], 0.0, None).is_err());
    assert!(net.forward_one(&[1.0, 2.0, 3.0], 0.0, Some(&[1.0])).is_err());
}

#[test]
fn gradient_check_small_sample() {
    for seed in 100..110 {
        let worst = common::gradcheck_one(seed, 60);
        assert!(worst <= 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut rng = RngStream::new(3, 1);
    let mut net = common::random_net(&mut rng);
    let mut adam = AdamState::new(&net.arch().param_shapes(), 1e-3);
    let p = common::random_problem(&net, &mut rng);
    for _ in 0..3 {
        let (_, g) = net.loss_gradient(|t, pv| common::composite_loss(&net, &p, t, pv)).unwrap();
        adam.step(net.params_mut(), &g).unwrap();
    }
    let ck = Checkpoint::capture(&net, &adam, rng.state(), 3, serde_json::json!({"task": "test"}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    ck.save_atomic(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let net2 = back.net().unwrap();
    for (a, b) in net.params().iter().zip(net2.params()) {
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    assert_eq!(back.adam().unwrap(), adam);
    assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "temp file left behind");
}

fn train_tiny(seed: u64) -> Vec<Mat> {
    let mut rng = RngStream::new(seed, 0);
    let mut net = ScoreNet::init(Arch::new(2, 2, vec![16], 8), &mut rng).unwrap();
    let mut adam = AdamState::new(&net.arch().param_shapes(), 1e-2);
    for _ in 0..20 {
        let p = common::random_problem(&net, &mut rng);
        let (_, g) = net.loss_gradient(|t, pv| common::composite_loss(&net, &p, t, pv)).unwrap();
        adam.step(net.params_mut(), &g).unwrap();
    }
    net.params().to_vec()
}

#[test]
fn training_is_deterministic() {
    let a = train_tiny(42);
    let b = train_tiny(42);
    let c = train_tiny(43);
    assert!(a.iter().zip(&b).all(|(x, y)| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits())));
    assert!(a != c);
}

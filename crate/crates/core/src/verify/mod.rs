//! Structural identities checked exactly on small finite-state models.
//!
//! Every check returns a [`CheckReport`] with a pass/fail status, the metric
//! compared against its tolerance, and a JSON witness. Expectations are exact
//! sums over states; only time integrals use quadrature (composite Simpson
//! with one refinement to estimate the error).

use crate::error::{domain, shape};
use crate::linalg::{from_dmatrix, to_dmatrix};
use crate::process::phi_unchecked;
use crate::{kl_discrete, DiscreteDistribution, DiscreteGenerator, Result, RngStream};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

/// Largest state space accepted by [`TinyModel`].
pub const MAX_TINY_STATES: usize = 16;
/// Default number of Simpson intervals for time integrals.
pub const TIME_GRID: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub status: Status,
    pub metric: f64,
    pub tolerance: f64,
    pub witness: serde_json::Value,
}

impl CheckReport {
    fn new(check: &str, pass: bool, metric: f64, tolerance: f64, witness: serde_json::Value) -> Self {
        Self {
            check: check.to_string(),
            status: if pass { Status::Pass } else { Status::Fail },
            metric,
            tolerance,
            witness,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Serialize reports as a JSON array.
pub fn reports_to_json(reports: &[CheckReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

/// Positive function of state and time.
pub trait BetaField {
    fn values(&self, t: f64) -> Vec<f64>;
}

impl<F: Fn(f64) -> Vec<f64>> BetaField for F {
    fn values(&self, t: f64) -> Vec<f64> {
        self(t)
    }
}

/// `log beta(x, t) = a_x + b_x sin(c_x t + d_x)`.
#[derive(Clone, Debug)]
pub struct SmoothBeta {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl SmoothBeta {
    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        let mut draw = |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let a = draw(-1.5, 1.5);
        let b = draw(-0.5, 0.5);
        let c = draw(0.0, 3.0);
        let d = draw(0.0, 6.0);
        Self { a, b, c, d }
    }

    /// Spatially constant `beta`.
    pub fn constant(n: usize) -> Self {
        Self { a: vec![0.0; n], b: vec![0.0; n], c: vec![0.0; n], d: vec![0.0; n] }
    }
}

impl BetaField for SmoothBeta {
    fn values(&self, t: f64) -> Vec<f64> {
        (0..self.a.len()).map(|x| (self.a[x] + self.b[x] * (self.c[x] * t + self.d[x]).sin()).exp()).collect()
    }
}

/// `beta` scaled by a positive function of time only.
pub struct TimeScaled<'a> {
    pub inner: &'a dyn BetaField,
    pub scale: fn(f64) -> f64,
}

impl BetaField for TimeScaled<'_> {
    fn values(&self, t: f64) -> Vec<f64> {
        let c = (self.scale)(t);
        self.inner.values(t).into_iter().map(|v| v * c).collect()
    }
}

/// Forward chain, initial law and horizon of a brute-forceable model.
#[derive(Clone, Debug)]
pub struct TinyModel {
    pub forward: DiscreteGenerator,
    pub initial: DiscreteDistribution,
    pub horizon: f64,
}

/// The exact forward marginals `q_t` as a [`BetaField`].
pub struct MarginalBeta<'a>(pub &'a TinyModel);

impl BetaField for MarginalBeta<'_> {
    fn values(&self, t: f64) -> Vec<f64> {
        self.0.marginal(t).to_vec()
    }
}

fn expm(a: &Array2<f64>, t: f64) -> Array2<f64> {
    from_dmatrix(&(to_dmatrix(a) * t).exp())
}

/// ISM integrand at `x`:
/// `sum_y B[y,x] beta(y)/beta(x) + sum_y B[x,y] log beta(y)`.
pub fn ism_integrand(b: &Array2<f64>, beta: &[f64], x: usize) -> f64 {
    let n = beta.len();
    let mut v = 0.0;
    for y in 0..n {
        v += b[[y, x]] * beta[y] / beta[x] + b[[x, y]] * beta[y].ln();
    }
    v
}

/// `Phi(num / beta)(x)`.
fn phi_ratio(b: &Array2<f64>, num: &[f64], beta: &[f64], x: usize) -> f64 {
    let f: Vec<f64> = num.iter().zip(beta).map(|(a, c)| a / c).collect();
    phi_unchecked(b, &f, x)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ObjectiveValues {
    pub ism: f64,
    pub dsm: f64,
    pub esm: f64,
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

impl TinyModel {
    pub fn new(forward: DiscreteGenerator, initial: DiscreteDistribution, horizon: f64) -> Result<Self> {
        let n = forward.size();
        if n > MAX_TINY_STATES {
            return domain(format!("{n} states exceed the limit of {MAX_TINY_STATES}"));
        }
        if initial.len() != n {
            return shape("initial law and generator differ in size");
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return domain("horizon must be positive");
        }
        Ok(Self { forward, initial, horizon })
    }

    /// Random irreducible model with a fully supported initial law.
    pub fn random(n: usize, horizon: f64, rng: &mut RngStream) -> Result<Self> {
        let mut r = Array2::zeros((n, n));
        for x in 0..n {
            for y in 0..n {
                if x != y {
                    r[[x, y]] = rng.gen_range(0.2..2.0);
                }
            }
        }
        let q0 = Array1::from_iter((0..n).map(|_| rng.gen_range(0.1..1.0)));
        Self::new(DiscreteGenerator::from_off_diagonal(r)?, DiscreteDistribution::from_weights(q0)?, horizon)
    }

    pub fn states(&self) -> usize {
        self.forward.size()
    }

    pub fn b(&self) -> &Array2<f64> {
        self.forward.rates()
    }

    pub fn transition(&self, t: f64) -> Array2<f64> {
        expm(self.b(), t)
    }

    pub fn marginal(&self, t: f64) -> Array1<f64> {
        self.initial.probs().dot(&self.transition(t))
    }

    /// Reverse generator with `A[x,y] = beta(y)/beta(x) B[y,x]` off the diagonal.
    pub fn reverse_generator(&self, beta: &[f64]) -> Array2<f64> {
        let n = self.states();
        let b = self.b();
        let mut a = Array2::zeros((n, n));
        for x in 0..n {
            let mut out = 0.0;
            for y in 0..n {
                if y != x {
                    a[[x, y]] = beta[y] / beta[x] * b[[y, x]];
                    out += a[[x, y]];
                }
            }
            a[[x, x]] = -out;
        }
        a
    }

    /// Kernel of the generative process from forward time `t` back to `s < t`
    /// (rows: state at `t`, columns: state at `s`), as a midpoint product of
    /// `substeps` exponentials.
    pub fn reverse_kernel(&self, beta: &dyn BetaField, t: f64, s: f64, substeps: usize) -> Array2<f64> {
        let n = self.states();
        let h = (t - s) / substeps as f64;
        let mut k = Array2::eye(n);
        for i in 0..substeps {
            let u = t - (i as f64 + 0.5) * h;
            k = k.dot(&expm(&self.reverse_generator(&beta.values(u)), h));
        }
        k
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.states() {
            return shape("beta has the wrong number of states");
        }
        if beta.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return domain("beta must be strictly positive");
        }
        Ok(())
    }

    /// ISM, DSM and ESM integrated over `[t_lo, T]` with `n` Simpson intervals.
    pub fn objectives(&self, beta: &dyn BetaField, t_lo: f64, n: usize) -> Result<ObjectiveValues> {
        if n % 2 == 1 || n == 0 {
            return domain("Simpson needs an even, positive number of intervals");
        }
        let b = self.b();
        let ns = self.states();
        let h = (self.horizon - t_lo) / n as f64;
        let w = simpson_weights(n, h);
        let q0 = self.initial.probs();
        let mut out = ObjectiveValues { ism: 0.0, dsm: 0.0, esm: 0.0 };
        for (i, &wi) in w.iter().enumerate() {
            let t = t_lo + i as f64 * h;
            let bt = beta.values(t);
            self.check_beta(&bt)?;
            let kt = self.transition(t);
            let qt = q0.dot(&kt);
            let (mut ism, mut dsm, mut esm) = (0.0, 0.0, 0.0);
            for x in 0..ns {
                if qt[x] <= 0.0 {
                    continue;
                }
                ism += qt[x] * ism_integrand(b, &bt, x);
                esm += qt[x] * phi_ratio(b, qt.as_slice().unwrap(), &bt, x);
                for x0 in 0..ns {
                    let joint = q0[x0] * kt[[x0, x]];
                    if joint > 0.0 {
                        dsm += joint * phi_ratio(b, kt.row(x0).as_slice().unwrap(), &bt, x);
                    }
                }
            }
            out.ism += wi * ism;
            out.dsm += wi * dsm;
            out.esm += wi * esm;
        }
        Ok(out)
    }
}

/// Random generator with off-diagonal rates in `[0, 3)`.
pub fn random_generator(n: usize, rng: &mut RngStream) -> Result<DiscreteGenerator> {
    let mut r = Array2::zeros((n, n));
    for x in 0..n {
        for y in 0..n {
            if x != y {
                r[[x, y]] = rng.gen::<f64>() * 3.0;
            }
        }
    }
    DiscreteGenerator::from_off_diagonal(r)
}

/// Nonnegativity of `Phi` over random `(B, f)`, vanishing on constants, and
/// vanishing on the density ratio of two invariant laws of a reducible chain.
pub fn check_phi_properties(trials: usize, rng: &mut RngStream) -> Result<Vec<CheckReport>> {
    let mut worst = f64::INFINITY;
    let mut worst_case = json!(null);
    let mut const_worst: f64 = 0.0;
    for trial in 0..trials {
        let n = 2 + trial % 7;
        let b = random_generator(n, rng)?;
        let f: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 6.0 - 3.0).exp()).collect();
        let c = vec![rng.gen_range(0.1..10.0); n];
        for x in 0..n {
            let v = phi_unchecked(b.rates(), &f, x);
            if v < worst {
                worst = v;
                worst_case = json!({"trial": trial, "x": x, "f": f, "phi": v});
            }
            const_worst = const_worst.max(phi_unchecked(b.rates(), &c, x).abs());
        }
    }
    let mut reports = vec![
        CheckReport::new("phi_nonnegative", worst >= -1e-12, worst, -1e-12, worst_case),
        CheckReport::new("phi_constant_zero", const_worst <= 1e-12, const_worst, 1e-12, json!({"trials": trials})),
    ];

    // Two disconnected 2-state blocks; mixtures of the block stationary laws
    // with different weights are both invariant.
    let b = DiscreteGenerator::new(ndarray::array![
        [-1.0, 1.0, 0.0, 0.0],
        [2.0, -2.0, 0.0, 0.0],
        [0.0, 0.0, -0.5, 0.5],
        [0.0, 0.0, 1.5, -1.5]
    ])?;
    let pa = [2.0 / 3.0, 1.0 / 3.0];
    let pb = [0.75, 0.25];
    let pi1 = [0.7 * pa[0], 0.7 * pa[1], 0.3 * pb[0], 0.3 * pb[1]];
    let pi2 = [0.2 * pa[0], 0.2 * pa[1], 0.8 * pb[0], 0.8 * pb[1]];
    let ratio: Vec<f64> = pi1.iter().zip(&pi2).map(|(a, c)| a / c).collect();
    let kt = expm(b.rates(), 0.8);
    let drift: f64 =
        (0..4).map(|y| ((0..4).map(|x| pi1[x] * kt[[x, y]]).sum::<f64>() - pi1[y]).abs()).fold(0.0, f64::max);
    let phi_max = (0..4).map(|x| phi_unchecked(b.rates(), &ratio, x).abs()).fold(0.0, f64::max);
    let spread =
        ratio.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ratio.iter().cloned().fold(f64::INFINITY, f64::min);
    reports.push(CheckReport::new(
        "phi_non_ergodic_zero",
        phi_max <= 1e-12 && drift <= 1e-12 && spread > 1.0,
        phi_max,
        1e-12,
        json!({"ratio": ratio, "invariance_error": drift}),
    ));
    Ok(reports)
}

fn kl_at(b: &Array2<f64>, pi1: &DiscreteDistribution, pi2: &DiscreteDistribution, t: f64) -> Result<f64> {
    let k = expm(b, t);
    let p1 = DiscreteDistribution::from_weights(pi1.probs().dot(&k).mapv(|v| v.max(0.0)))?;
    let p2 = DiscreteDistribution::from_weights(pi2.probs().dot(&k).mapv(|v| v.max(0.0)))?;
    kl_discrete(&p1, &p2)
}

/// `KL(pi1 Q_t || pi2 Q_t)` along `times`.
pub fn kl_trajectory(
    b: &DiscreteGenerator,
    pi1: &DiscreteDistribution,
    pi2: &DiscreteDistribution,
    times: &[f64],
) -> Result<Vec<f64>> {
    times.iter().map(|&t| kl_at(b.rates(), pi1, pi2, t)).collect()
}

/// Central difference of the KL divergence against `-E[Phi(ratio)]`.
pub fn check_kl_decay(
    b: &DiscreteGenerator,
    pi1: &DiscreteDistribution,
    pi2: &DiscreteDistribution,
    t: f64,
    h: f64,
) -> Result<CheckReport> {
    if pi1.len() != b.size() || pi2.len() != b.size() {
        return shape("laws and generator differ in size");
    }
    if !(h > 0.0 && t - h >= 0.0) {
        return domain("need 0 < h <= t");
    }
    let k = expm(b.rates(), t);
    let p1 = pi1.probs().dot(&k);
    let p2 = pi2.probs().dot(&k);
    let n = b.size();
    let mut rhs = 0.0;
    for x in 0..n {
        if p1[x] <= 0.0 {
            continue;
        }
        if p2[x] <= 0.0 {
            return domain(format!("pi1 Q_t not dominated by pi2 Q_t at state {x}"));
        }
        let f: Vec<f64> = (0..n).map(|y| p1[y] / p2[y]).collect();
        if (0..n).any(|y| y != x && b.rates()[[x, y]] > 0.0 && !(f[y] > 0.0 && f[y].is_finite())) {
            return domain(format!("density ratio vanishes next to state {x}"));
        }
        rhs -= p1[x] * phi_unchecked(b.rates(), &f, x);
    }
    let lhs = (kl_at(b.rates(), pi1, pi2, t + h)? - kl_at(b.rates(), pi1, pi2, t - h)?) / (2.0 * h);
    let rel = if lhs.abs().max(rhs.abs()) < 1e-14 { 0.0 } else { (lhs - rhs).abs() / rhs.abs().max(1e-300) };
    Ok(CheckReport::new("kl_decay", rel <= 1e-4, rel, 1e-4, json!({"t": t, "h": h, "dkl_dt": lhs, "minus_e_phi": rhs})))
}

/// ISM, DSM and ESM differ by constants: their pairwise differences must not
/// vary across candidates.
pub fn check_objective_equivalence(
    model: &TinyModel,
    candidates: &[&dyn BetaField],
) -> Result<(CheckReport, Vec<ObjectiveValues>)> {
    if candidates.len() < 2 {
        return domain("need at least two candidates");
    }
    let t_lo = 1e-3 * model.horizon;
    let vals = candidates.iter().map(|c| model.objectives(*c, t_lo, TIME_GRID)).collect::<Result<Vec<_>>>()?;
    let var = |f: &dyn Fn(&ObjectiveValues) -> f64| {
        let xs: Vec<f64> = vals.iter().map(f).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let v = [var(&|o| o.ism - o.dsm), var(&|o| o.ism - o.esm), var(&|o| o.dsm - o.esm)];
    let worst = v.iter().cloned().fold(0.0, f64::max);
    let r = CheckReport::new(
        "objective_equivalence",
        worst <= 1e-10,
        worst,
        1e-10,
        json!({"variances": v, "candidates": vals.len(), "first": vals[0]}),
    );
    Ok((r, vals))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiscretizationPoint {
    pub gamma: f64,
    /// `gamma E_{q_s}[ISM integrand]`.
    pub lhs: f64,
    /// `E[log q_{t|s}(x_t|x_s) / p_{T-s|T-t}(x_s|x_t)]`.
    pub rhs: f64,
}

/// Per-step remainder of the first-order expansion, with the log-log slope of
/// `|lhs - rhs|` against `gamma`.
pub fn check_discretization(
    model: &TinyModel,
    beta: &dyn BetaField,
    s: f64,
    gammas: &[f64],
) -> Result<(CheckReport, Vec<DiscretizationPoint>)> {
    if gammas.len() < 2 {
        return domain("need at least two step sizes");
    }
    let n = model.states();
    let b = model.b();
    let qs = model.marginal(s);
    let bs = beta.values(s);
    model.check_beta(&bs)?;
    let e_ism: f64 = (0..n).map(|x| qs[x] * ism_integrand(b, &bs, x)).sum();
    let mut pts = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let t = s + g;
        if !(g > 0.0 && t <= model.horizon) {
            return domain(format!("step {g} leaves [0, T]"));
        }
        let fwd = model.transition(g);
        let rev = model.reverse_kernel(beta, t, s, 32);
        let mut rhs = 0.0;
        for x in 0..n {
            for y in 0..n {
                let w = qs[x] * fwd[[x, y]];
                if w > 0.0 {
                    rhs += w * (fwd[[x, y]] / rev[[y, x]]).ln();
                }
            }
        }
        pts.push(DiscretizationPoint { gamma: g, lhs: g * e_ism, rhs });
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.gamma.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| (p.lhs - p.rhs).abs().max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let r = CheckReport::new(
        "discretization_slope",
        (1.8..=2.5).contains(&slope),
        slope,
        1.8,
        json!({"points": pts, "accepted": [1.8, 2.5]}),
    );
    Ok((r, pts))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ElboBound {
    pub elbo: f64,
    pub loglik: f64,
    /// `loglik - elbo`.
    pub gap: f64,
    /// Change of `gap` under one grid refinement.
    pub grid_error: f64,
}

fn elbo_and_loglik(
    model: &TinyModel,
    beta: &dyn BetaField,
    reference: &DiscreteDistribution,
    n: usize,
) -> Result<(f64, f64)> {
    let ns = model.states();
    let b = model.b();
    let big_t = model.horizon;
    let q0 = model.initial.probs();
    let kt = model.transition(big_t);
    let mut prior = 0.0;
    for x in 0..ns {
        for y in 0..ns {
            let w = q0[x] * kt[[x, y]];
            if w > 0.0 {
                prior += w * reference.probs()[y].ln();
            }
        }
    }
    let h = big_t / n as f64;
    let w = simpson_weights(n, h);
    let mut ism = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        let t = i as f64 * h;
        let bt = beta.values(t);
        model.check_beta(&bt)?;
        let qt = model.marginal(t);
        ism += wi * (0..ns).map(|x| qt[x] * ism_integrand(b, &bt, x)).sum::<f64>();
    }
    let pt = reference.probs().dot(&model.reverse_kernel(beta, big_t, 0.0, n));
    let mut ll = 0.0;
    for x in 0..ns {
        if q0[x] > 0.0 {
            ll += q0[x] * pt[x].ln();
        }
    }
    Ok((prior - ism, ll))
}

/// `E_{q_0}[ELBO] <= E_{q_0}[log p_T]` with the generative process started
/// from `reference`, up to twice the quadrature error.
pub fn check_elbo_bound(
    model: &TinyModel,
    beta: &dyn BetaField,
    reference: &DiscreteDistribution,
    n: usize,
) -> Result<(CheckReport, ElboBound)> {
    if reference.len() != model.states() || reference.probs().iter().any(|&p| p <= 0.0) {
        return domain("reference law must be fully supported on the model's states");
    }
    let n = n + n % 2;
    let (e1, l1) = elbo_and_loglik(model, beta, reference, n)?;
    let (e2, l2) = elbo_and_loglik(model, beta, reference, 2 * n)?;
    let grid_error = ((l2 - e2) - (l1 - e1)).abs();
    let out = ElboBound { elbo: e2, loglik: l2, gap: l2 - e2, grid_error };
    let r = CheckReport::new(
        "elbo_bound",
        out.gap >= -2.0 * grid_error - 1e-12,
        -out.gap,
        2.0 * grid_error,
        serde_json::to_value(out)?,
    );
    Ok((r, out))
}

/// The deterministic default suite.
pub fn default_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = RngStream::new(seed, 0);
    let mut out = check_phi_properties(1000, &mut rng)?;

    let model = TinyModel::random(3, 1.0, &mut rng)?;
    let pi1 = DiscreteDistribution::from_weights(Array1::from(vec![0.6, 0.3, 0.1]))?;
    let pi2 = DiscreteDistribution::from_weights(Array1::from(vec![0.2, 0.3, 0.5]))?;
    out.push(check_kl_decay(&model.forward, &pi1, &pi2, 0.5, 1e-4)?);

    let cands: Vec<SmoothBeta> = (0..20).map(|_| SmoothBeta::random(3, &mut rng)).collect();
    let refs: Vec<&dyn BetaField> = cands.iter().map(|c| c as &dyn BetaField).collect();
    out.push(check_objective_equivalence(&model, &refs)?.0);

    let gammas = [0.1, 0.05, 0.025, 0.0125, 0.00625];
    out.push(check_discretization(&model, &cands[0], 0.3, &gammas)?.0);

    let stationary = DiscreteDistribution::new(
        crate::linalg::stationary(model.b()).ok_or_else(|| crate::Error::Numerical("no stationary law".into()))?,
    )?;
    out.push(check_elbo_bound(&model, &cands[1], &stationary, 2000)?.0);
    Ok(out)
}

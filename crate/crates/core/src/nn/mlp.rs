//! Multilayer perceptron with sinusoidal time embedding and an optional
//! conditioning encoder.
//!
//! The first layer sees `[x, embed(t), silu(cond W_c + b_c)]`; hidden layers
//! use SiLU; the output layer is linear.

use super::tape::{silu, Mat, Tape, Var};
use crate::{Error, Result};
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    /// Even; zero disables the time input.
    pub time_embed_dim: usize,
    /// Zero for an unconditional net.
    pub cond_dim: usize,
    pub cond_embed_dim: usize,
    pub activation: Activation,
    /// Time is multiplied by this before embedding.
    pub time_scale: f64,
}

impl Arch {
    pub fn new(in_dim: usize, out_dim: usize, hidden: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden,
            time_embed_dim,
            cond_dim: 0,
            cond_embed_dim: 0,
            activation: Activation::Silu,
            time_scale: 1000.0,
        }
    }

    pub fn with_cond(mut self, cond_dim: usize, cond_embed_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self.cond_embed_dim = cond_embed_dim;
        self
    }

    pub fn with_time_scale(mut self, s: f64) -> Self {
        self.time_scale = s;
        self
    }

    fn first_width(&self) -> usize {
        self.in_dim + self.time_embed_dim + if self.cond_dim > 0 { self.cond_embed_dim } else { 0 }
    }

    fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(rows, cols)` of every parameter in storage order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.first_width()];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        let mut out = Vec::new();
        for w in dims.windows(2) {
            out.push((w[0], w[1]));
            out.push((1, w[1]));
        }
        if self.cond_dim > 0 {
            out.push((self.cond_dim, self.cond_embed_dim));
            out.push((1, self.cond_embed_dim));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.n_layers() {
            names.push(format!("layer{l}.weight"));
            names.push(format!("layer{l}.bias"));
        }
        if self.cond_dim > 0 {
            names.push("cond.weight".into());
            names.push("cond.bias".into());
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Shape("in_dim and out_dim must be positive".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Shape("time_embed_dim must be even".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Shape("hidden widths must be positive".into()));
        }
        if self.cond_dim > 0 && self.cond_embed_dim == 0 {
            return Err(Error::Shape("conditional net needs cond_embed_dim > 0".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding with a geometric frequency ladder of base 1e4.
/// Row `i` is `[sin(s t_i w_k)..., cos(s t_i w_k)...]`, `w_k = 1e4^(-k/half)`.
pub fn time_embedding(t: &[f64], dim: usize, scale: f64) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((t.len(), dim));
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let w = (-(1e4f64).ln() * k as f64 / half as f64).exp();
            let a = scale * ti * w;
            out[[i, k]] = a.sin();
            out[[i, half + k]] = a.cos();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    arch: Arch,
    params: Vec<Mat>,
}

/// Tape handles of a net's parameters, in storage order.
pub struct ParamVars(pub Vec<Var>);

impl ScoreNet {
    /// Symmetric uniform fan-in initialization: every entry of a layer with
    /// `fan_in` inputs is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let fan_in = pair[0].0 as f64;
            let bound = 1.0 / fan_in.sqrt();
            for &(r, c) in pair {
                params.push(Mat::from_shape_fn((r, c), |_| rng.gen_range(-bound..=bound)));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let params = arch.param_shapes().into_iter().map(Mat::zeros).collect();
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Arch, params: Vec<Mat>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!("expected {} parameter arrays", shapes.len())));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if p.dim() != *s {
                return Err(Error::Shape(format!("param {i}: {:?} expected {s:?}", p.dim())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("param {i} is not finite")));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn check_inputs(&self, x: &Mat, t: &[f64], cond: Option<&Mat>) -> Result<()> {
        if x.ncols() != self.arch.in_dim {
            return Err(Error::Shape(format!("input has {} columns, net expects {}", x.ncols(), self.arch.in_dim)));
        }
        if t.len() != x.nrows() {
            return Err(Error::Shape(format!("{} times for {} rows", t.len(), x.nrows())));
        }
        match (cond, self.arch.cond_dim) {
            (None, 0) => Ok(()),
            (Some(c), d) if d > 0 && c.ncols() == d && c.nrows() == x.nrows() => Ok(()),
            (None, d) => Err(Error::Shape(format!("net expects a conditioning input of width {d}"))),
            (Some(c), d) => Err(Error::Shape(format!("conditioning input {:?} for cond_dim {d}", c.dim()))),
        }
    }

    /// Batched forward pass without recording a tape.
    pub fn forward(&self, x: &Mat, t: &[f64], cond: Option<&Mat>) -> Result<Mat> {
        self.check_inputs(x, t, cond)?;
        let mut parts = vec![x.view().to_owned()];
        if self.arch.time_embed_dim > 0 {
            parts.push(time_embedding(t, self.arch.time_embed_dim, self.arch.time_scale));
        }
        if let Some(c) = cond {
            let k = 2 * self.arch.n_layers();
            let mut h = c.dot(&self.params[k]) + &self.params[k + 1];
            h.mapv_inplace(silu);
            parts.push(h);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let mut h = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let n = self.arch.n_layers();
        for l in 0..n {
            h = h.dot(&self.params[2 * l]) + &self.params[2 * l + 1];
            if l + 1 < n {
                h.mapv_inplace(silu);
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l, what: "forward activation".into() });
            }
        }
        Ok(h)
    }

    /// Single-input forward pass.
    pub fn forward_one(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let xm = Mat::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        let cm = cond.map(|c| Mat::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        let out = self.forward(&xm, &[t], cm.as_ref())?;
        Ok(out.row(0).to_vec())
    }

    /// Register parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.param(p.clone())).collect())
    }

    fn first_input(&self, tape: &mut Tape, pv: &ParamVars, x: Var, t: &[f64], cond: Option<Var>) -> Result<Var> {
        let mut parts = vec![x];
        if self.arch.time_embed_dim > 0 {
            let e = time_embedding(t, self.arch.time_embed_dim, self.arch.time_scale);
            parts.push(tape.constant(e));
        }
        if let Some(c) = cond {
            let k = 2 * self.arch.n_layers();
            let z = tape.matmul(c, pv.0[k])?;
            let z = tape.add_bias(z, pv.0[k + 1])?;
            parts.push(tape.silu(z));
        }
        if parts.len() == 1 {
            return Ok(x);
        }
        tape.concat(&parts)
    }

    fn check_tape_inputs(&self, tape: &Tape, x: Var, t: &[f64], cond: Option<Var>) -> Result<()> {
        let xv = tape.value(x).clone();
        let cv = cond.map(|c| tape.value(c).clone());
        self.check_inputs(&xv, t, cv.as_ref())
    }

    /// Forward pass recorded on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, pv: &ParamVars, x: Var, t: &[f64], cond: Option<Var>) -> Result<Var> {
        Ok(self.forward_jvp_tape(tape, pv, x, &[], t, cond)?.0)
    }

    /// Forward pass plus input-directional derivatives, all on the tape.
    ///
    /// Each entry of `dirs` is a constant `n x in_dim` matrix of directions
    /// (one per row). Returns the output and, per direction, the derivative
    /// of the output along it. Time and conditioning inputs are held fixed.
    pub fn forward_jvp_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        dirs: &[Mat],
        t: &[f64],
        cond: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_tape_inputs(tape, x, t, cond)?;
        let n_rows = tape.value(x).nrows();
        let width0 = self.arch.first_width();
        let mut tangents = Vec::with_capacity(dirs.len());
        for d in dirs {
            if d.dim() != (n_rows, self.arch.in_dim) {
                return Err(Error::Shape(format!(
                    "direction {:?} for input {:?}",
                    d.dim(),
                    (n_rows, self.arch.in_dim)
                )));
            }
            let mut padded = Mat::zeros((n_rows, width0));
            padded.slice_mut(s![.., ..self.arch.in_dim]).assign(d);
            tangents.push(tape.constant(padded));
        }
        let mut h = self.first_input(tape, pv, x, t, cond)?;
        let n = self.arch.n_layers();
        for l in 0..n {
            let (w, b) = (pv.0[2 * l], pv.0[2 * l + 1]);
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            let mut next_t = Vec::with_capacity(tangents.len());
            for &dt in &tangents {
                next_t.push(tape.matmul(dt, w)?);
            }
            if l + 1 < n {
                h = tape.silu(z);
                if !tangents.is_empty() {
                    let sp = tape.silu_prime(z);
                    for dt in next_t.iter_mut() {
                        *dt = tape.mul(sp, *dt)?;
                    }
                }
            } else {
                h = z;
            }
            tangents = next_t;
            if tape.value(h).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l, what: "forward activation".into() });
            }
            for &dt in &tangents {
                if tape.value(dt).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLayer { layer: l, what: "input derivative".into() });
                }
            }
        }
        Ok((h, tangents))
    }

    /// Value and parameter gradient of a scalar loss built on the tape.
    pub fn loss_gradient<F>(&self, f: F) -> Result<(f64, Vec<Mat>)>
    where
        F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let out = f(&mut tape, &pv)?;
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::NonFiniteLayer { layer: self.arch.n_layers(), what: "loss".into() });
        }
        let grads = tape.backward(out)?;
        let g: Vec<Mat> = pv.0.iter().zip(&self.params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
        for (i, gi) in g.iter().enumerate() {
            if gi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i / 2, what: "gradient".into() });
            }
        }
        Ok((value, g))
    }
}

/// Stack rows into a matrix.
pub fn rows_to_mat(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]))
}

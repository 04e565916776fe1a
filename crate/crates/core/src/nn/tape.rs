//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Nodes hold `n x m` matrices; scalars are `1 x 1`. Only the operations the
//! losses in this crate need are provided. `SiluPrime` has its own adjoint,
//! so input-directional derivatives of a network built on the tape can be
//! differentiated again with respect to the parameters.

use crate::{Error, Result};
use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    AddConst(Var),
    Scale(Var, f64),
    Silu(Var),
    SiluPrime(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RowSum(Var),
    SumAll(Var),
    Square(Var),
    Exp(Var),
    LogFloor(Var, f64),
    LogSoftmaxBlocks(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    floor_hits: usize,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    adj: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `like` if `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

fn check_same(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of entries clamped by [`Tape::log_floor`] so far.
    pub fn floor_hits(&self) -> usize {
        self.floor_hits
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", va.dim(), vb.dim())));
        }
        let v = va.dot(vb);
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    /// `a + bias` with `bias` a `1 x m` row broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::Shape(format!("bias {:?} for {:?}", vb.dim(), va.dim())));
        }
        let v = va + vb;
        let g = self.g(a) || self.g(bias);
        Ok(self.push(v, Op::AddBias(a, bias), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let v = self.value(a) + self.value(b);
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let v = self.value(a) - self.value(b);
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let v = self.value(a) * self.value(b);
        let g = self.g(a) || self.g(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    /// Elementwise product with a constant of the same shape, or with an
    /// `n x 1` column broadcast across columns.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        let va = self.value(a);
        let ok = c.dim() == va.dim() || (c.ncols() == 1 && c.nrows() == va.nrows());
        if !ok {
            return Err(Error::Shape(format!("mul_const {:?} by {:?}", va.dim(), c.dim())));
        }
        let v = va * &c;
        let g = self.g(a);
        Ok(self.push(v, Op::MulConst(a, c), g))
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Result<Var> {
        check_same(self.value(a), c, "add_const")?;
        let v = self.value(a) + c;
        let g = self.g(a);
        Ok(self.push(v, Op::AddConst(a), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let g = self.g(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        let g = self.g(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn silu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu_prime);
        let g = self.g(a);
        self.push(v, Op::SiluPrime(a), g)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let n = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != n) {
            return Err(Error::Shape("concat row mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let g = parts.iter().any(|&p| self.g(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), g))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(Error::Shape(format!("slice {start}+{len} of {} columns", va.ncols())));
        }
        let v = va.slice(s![.., start..start + len]).to_owned();
        let g = self.g(a);
        Ok(self.push(v, Op::Slice(a, start), g))
    }

    /// Row sums as an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.g(a);
        self.push(v, Op::RowSum(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let g = self.g(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let g = self.g(a);
        self.push(v, Op::Square(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let g = self.g(a);
        self.push(v, Op::Exp(a), g)
    }

    /// `log(max(a, floor))`; entries at or below the floor are counted and
    /// receive no adjoint.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let mut hits = 0;
        let v = self.value(a).mapv(|x| {
            if x > floor {
                x.ln()
            } else {
                hits += 1;
                floor.ln()
            }
        });
        self.floor_hits += hits;
        let g = self.g(a);
        self.push(v, Op::LogFloor(a, floor), g)
    }

    /// Log-softmax over consecutive column blocks of width `block`.
    pub fn log_softmax_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let va = self.value(a);
        if block == 0 || va.ncols() % block != 0 {
            return Err(Error::Shape(format!("{} columns not divisible by {block}", va.ncols())));
        }
        let mut v = va.clone();
        for mut row in v.rows_mut() {
            for mut chunk in row.exact_chunks_mut(block) {
                let m = chunk.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = m + chunk.mapv(|x| (x - m).exp()).sum().ln();
                chunk.mapv_inplace(|x| x - lse);
            }
        }
        let g = self.g(a);
        Ok(self.push(v, Op::LogSoftmaxBlocks(a, block), g))
    }

    /// Adjoints of every node reachable from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).dim() != (1, 1) {
            return Err(Error::Shape("backward needs a 1 x 1 output".into()));
        }
        let mut adj: Vec<Option<Mat>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            let acc = |v: Var, d: Mat, adj: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(x) => *x += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut adj);
                    }
                    if self.g(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut adj);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.g(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut adj);
                    }
                    acc(*a, g, &mut adj);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut adj);
                    acc(*a, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g, &mut adj);
                    acc(*a, g, &mut adj);
                }
                Op::Mul(a, b) => {
                    if self.g(*b) {
                        acc(*b, &g * self.value(*a), &mut adj);
                    }
                    if self.g(*a) {
                        acc(*a, &g * self.value(*b), &mut adj);
                    }
                }
                Op::MulConst(a, c) => acc(*a, &g * c, &mut adj),
                Op::AddConst(a) => acc(*a, g, &mut adj),
                Op::Scale(a, s) => acc(*a, g * *s, &mut adj),
                Op::Silu(a) => {
                    let d = &g * &self.value(*a).mapv(silu_prime);
                    acc(*a, d, &mut adj)
                }
                Op::SiluPrime(a) => {
                    let d = &g * &self.value(*a).mapv(silu_second);
                    acc(*a, d, &mut adj)
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.g(*p) {
                            acc(*p, g.slice(s![.., start..start + w]).to_owned(), &mut adj);
                        }
                        start += w;
                    }
                }
                Op::Slice(a, start) => {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d, &mut adj)
                }
                Op::RowSum(a) => {
                    let va = self.value(*a);
                    let d = Mat::from_shape_fn(va.raw_dim(), |(r, _)| g[[r, 0]]);
                    acc(*a, d, &mut adj)
                }
                Op::SumAll(a) => {
                    let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(*a, d, &mut adj)
                }
                Op::Square(a) => {
                    let d = &g * &(self.value(*a) * 2.0);
                    acc(*a, d, &mut adj)
                }
                Op::Exp(a) => acc(*a, &g * &node.value, &mut adj),
                Op::LogFloor(a, floor) => {
                    let va = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(va, |dv, &x| *dv = if x > *floor { *dv / x } else { 0.0 });
                    acc(*a, d, &mut adj)
                }
                Op::LogSoftmaxBlocks(a, block) => {
                    let mut d = g;
                    for (mut drow, orow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        for (mut dc, oc) in drow.exact_chunks_mut(*block).into_iter().zip(orow.exact_chunks(*block)) {
                            let total = dc.sum();
                            dc.zip_mut_with(&oc, |dv, &lp| *dv -= lp.exp() * total);
                        }
                    }
                    acc(*a, d, &mut adj)
                }
            }
        }
        Ok(Grads { adj })
    }
}

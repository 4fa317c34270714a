//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in exact reverse order, once each.

use std::collections::BTreeMap;

use super::kernels::{self, axis_split, bilinear_taps, gemm, grid_dims, AxisTaps};
use super::{dims2, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ColumnNorms(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Bilinear {
        x: Var,
        rows: Vec<AxisTaps>,
        cols: Vec<AxisTaps>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Accumulated gradient of a parameter over every use on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    /// Inserts a parameter; gradients flow to it iff it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_with(p.value.clone(), Op::Param(id), p.trainable)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// `x · wᵀ + b` with `w` stored `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.value(row).numel() != d {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok(d)
    }

    /// Adds a length-`d` row to every row of `x` (last axis `d`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, row)?;
        let r = self.data(row).to_vec();
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + r[i % d]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a length-`d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, row)?;
        let r = self.data(row).to_vec();
        let data = self.data(x).iter().enumerate().map(|(i, v)| v * r[i % d]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::sqrt);
        self.push(t, Op::Sqrt(x), &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        self.push(t, Op::Powf(x, p), &[x])
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- normalisation ---------------------------------------------------

    /// Softmax along `axis`; see [`kernels::softmax`] for the `-inf` contract.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// LayerNorm over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(Error::invalid("layernorm", "empty normalisation axis"));
        }
        self.row_check("layernorm", x, gain)?;
        self.row_check("layernorm", x, bias)?;
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * s;
            }
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let out = xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + b[i % d]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Euclidean norm of each column of a `d×k` matrix, as `1×k`.
    pub fn column_norms(&mut self, x: Var) -> Result<Var> {
        let (d, k) = dims2("column_norms", self.value(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; k];
        for i in 0..d {
            for (j, o) in out.iter_mut().enumerate() {
                let v = src[i * k + j];
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let t = Tensor::new(vec![1, k], out)?;
        Ok(self.push(t, Op::ColumnNorms(x), &[x]))
    }

    // ---- reductions & layout ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(Error::invalid("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        Ok(self.push(t, Op::SliceCols(x, start, end), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(Error::invalid("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let t = Tensor::new(vec![end - start, c], self.data(x)[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows(x, start, end), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = dims2("concat_cols", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, c) = dims2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = dims2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Differentiable bilinear resampling of an `h×w×C` grid.
    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, _) = grid_dims("interpolate_bilinear", self.value(x))?;
        let t = kernels::interpolate_bilinear(self.value(x), out_h, out_w)?;
        let op = Op::Bilinear {
            x,
            rows: bilinear_taps(h, out_h),
            cols: bilinear_taps(w, out_w),
        };
        Ok(self.push(t, op, &[x]))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads, &mut params)?;
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }
}

fn propagate(
    nodes: &[Node],
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    params: &mut BTreeMap<ParamId, Tensor>,
) -> Result<()> {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let wants = |v: Var| nodes[v.0].requires_grad;
    let out = node.value.data();

    // Accumulates `f(j)` into parent `v` when it needs a gradient.
    macro_rules! each {
        ($v:expr, $f:expr) => {{
            let v: Var = $v;
            if wants(v) {
                let n = nodes[v.0].value.numel();
                let slot = acc(&mut grads[v.0], n);
                let f = $f;
                for j in 0..n {
                    slot[j] += f(j);
                }
            }
        }};
    }

    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => match params.get_mut(id) {
            Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                params.insert(*id, Tensor::new(node.value.shape().to_vec(), g.to_vec())?);
            }
        },
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if wants(*a) {
                // dA = dC · Bᵀ
                let slot = acc(&mut grads[a.0], m * k);
                gemm(m, n, k, g, false, val(*b), true, slot, 1.0);
            }
            if wants(*b) {
                // dB = Aᵀ · dC
                let slot = acc(&mut grads[b.0], k * n);
                gemm(k, m, n, val(*a), true, g, false, slot, 1.0);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[0];
            if wants(*a) {
                // dA = dC · B
                let slot = acc(&mut grads[a.0], m * k);
                gemm(m, n, k, g, false, val(*b), false, slot, 1.0);
            }
            if wants(*b) {
                // dB = dCᵀ · A
                let slot = acc(&mut grads[b.0], n * k);
                gemm(n, m, k, g, true, val(*a), false, slot, 1.0);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (shape(*a)[0], shape(*a)[1]);
            let gt = kernels::transpose(g, c, r);
            each!(*a, |j: usize| gt[j]);
        }
        Op::Add(a, b) => {
            each!(*a, |j: usize| g[j]);
            each!(*b, |j: usize| g[j]);
        }
        Op::Sub(a, b) => {
            each!(*a, |j: usize| g[j]);
            each!(*b, |j: usize| -g[j]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            each!(*a, |j: usize| g[j] * vb[j]);
            each!(*b, |j: usize| g[j] * va[j]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            each!(*a, |j: usize| g[j] / vb[j]);
            each!(*b, |j: usize| -g[j] * va[j] / (vb[j] * vb[j]));
        }
        Op::AddRow(x, row) => {
            each!(*x, |j: usize| g[j]);
            if wants(*row) {
                let d = nodes[row.0].value.numel();
                let slot = acc(&mut grads[row.0], d);
                for (j, gv) in g.iter().enumerate() {
                    slot[j % d] += gv;
                }
            }
        }
        Op::MulRow(x, row) => {
            let r = val(*row);
            let d = r.len();
            each!(*x, |j: usize| g[j] * r[j % d]);
            if wants(*row) {
                let xv = val(*x);
                let slot = acc(&mut grads[row.0], d);
                for (j, gv) in g.iter().enumerate() {
                    slot[j % d] += gv * xv[j];
                }
            }
        }
        Op::Scale(x, c) => each!(*x, |j: usize| g[j] * c),
        Op::AddScalar(x) => each!(*x, |j: usize| g[j]),
        Op::Sigmoid(x) => each!(*x, |j: usize| g[j] * out[j] * (1.0 - out[j])),
        Op::Gelu(x) => {
            let xv = val(*x);
            each!(*x, |j: usize| g[j] * gelu_grad(xv[j]))
        }
        Op::Relu(x) => {
            let xv = val(*x);
            each!(*x, |j: usize| if xv[j] > 0.0 { g[j] } else { 0.0 })
        }
        Op::Log(x) => {
            let xv = val(*x);
            each!(*x, |j: usize| g[j] / xv[j])
        }
        Op::Sqrt(x) => each!(*x, |j: usize| g[j] * 0.5 / out[j]),
        Op::Powf(x, p) => {
            let xv = val(*x);
            each!(*x, |j: usize| g[j] * p * xv[j].powf(p - 1.0))
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            each!(*x, |j: usize| if xv[j] < *lo || xv[j] > *hi { 0.0 } else { g[j] })
        }
        Op::Softmax(x, axis) => {
            if wants(*x) {
                let (outer, len, inner) = axis_split(shape(*x), *axis);
                let slot = acc(&mut grads[x.0], out.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let all_masked = (0..len).all(|j| val(*x)[idx(j)] == f64::NEG_INFINITY);
                        if all_masked {
                            continue;
                        }
                        let dot: f64 = (0..len).map(|j| out[idx(j)] * g[idx(j)]).sum();
                        for j in 0..len {
                            slot[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let d = gv.len();
            let rows = g.len() / d;
            if wants(*x) {
                let slot = acc(&mut grads[x.0], g.len());
                for r in 0..rows {
                    let gr = &g[r * d..][..d];
                    let xh = &xhat[r * d..][..d];
                    let dxh: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        slot[r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
            }
            if wants(*gain) {
                let slot = acc(&mut grads[gain.0], d);
                for (j, gvj) in g.iter().enumerate() {
                    slot[j % d] += gvj * xhat[j];
                }
            }
            if wants(*bias) {
                let slot = acc(&mut grads[bias.0], d);
                for (j, gvj) in g.iter().enumerate() {
                    slot[j % d] += gvj;
                }
            }
        }
        Op::ColumnNorms(x) => {
            let k = out.len();
            let xv = val(*x);
            each!(*x, |j: usize| {
                let c = j % k;
                if out[c] == 0.0 {
                    0.0
                } else {
                    g[c] * xv[j] / out[c]
                }
            })
        }
        Op::Sum(x) => each!(*x, |_| g[0]),
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel() as f64;
            each!(*x, |_| g[0] / n)
        }
        Op::Reshape(x) => each!(*x, |j: usize| g[j]),
        Op::SliceCols(x, start, end) => {
            let c = shape(*x)[1];
            let w = end - start;
            each!(*x, |j: usize| {
                let col = j % c;
                if col >= *start && col < *end {
                    g[(j / c) * w + col - start]
                } else {
                    0.0
                }
            })
        }
        Op::SliceRows(x, start, end) => {
            let c = shape(*x)[1];
            each!(*x, |j: usize| {
                let row = j / c;
                if row >= *start && row < *end {
                    g[j - start * c]
                } else {
                    0.0
                }
            })
        }
        Op::ConcatCols(parts) => {
            let total = out.len() / node.value.shape()[0];
            let mut offset = 0;
            for p in parts {
                let c = shape(*p)[1];
                let off = offset;
                each!(*p, |j: usize| g[(j / c) * total + off + j % c]);
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.numel();
                let off = offset;
                each!(*p, |j: usize| g[off + j]);
                offset += n;
            }
        }
        Op::Bilinear { x, rows, cols } => {
            if wants(*x) {
                let (_, w, c) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let out_w = cols.len();
                let slot = acc(&mut grads[x.0], nodes[x.0].value.numel());
                for (oy, ty) in rows.iter().enumerate() {
                    for (ox, tx) in cols.iter().enumerate() {
                        let src = &g[(oy * out_w + ox) * c..][..c];
                        for (sy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                            for (sx, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                                let wgt = wy * wx;
                                let dst = &mut slot[(sy * w + sx) * c..][..c];
                                dst.iter_mut().zip(src).for_each(|(d, v)| *d += wgt * v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

impl Tape {
    /// Per-pixel linear map of an `H×W×Cin` grid with a `Cin×Cout` weight.
    /// Computed as reshape → matmul → bias → reshape.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (h, wd, cin) = grid_dims("conv1x1", self.value(x))?;
        let (wcin, cout) = dims2("conv1x1", self.value(w))?;
        if wcin != cin {
            return Err(Error::shape("conv1x1", self.shape(x), self.shape(w)));
        }
        let flat = self.reshape(x, &[h * wd, cin])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_row(y, b)?;
        }
        self.reshape(y, &[h, wd, cout])
    }
}

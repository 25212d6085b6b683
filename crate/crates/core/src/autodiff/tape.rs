//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough state to
//! run its backward rule. Nodes are appended in evaluation order, so the node
//! index is already a topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        width: usize,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// A tape is confined to the thread that builds it; independent tapes can run
/// on separate threads over a shared [`ParamStore`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: BTreeMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Its gradient is tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the tape, once per tape. Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_shared(p.shared(), Op::Leaf, !p.is_frozen());
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of every trainable parameter placed on this tape, by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("add_bias", x)?;
        let bshape = self.shape(bias);
        if bshape.iter().product::<usize>() != n || bshape.len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// `x·w + b` with `w` stored as `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("transpose", x)?;
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim)
                    .map(|d| src[idx(d)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (src[idx(d)] - max).exp();
                    out[idx(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[idx(d)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
            rg,
        ))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalises the last axis to zero mean and unit (population) variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be finite and non-negative, got {eps}"),
            });
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var + eps <= 0.0 {
                return Err(TensorError::InvalidArgument {
                    op: "layer_norm",
                    reason: "zero variance row with eps = 0".into(),
                });
            }
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (same node) when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability must lie in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: xs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if width == 0 || start + width > cols {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of 0..{cols}", start + width),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows, width, out)?,
            Op::SliceCols {
                x,
                start,
                width,
                cols,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean squared difference, as a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every leaf that requires them. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
                continue;
            }
            self.backprop_node(i, &gi, &mut g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let buf = slot(g, a, m * k);
                    gemm(m, n, k, gi, false, val(b), true, buf, 1.0);
                }
                if wants(b) {
                    let buf = slot(g, b, k * n);
                    gemm(k, m, n, val(a), true, gi, false, buf, 1.0);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        axpy(slot(g, v, gi.len()), 1.0, gi);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    axpy(slot(g, a, gi.len()), 1.0, gi);
                }
                if wants(b) {
                    axpy(slot(g, b, gi.len()), -1.0, gi);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let other = val(b);
                    let buf = slot(g, a, gi.len());
                    for ((o, &gv), &w) in buf.iter_mut().zip(gi).zip(other) {
                        *o += gv * w;
                    }
                }
                if wants(b) {
                    let other = val(a);
                    let buf = slot(g, b, gi.len());
                    for ((o, &gv), &w) in buf.iter_mut().zip(gi).zip(other) {
                        *o += gv * w;
                    }
                }
            }
            &Op::Scale(x, s) => axpy(slot(g, x, gi.len()), s, gi),
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    axpy(slot(g, x, gi.len()), 1.0, gi);
                }
                if wants(bias) {
                    let n = nodes[bias.0].value.numel();
                    let buf = slot(g, bias, n);
                    for row in gi.chunks(n) {
                        axpy(buf, 1.0, row);
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                let buf = slot(g, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * cols + c] += gi[c * rows + r];
                    }
                }
            }
            &Op::Reshape(x) => axpy(slot(g, x, gi.len()), 1.0, gi),
            &Op::Softmax {
                x,
                outer,
                dim,
                inner,
            } => {
                let y = nodes[i].value.data();
                let buf = slot(g, x, gi.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + j;
                        let dot: f64 = (0..dim).map(|d| gi[idx(d)] * y[idx(d)]).sum();
                        for d in 0..dim {
                            buf[idx(d)] += y[idx(d)] * (gi[idx(d)] - dot);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xs = val(x);
                let buf = slot(g, x, gi.len());
                for ((o, &gv), &v) in buf.iter_mut().zip(gi).zip(xs) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gv * d;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.numel();
                let gain_v = val(*gain);
                if wants(*gain) {
                    let buf = slot(g, *gain, n);
                    for (row_g, row_h) in gi.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if wants(*bias) {
                    let buf = slot(g, *bias, n);
                    for row in gi.chunks(n) {
                        axpy(buf, 1.0, row);
                    }
                }
                if wants(*x) {
                    let buf = slot(g, *x, gi.len());
                    let mut gh = vec![0.0; n];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let row_g = &gi[r * n..(r + 1) * n];
                        let row_h = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            gh[j] = row_g[j] * gain_v[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh =
                            gh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            buf[r * n + j] += inv * (gh[j] - mean_gh - row_h[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let buf = slot(g, *x, gi.len());
                for ((o, &gv), &m) in buf.iter_mut().zip(gi).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if wants(v) {
                        let buf = slot(g, v, outer * w);
                        for o in 0..*outer {
                            let src = &gi[o * total + offset..o * total + offset + w];
                            axpy(&mut buf[o * w..(o + 1) * w], 1.0, src);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols {
                x,
                start,
                width,
                cols,
            } => {
                let rows = gi.len() / width;
                let buf = slot(g, x, rows * cols);
                for r in 0..rows {
                    axpy(
                        &mut buf[r * cols + start..r * cols + start + width],
                        1.0,
                        &gi[r * width..(r + 1) * width],
                    );
                }
            }
            &Op::Sum(x) => {
                let buf = slot(g, x, nodes[x.0].value.numel());
                buf.iter_mut().for_each(|o| *o += gi[0]);
            }
            &Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let buf = slot(g, x, n);
                let share = gi[0] / n as f64;
                buf.iter_mut().for_each(|o| *o += share);
            }
        }
    }
}

fn slot(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

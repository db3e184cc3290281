//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep.
//! All ops reduce in ascending index order; batched ops may fan out over
//! samples but combine per-sample partials serially, so results do not
//! depend on thread count.

use crate::error::{CmcError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    LogSumExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad_before: usize,
    pad_after: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Binary { op: BinaryOp, a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Unary { op: UnaryOp, a: Var },
    Reduce { kind: Reduction, a: Var, outer: usize, len: usize, inner: usize },
    Reshape { a: Var },
    Gather { a: Var, index: Vec<usize> },
    Concat { parts: Vec<Var> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<Vec<f64>> },
    ChannelBias { x: Var, b: Var, channels: usize, plane: usize },
    RowBias { x: Var, b: Var, cols: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mode: BnMode },
    AvgPool { x: Var, plane: usize },
    Upsample { x: Var, factor: usize, h: usize, w: usize },
    NormalizeRows { x: Var, norms: Vec<f64>, d: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// One forward/backward pass worth of recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(value: &Tensor, op: &'static str) -> Result<()> {
    if value.all_finite() {
        Ok(())
    } else {
        Err(CmcError::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable input; its gradient is readable after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "leaf")?;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
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

    /// Gradient of the last backward target w.r.t. `v`, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CmcError::Dimension(format!(
                "matmul of {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let bt = transpose_raw(self.value(b).data(), k, n);
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(row, &bt[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(CmcError::Dimension(format!("transpose of rank-{} tensor", s.len())));
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let value = Tensor::new(vec![s[1], s[0]], data)?;
        self.push(value, Op::Transpose { a, rows: s[0], cols: s[1] }, &[a], "transpose")
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if sa == sb || nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else {
            return Err(CmcError::Dimension(format!(
                "elementwise {:?} of {:?} and {:?}",
                op, sa, sb
            )));
        };
        let n: usize = out_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let at = |i: usize| if na == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if nb == 1 { bv[0] } else { bv[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => at(i) + bt(i),
                BinaryOp::Sub => at(i) - bt(i),
                BinaryOp::Mul => at(i) * bt(i),
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Binary { op, a, b }, &[a, b], "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * factor).collect(),
        )?;
        self.push(value, Op::Scale { a, factor }, &[a], "scale")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let src = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = src.data().iter().find(|&&x| x <= 0.0) {
                return Err(CmcError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Relu => |x| x.max(0.0),
            UnaryOp::Sigmoid => sigmoid,
        };
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())?;
        let name = match op {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
        };
        self.push(value, Op::Unary { op, a }, &[a], name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces `axis` away. A rank-1 input reduces to shape `[1]`.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(CmcError::Dimension(format!(
                "reduction axis {axis} out of range for {:?}",
                shape
            )));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(CmcError::Domain("empty reduction axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                out[o * inner + i] = match kind {
                    Reduction::Sum => (0..len).map(at).sum(),
                    Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduction::LogSumExp => {
                        let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                        mx + (0..len).map(|l| (at(l) - mx).exp()).sum::<f64>().ln()
                    }
                };
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Reduce { kind, a, outer, len, inner }, &[a], "reduce")
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(Reduction::Sum, flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(Reduction::Mean, flat, 0)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a }, &[a], "reshape")
    }

    /// `out.flat[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(CmcError::Dimension(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::Gather { a, index }, &[a], "gather")
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CmcError::Dimension("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(CmcError::Dimension(format!(
                    "concat of {:?} with trailing shape {:?}",
                    s, tail
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, parts, "concat")
    }

    // ---- network layers -------------------------------------------------

    /// Cross-correlation of `x` (`[C,H,W]` or `[B,C,H,W]`) with
    /// `kernels` (`[O,C,k,k]`, `k` odd).
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, kernels, stride, pad, pad)
    }

    /// [`Graph::conv2d`] with separate zero padding before (top/left) and
    /// after (bottom/right) each spatial axis.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        kernels: Var,
        stride: usize,
        pad_before: usize,
        pad_after: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(kernels).to_vec();
        let batched = match xs.len() {
            3 => false,
            4 => true,
            r => return Err(CmcError::Dimension(format!("conv2d input of rank {r}"))),
        };
        let (batch, c_in, h, w) = if batched {
            (xs[0], xs[1], xs[2], xs[3])
        } else {
            (1, xs[0], xs[1], xs[2])
        };
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(CmcError::Dimension(format!(
                "conv2d kernels {:?} for input {:?}",
                ws, xs
            )));
        }
        let k = ws[2];
        if k.is_multiple_of(2) {
            return Err(CmcError::Geometry(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(CmcError::Geometry("stride must be positive".into()));
        }
        let out_extent = |e: usize| -> Result<usize> {
            let span = e + pad_before + pad_after;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(CmcError::Geometry(format!(
                    "extent {e} with kernel {k}, stride {stride}, padding ({pad_before},{pad_after}) gives a non-integral output"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out: ws[0],
            k,
            stride,
            pad_before,
            pad_after,
            h_out: out_extent(h)?,
            w_out: out_extent(w)?,
        };
        let xv = self.value(x).data();
        let wv = self.value(kernels).data();
        let in_len = c_in * h * w;
        let out_len = geom.c_out * geom.positions();
        let cols: Vec<Vec<f64>> =
            par::map_indexed(batch, |b| im2col(&xv[b * in_len..(b + 1) * in_len], &geom));
        let mut out = vec![0.0; batch * out_len];
        par::for_each_chunk_mut(&mut out, out_len, |b, dst| {
            conv_forward(&cols[b], wv, &geom, dst);
        });
        let shape = if batched {
            vec![batch, geom.c_out, geom.h_out, geom.w_out]
        } else {
            vec![geom.c_out, geom.h_out, geom.w_out]
        };
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Conv2d { x, w: kernels, geom, cols }, &[x, kernels], "conv2d")
    }

    /// Adds `bias[c]` to every pixel of channel `c` (`[C,H,W]` or `[B,C,H,W]`).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c_axis = match xs.len() {
            3 => 0,
            4 => 1,
            r => return Err(CmcError::Dimension(format!("channel bias on rank {r}"))),
        };
        let channels = xs[c_axis];
        if self.value(bias).numel() != channels {
            return Err(CmcError::Dimension(format!(
                "bias of {:?} for {channels} channels",
                self.shape(bias)
            )));
        }
        let plane: usize = xs[c_axis + 1..].iter().product();
        let bv = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / plane) % channels])
            .collect();
        let value = Tensor::new(xs, data)?;
        self.push(value, Op::ChannelBias { x, b: bias, channels, plane }, &[x, bias], "channel_bias")
    }

    /// Adds `bias[j]` to column `j` of a `[B,D]` matrix.
    pub fn row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.value(bias).numel() != xs[1] {
            return Err(CmcError::Dimension(format!(
                "row bias {:?} for {:?}",
                self.shape(bias),
                xs
            )));
        }
        let cols = xs[1];
        let bv = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % cols])
            .collect();
        let value = Tensor::new(xs, data)?;
        self.push(value, Op::RowBias { x, b: bias, cols }, &[x, bias], "row_bias")
    }

    /// `x·w + b` for `x:[B,In]`, `w:[In,Out]`, `b:[Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.row_bias(y, b)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(CmcError::Dimension(format!("batchnorm on {:?}", xs)));
        }
        let (b, d) = (xs[0], xs[1]);
        if self.value(gamma).numel() != d
            || self.value(beta).numel() != d
            || state.running_mean.len() != d
        {
            return Err(CmcError::Dimension(format!(
                "batchnorm parameters do not match {d} features"
            )));
        }
        if mode == BnMode::Train && b < 2 {
            return Err(CmcError::DegenerateBatch(format!(
                "batchnorm in train mode needs at least 2 rows, got {b}"
            )));
        }
        let xv = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for j in 0..d {
                    let m = (0..b).map(|i| xv[i * d + j]).sum::<f64>() / b as f64;
                    mean[j] = m;
                    var[j] = (0..b).map(|i| (xv[i * d + j] - m).powi(2)).sum::<f64>() / b as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gv[j] * h + bv[j];
            }
        }
        if mode == BnMode::Train {
            let m = state.momentum;
            let unbias = b as f64 / (b as f64 - 1.0);
            for j in 0..d {
                state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j] * unbias;
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode },
            &[x, gamma, beta],
            "batchnorm",
        )
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(CmcError::Dimension(format!("global pool on {:?}", xs)));
        }
        let plane = xs[2] * xs[3];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.push(value, Op::AvgPool { x, plane }, &[x], "global_avg_pool")
    }

    /// Nearest-neighbour upsampling of `[B,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 {
            return Err(CmcError::Dimension(format!("upsample of {:?} by {factor}", xs)));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let planes = xs[0] * xs[1];
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = src[p * h * w + (y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        self.push(value, Op::Upsample { x, factor, h, w }, &[x], "upsample_nearest")
    }

    /// Scales each row of `[N,D]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(CmcError::Dimension(format!("row normalisation of {:?}", xs)));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(src.len());
        for (r, row) in src.chunks(d).enumerate() {
            let n = dot(row, row).sqrt();
            if n <= 1e-12 {
                return Err(CmcError::DegenerateEmbedding(format!("row {r} has zero norm")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::NormalizeRows { x, norms, d }, &[x], "normalize_rows")
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.numel() {
            return Err(CmcError::Dimension(format!(
                "bce logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        let n = lv.numel() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &y)| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        self.push(
            value,
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            &[logits],
            "bce_with_logits",
        )
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the single-element `target`. A graph supports one
    /// backward pass.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.backward_done {
            return Err(CmcError::Graph(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.value(target).numel() != 1 {
            return Err(CmcError::Dimension(format!(
                "backward target must be a single element, got {:?}",
                self.shape(target)
            )));
        }
        self.backward_done = true;
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        self.nodes[target.0].grad = Some(vec![1.0]);
        for id in (0..=target.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &upstream);
            self.nodes[id].grad = Some(upstream);
            for (input, g) in contributions {
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CmcError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = dot(&up[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            axpy(av[i * k + p], &up[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Transpose { a, rows, cols } => {
                res.push((*a, transpose_raw(up, *cols, *rows)));
            }
            Op::Binary { op, a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (na, nb) = (av.len(), bv.len());
                let at = |i: usize| if na == 1 { av[0] } else { av[i] };
                let bt = |i: usize| if nb == 1 { bv[0] } else { bv[i] };
                let fold = |full: Vec<f64>, n: usize| -> Vec<f64> {
                    if n == 1 && full.len() != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                if self.needs(*a) {
                    let g: Vec<f64> = match op {
                        BinaryOp::Add | BinaryOp::Sub => up.to_vec(),
                        BinaryOp::Mul => up.iter().enumerate().map(|(i, u)| u * bt(i)).collect(),
                    };
                    res.push((*a, fold(g, na)));
                }
                if self.needs(*b) {
                    let g: Vec<f64> = match op {
                        BinaryOp::Add => up.to_vec(),
                        BinaryOp::Sub => up.iter().map(|u| -u).collect(),
                        BinaryOp::Mul => up.iter().enumerate().map(|(i, u)| u * at(i)).collect(),
                    };
                    res.push((*b, fold(g, nb)));
                }
            }
            Op::Scale { a, factor } => {
                res.push((*a, up.iter().map(|u| u * factor).collect()));
            }
            Op::Unary { op, a } => {
                let xv = self.value(*a).data();
                let g: Vec<f64> = match op {
                    UnaryOp::Exp => up.iter().zip(out).map(|(u, y)| u * y).collect(),
                    UnaryOp::Log => up.iter().zip(xv).map(|(u, x)| u / x).collect(),
                    UnaryOp::Relu => up
                        .iter()
                        .zip(xv)
                        .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => up.iter().zip(out).map(|(u, y)| u * y * (1.0 - y)).collect(),
                };
                res.push((*a, g));
            }
            Op::Reduce { kind, a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let xv = self.value(*a).data();
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let u = up[o * inner + i];
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            g[idx] = match kind {
                                Reduction::Sum => u,
                                Reduction::Mean => u / len as f64,
                                Reduction::LogSumExp => u * (xv[idx] - out[o * inner + i]).exp(),
                            };
                        }
                    }
                }
                res.push((*a, g));
            }
            Op::Reshape { a } => res.push((*a, up.to_vec())),
            Op::Gather { a, index } => {
                let mut g = vec![0.0; self.value(*a).numel()];
                for (u, &i) in up.iter().zip(index) {
                    g[i] += u;
                }
                res.push((*a, g));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        res.push((p, up[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let g = *geom;
                let wv = self.value(*w).data();
                let out_len = g.c_out * g.positions();
                let in_len = g.c_in * g.h * g.w;
                if self.needs(*w) {
                    let partials: Vec<Vec<f64>> = par::map_indexed(g.batch, |b| {
                        conv_weight_grad(&cols[b], &up[b * out_len..(b + 1) * out_len], &g)
                    });
                    let mut gw = vec![0.0; wv.len()];
                    for p in &partials {
                        gw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                    }
                    res.push((*w, gw));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.batch * in_len];
                    par::for_each_chunk_mut(&mut gx, in_len, |b, dst| {
                        conv_input_grad(&up[b * out_len..(b + 1) * out_len], wv, &g, dst);
                    });
                    res.push((*x, gx));
                }
            }
            Op::ChannelBias { x, b, channels, plane } => {
                if self.needs(*b) {
                    let mut gb = vec![0.0; *channels];
                    for (i, u) in up.iter().enumerate() {
                        gb[(i / plane) % channels] += u;
                    }
                    res.push((*b, gb));
                }
                if self.needs(*x) {
                    res.push((*x, up.to_vec()));
                }
            }
            Op::RowBias { x, b, cols } => {
                if self.needs(*b) {
                    let mut gb = vec![0.0; *cols];
                    for (i, u) in up.iter().enumerate() {
                        gb[i % cols] += u;
                    }
                    res.push((*b, gb));
                }
                if self.needs(*x) {
                    res.push((*x, up.to_vec()));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                let d = inv_std.len();
                let rows = up.len() / d;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..rows {
                    for j in 0..d {
                        dgamma[j] += up[i * d + j] * xhat[i * d + j];
                        dbeta[j] += up[i * d + j];
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * d];
                    match mode {
                        BnMode::Train => {
                            let nb = rows as f64;
                            for j in 0..d {
                                // dx̂ = dy·γ; sums over the batch reuse dbeta/dgamma
                                let sum_dxhat = dbeta[j] * gv[j];
                                let sum_dxhat_xhat = dgamma[j] * gv[j];
                                for i in 0..rows {
                                    let dxh = up[i * d + j] * gv[j];
                                    gx[i * d + j] = inv_std[j] / nb
                                        * (nb * dxh - sum_dxhat - xhat[i * d + j] * sum_dxhat_xhat);
                                }
                            }
                        }
                        BnMode::Eval => {
                            for i in 0..rows {
                                for j in 0..d {
                                    gx[i * d + j] = up[i * d + j] * gv[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    res.push((*beta, dbeta));
                }
            }
            Op::AvgPool { x, plane } => {
                let mut g = Vec::with_capacity(up.len() * plane);
                for u in up {
                    g.extend(std::iter::repeat_n(u / *plane as f64, *plane));
                }
                res.push((*x, g));
            }
            Op::Upsample { x, factor, h, w } => {
                let (h, w, f) = (*h, *w, *factor);
                let (ho, wo) = (h * f, w * f);
                let planes = up.len() / (ho * wo);
                let mut g = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            g[p * h * w + (y / f) * w + xx / f] += up[p * ho * wo + y * wo + xx];
                        }
                    }
                }
                res.push((*x, g));
            }
            Op::NormalizeRows { x, norms, d } => {
                let mut g = Vec::with_capacity(up.len());
                for (r, n) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let u = &up[r * d..(r + 1) * d];
                    let yu = dot(y, u);
                    g.extend(y.iter().zip(u).map(|(yi, ui)| (ui - yi * yu) / n));
                }
                res.push((*x, g));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = up[0] / lv.len() as f64;
                let g = lv
                    .iter()
                    .zip(targets)
                    .map(|(&l, &y)| (sigmoid(l) - y) * scale)
                    .collect();
                res.push((*logits, g));
            }
        }
        res
    }
}

fn transpose_raw(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// One row per output position, each holding the `C·k·k` receptive field.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kl = g.patch_len();
    let mut col = vec![0.0; g.positions() * kl];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &mut col[(oy * g.w_out + ox) * kl..][..kl];
            let mut idx = 0;
            for c in 0..g.c_in {
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad_before as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad_before as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            row[idx] = x[c * g.h * g.w + iy as usize * g.w + ix as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    col
}

fn conv_forward(col: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let kl = g.patch_len();
    let np = g.positions();
    for o in 0..g.c_out {
        let wo = &w[o * kl..(o + 1) * kl];
        for p in 0..np {
            out[o * np + p] = dot(wo, &col[p * kl..(p + 1) * kl]);
        }
    }
}

fn conv_weight_grad(col: &[f64], up: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kl = g.patch_len();
    let np = g.positions();
    let mut gw = vec![0.0; g.c_out * kl];
    for o in 0..g.c_out {
        let dst = &mut gw[o * kl..(o + 1) * kl];
        for p in 0..np {
            let u = up[o * np + p];
            if u != 0.0 {
                axpy(u, &col[p * kl..(p + 1) * kl], dst);
            }
        }
    }
    gw
}

fn conv_input_grad(up: &[f64], w: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let kl = g.patch_len();
    let np = g.positions();
    let mut dcol = vec![0.0; kl];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let p = oy * g.w_out + ox;
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..g.c_out {
                let u = up[o * np + p];
                if u != 0.0 {
                    axpy(u, &w[o * kl..(o + 1) * kl], &mut dcol);
                }
            }
            let mut idx = 0;
            for c in 0..g.c_in {
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad_before as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad_before as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            gx[c * g.h * g.w + iy as usize * g.w + ix as usize] += dcol[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

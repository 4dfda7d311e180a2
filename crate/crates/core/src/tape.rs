//! Eager reverse-mode differentiation.
//!
//! Every primitive executes immediately and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse, so the tape order is a
//! valid topological order by construction.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{broadcast_shapes, broadcast_strides, strides, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable primitives, used in diagnostics and for
/// adjoint fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Matmul,
    Linear,
    Conv2d,
    LayerNorm,
    Softmax,
    Gelu,
    Relu,
    LeakyRelu,
    Sigmoid,
    Abs,
    Ln,
    Sum,
    Mean,
    MeanAxes,
    Concat,
    Reshape,
    Permute,
    Slice,
    Pad,
    Roll,
    Gather,
}

impl Primitive {
    pub const ALL: [Primitive; 26] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::Matmul,
        Primitive::Linear,
        Primitive::Conv2d,
        Primitive::LayerNorm,
        Primitive::Softmax,
        Primitive::Gelu,
        Primitive::Relu,
        Primitive::LeakyRelu,
        Primitive::Sigmoid,
        Primitive::Abs,
        Primitive::Ln,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::MeanAxes,
        Primitive::Concat,
        Primitive::Reshape,
        Primitive::Permute,
        Primitive::Slice,
        Primitive::Pad,
        Primitive::Roll,
        Primitive::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::Matmul => "matmul",
            Primitive::Linear => "linear",
            Primitive::Conv2d => "conv2d",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::Gelu => "gelu",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Abs => "abs",
            Primitive::Ln => "ln",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MeanAxes => "mean_axes",
            Primitive::Concat => "concat",
            Primitive::Reshape => "reshape",
            Primitive::Permute => "permute",
            Primitive::Slice => "slice",
            Primitive::Pad => "pad",
            Primitive::Roll => "roll",
            Primitive::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }
}

/// Stride, dilation and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with the padding that preserves spatial size for a kernel
    /// of extent `k` at the given dilation.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeometry },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    MeanAxes { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Roll { x: Var, axis: usize, shift: usize },
    Gather { table: Var, indices: Arc<Vec<usize>> },
}

impl<T> Op<T> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Matmul(..) => Primitive::Matmul,
            Op::Linear { .. } => Primitive::Linear,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Gelu(..) => Primitive::Gelu,
            Op::Relu(..) => Primitive::Relu,
            Op::LeakyRelu(..) => Primitive::LeakyRelu,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Abs(..) => Primitive::Abs,
            Op::Ln(..) => Primitive::Ln,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::MeanAxes { .. } => Primitive::MeanAxes,
            Op::Concat { .. } => Primitive::Concat,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Permute { .. } => Primitive::Permute,
            Op::Slice { .. } => Primitive::Slice,
            Op::Pad { .. } => Primitive::Pad,
            Op::Roll { .. } => Primitive::Roll,
            Op::Gather { .. } => Primitive::Gather,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Record of executed primitives for one forward pass.
///
/// A tape is confined to one thread; independent tapes may be used
/// concurrently.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<Primitive>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Fails any primitive whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Test hook: scales the adjoint of `primitive` by 1.25 so gradient
    /// verification can be shown to catch a wrong backward rule.
    pub fn with_adjoint_fault(mut self, primitive: Option<Primitive>) -> Self {
        self.fault = primitive;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.record(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.record(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                primitive: op.primitive().name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.record(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            broadcast_shapes(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![T::zero(); n];
            kernels::broadcast_walk(
                &out_shape,
                &broadcast_strides(&sa, &out_shape),
                &broadcast_strides(&sb, &out_shape),
                |o, ia, ib| out[o] = f(da[ia], db[ib]),
            );
            out
        };
        self.push(Tensor::new(out_shape, data)?, op, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::AddScalar(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, op, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        self.unary(
            x,
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu(x, s),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.data(x).iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("ln of non-positive value {v}")));
        }
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: T = d.iter().copied().sum();
        let m = s / T::of(d.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Contract(format!(
                "mean_axes: axes {axes:?} out of range for shape {shape:?}"
            )));
        }
        let mut out_shape = shape.clone();
        let mut count = 1;
        for &a in axes {
            count *= shape[a];
            out_shape[a] = 1;
        }
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let so = broadcast_strides(&out_shape, &shape);
        let d = self.data(x);
        kernels::broadcast_walk(&shape, &strides(&shape), &so, |_, ix, io| out[io] += d[ix]);
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(out_shape, out)?;
        self.push(
            t,
            Op::MeanAxes {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    // ---------------------------------------------------------------- contractions

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); plan.batches() * m * n];
        let run = |(i, c): (usize, &mut [T])| {
            let (oa, ob) = plan.offsets[i];
            kernels::gemm(m, k, n, &da[oa..oa + m * k], &db[ob..ob + k * n], c);
        };
        if rayon::current_num_threads() > 1 && plan.batches() > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(run);
        } else {
            out.chunks_mut(m * n).enumerate().for_each(run);
        }
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        self.push(t, Op::Matmul(a, b), &[a, b])
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (fan_in, fan_out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = match b {
            Some(b) => self.data(b).repeat(rows),
            None => vec![T::zero(); rows * fan_out],
        };
        kernels::gemm(rows, fan_in, fan_out, self.data(x), self.data(w), &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let t = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D cross-correlation of NHWC input `x[B,H,W,Cin]` with kernel
    /// `k[kh,kw,Cin,Cout]`, plus an optional bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} must have odd extents")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Config("conv2d stride and dilation must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", &sk, self.shape(b)));
            }
        }
        let extent = |size: usize, kern: usize| -> Result<usize> {
            let span = spec.dilation * (kern - 1) + 1;
            let padded = size + 2 * spec.padding;
            if padded < span {
                return Err(Error::Config(format!(
                    "conv2d: input extent {size} with padding {} is smaller than the dilated kernel span {span}",
                    spec.padding
                )));
            }
            Ok((padded - span) / spec.stride + 1)
        };
        let geom = ConvGeometry {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            cin: sx[3],
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            out_h: extent(sx[1], kh)?,
            out_w: extent(sx[2], kw)?,
        };
        let rows = geom.rows();
        let mut out = match b {
            Some(b) => self.data(b).repeat(rows),
            None => vec![T::zero(); rows * cout],
        };
        let cols = kernels::im2col(&geom, self.data(x));
        kernels::gemm(rows, geom.patch_len(), cout, &cols, self.data(k), &mut out);
        drop(cols);
        let t = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, cout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(k), b].into_iter().flatten().collect();
        self.push(t, Op::Conv2d { x, k, b, geom }, &inputs)
    }

    // ---------------------------------------------------------------- normalisation

    /// Layer normalisation over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm affine", &sx, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(sx, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where entries with `mask == false` are
    /// treated as `-inf` logits and receive exactly zero probability.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("softmax", &sx, &[]))?;
        let xd = self.data(x);
        if let Some(m) = mask {
            if m.len() != xd.len() {
                return Err(Error::Contract(format!(
                    "softmax mask has {} entries for a tensor of {}",
                    m.len(),
                    xd.len()
                )));
            }
        }
        let mut out = vec![T::zero(); xd.len()];
        for (r, (row, orow)) in xd.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let valid = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!(
                    "softmax row {r} has no unmasked entries"
                )));
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            let inv = T::one() / total;
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(sx, out)?;
        self.push(t, Op::Softmax(x), &[x])
    }

    // ---------------------------------------------------------------- data movement

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of the axes of {sx:?}"
            )));
        }
        let data = kernels::permute(&sx, self.data(x), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let run = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * run..(o + 1) * run]);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Entries `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} of axis {axis} out of range for {sx:?}",
                start + len
            )));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Slice { x, axis, start }, &[x])
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Contract(format!("pad axis {axis} out of range for {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let n_out = sx[axis] + before + after;
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * n_out * inner];
        for o in 0..outer {
            let src = &d[o * sx[axis] * inner..(o + 1) * sx[axis] * inner];
            let dst = (o * n_out + before) * inner;
            out[dst..dst + src.len()].copy_from_slice(src);
        }
        let mut shape = sx;
        shape[axis] = n_out;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Pad { x, axis, before }, &[x])
    }

    /// Cyclic shift along `axis`: output index `(i + shift) mod n` receives
    /// input index `i`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Contract(format!("roll axis {axis} out of range for {sx:?}")));
        }
        let n = sx[axis];
        let s = shift.rem_euclid(n.max(1) as isize) as usize;
        let data = roll_data(&sx, self.data(x), axis, s);
        let t = Tensor::new(sx, data)?;
        self.push(t, Op::Roll { x, axis, shift: s }, &[x])
    }

    /// Row lookup along axis 0: `out[i, ..] = table[indices[i], ..]`.
    pub fn gather(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.is_empty() {
            return Err(Error::shape("gather", &st, &[]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for table {st:?}"
            )));
        }
        let row: usize = st[1..].iter().product();
        let d = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices.iter() {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = st;
        shape[0] = indices.len();
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Gather { table, indices }, &[table])
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding dLoss/dLeaf into the
    /// gradient buffer of every differentiable leaf it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            let mut contribs = self.adjoint(i, &g)?;
            if self.fault == Some(self.nodes[i].op.primitive()) {
                let k = T::of(1.25);
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|v| *v *= k);
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sums a gradient over the broadcast axes of `out_shape` down to the
    /// shape of operand `v`.
    fn unbroadcast(&self, v: Var, out_shape: &[usize], g: &[T], scale: Option<&[T]>, scale_var: Option<Var>) -> Vec<T> {
        let sv = self.shape(v);
        let mut acc = vec![T::zero(); self.value(v).numel()];
        if sv == out_shape && scale.is_none() {
            acc.copy_from_slice(g);
            return acc;
        }
        let s_own = broadcast_strides(sv, out_shape);
        match (scale, scale_var) {
            (Some(other), Some(ov)) if sv == out_shape && self.shape(ov) == out_shape => {
                acc.iter_mut()
                    .zip(g.iter().zip(other))
                    .for_each(|(a, (&gv, &o))| *a = gv * o);
            }
            (Some(other), Some(ov)) => {
                let s_other = broadcast_strides(self.shape(ov), out_shape);
                kernels::broadcast_walk(out_shape, &s_own, &s_other, |o, iv, io| {
                    acc[iv] += g[o] * other[io]
                });
            }
            _ => {
                kernels::broadcast_walk(out_shape, &s_own, &s_own, |o, iv, _| acc[iv] += g[o]);
            }
        }
        acc
    }

    fn adjoint(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, self.unbroadcast(*a, out_shape, g, None, None)));
                }
                if self.wants(*b) {
                    out.push((*b, self.unbroadcast(*b, out_shape, g, None, None)));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, self.unbroadcast(*a, out_shape, g, None, None)));
                }
                if self.wants(*b) {
                    let mut gb = self.unbroadcast(*b, out_shape, g, None, None);
                    gb.iter_mut().for_each(|v| *v = -*v);
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, self.unbroadcast(*a, out_shape, g, Some(self.data(*b)), Some(*b))));
                }
                if self.wants(*b) {
                    out.push((*b, self.unbroadcast(*b, out_shape, g, Some(self.data(*a)), Some(*a))));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::Matmul(a, b) => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b))?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut full = vec![T::zero(); plan.batches() * m * k];
                    let run = |(bi, c): (usize, &mut [T])| {
                        let ob = plan.offsets[bi].1;
                        kernels::gemm_t(m, n, k, &g[bi * m * n..(bi + 1) * m * n], false, &db[ob..ob + k * n], true, c);
                    };
                    if rayon::current_num_threads() > 1 {
                        full.par_chunks_mut(m * k).enumerate().for_each(run);
                    } else {
                        full.chunks_mut(m * k).enumerate().for_each(run);
                    }
                    out.push((*a, plan.reduce(&full, m * k, true, self.value(*a).numel())));
                }
                if self.wants(*b) {
                    let mut full = vec![T::zero(); plan.batches() * k * n];
                    let run = |(bi, c): (usize, &mut [T])| {
                        let oa = plan.offsets[bi].0;
                        kernels::gemm_t(k, m, n, &da[oa..oa + m * k], true, &g[bi * m * n..(bi + 1) * m * n], false, c);
                    };
                    if rayon::current_num_threads() > 1 {
                        full.par_chunks_mut(k * n).enumerate().for_each(run);
                    } else {
                        full.chunks_mut(k * n).enumerate().for_each(run);
                    }
                    out.push((*b, plan.reduce(&full, k * n, false, self.value(*b).numel())));
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fan_in, fan_out) = (sw[0], sw[1]);
                let rows = g.len() / fan_out;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * fan_in];
                    kernels::gemm_t(rows, fan_out, fan_in, g, false, self.data(*w), true, &mut gx);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); fan_in * fan_out];
                    kernels::gemm_t(fan_in, rows, fan_out, self.data(*x), true, g, false, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, column_sums(g, fan_out)));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let cout = self.shape(*k)[3];
                let (rows, plen) = (geom.rows(), geom.patch_len());
                if self.wants(*k) {
                    let cols = kernels::im2col(geom, self.data(*x));
                    let mut gk = vec![T::zero(); plen * cout];
                    kernels::gemm_t(plen, rows, cout, &cols, true, g, false, &mut gk);
                    out.push((*k, gk));
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); rows * plen];
                    kernels::gemm_t(rows, cout, plen, g, false, self.data(*k), true, &mut gcols);
                    out.push((*x, kernels::col2im(geom, gcols)));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, column_sums(g, cout)));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                if self.wants(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..g.len() / d {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dhh *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    let prod: Vec<T> = g.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    out.push((*gamma, column_sums(&prod, d)));
                }
                if self.wants(*beta) {
                    out.push((*beta, column_sums(g, d)));
                }
            }
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        xr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three_a = T::of(3.0 * GELU_A);
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = c * (T::one() + three_a * v * v);
                        gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * dt)
                    })
                    .collect();
                out.push((*x, gx));
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, gx));
            }
            Op::LeakyRelu(x, s) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *s })
                    .collect();
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                out.push((*x, gx));
            }
            Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, gx));
            }
            Op::Ln(x) => {
                let gx = g.iter().zip(self.data(*x)).map(|(&gv, &v)| gv / v).collect();
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::MeanAxes { x, axes } => {
                let sx = self.shape(*x);
                let count: usize = axes.iter().map(|&a| sx[a]).product();
                let inv = T::one() / T::of(count as f64);
                let so = broadcast_strides(out_shape, sx);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                kernels::broadcast_walk(sx, &strides(sx), &so, |_, ix, io| gx[ix] = g[io] * inv);
                out.push((*x, gx));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let run = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * run);
                        for o in 0..outer {
                            let base = o * out_shape[*axis] * inner + offset;
                            gv.extend_from_slice(&g[base..base + run]);
                        }
                        out.push((v, gv));
                    }
                    offset += run;
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                out.push((*x, kernels::permute(out_shape, g, &inv)));
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Pad { x, axis, before } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let n_out = out_shape[*axis];
                let run = sx[*axis] * inner;
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for o in 0..outer {
                    let src = (o * n_out + before) * inner;
                    gx.extend_from_slice(&g[src..src + run]);
                }
                out.push((*x, gx));
            }
            Op::Roll { x, axis, shift } => {
                let n = out_shape[*axis];
                let back = (n - shift % n.max(1)) % n.max(1);
                out.push((*x, roll_data(out_shape, g, *axis, back)));
            }
            Op::Gather { table, indices } => {
                let st = self.shape(*table);
                let row: usize = st[1..].iter().product();
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (o, &idx) in indices.iter().enumerate() {
                    for (d, &s) in gt[idx * row..(idx + 1) * row].iter_mut().zip(&g[o * row..(o + 1) * row]) {
                        *d += s;
                    }
                }
                out.push((*table, gt));
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn column_sums<T: Scalar>(g: &[T], width: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); width];
    for row in g.chunks(width) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    acc
}

fn roll_data<T: Scalar>(shape: &[usize], data: &[T], axis: usize, shift: usize) -> Vec<T> {
    let n = shape[axis];
    if n == 0 || shift % n == 0 {
        return data.to_vec();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let j = (i + shift) % n;
            out[base + j * inner..base + (j + 1) * inner]
                .copy_from_slice(&data[base + i * inner..base + (i + 1) * inner]);
        }
    }
    out
}

/// Batch layout of a broadcast matrix product.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Per output batch: element offsets of the `a` and `b` matrices.
    offsets: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut offsets = Vec::new();
        kernels::broadcast_walk(
            &batch,
            &broadcast_strides(ba, &batch),
            &broadcast_strides(bb, &batch),
            |_, ia, ib| offsets.push((ia * m * k, ib * k * n)),
        );
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            offsets,
        })
    }

    fn batches(&self) -> usize {
        self.offsets.len()
    }

    /// Folds per-output-batch gradients onto the (possibly broadcast)
    /// operand, in batch order.
    fn reduce<T: Scalar>(&self, full: &[T], block: usize, lhs: bool, numel: usize) -> Vec<T> {
        if full.len() == numel {
            return full.to_vec();
        }
        let mut acc = vec![T::zero(); numel];
        for (bi, &(oa, ob)) in self.offsets.iter().enumerate() {
            let off = if lhs { oa } else { ob };
            acc[off..off + block]
                .iter_mut()
                .zip(&full[bi * block..(bi + 1) * block])
                .for_each(|(a, &v)| *a += v);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(y), tape.value(b));

        let z = tape.constant(Tensor::zeros(vec![2, 4]));
        let b = tape.constant(Tensor::from_fn(vec![4, 5], |i| i as f64 + 0.5));
        let y = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(vec![2, 5]));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_and_sigmoid_reference_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![4], 3.7));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
    }

    #[test]
    fn masked_softmax_gives_zero_mass_to_masked_keys() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 0.5, -1., 9.]));
        let mask = [true, false, true, false, false, true];
        let y = tape.softmax_masked(x, Some(&mask)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(v[5], 1.0);

        let all_masked = [false; 6];
        assert!(tape.softmax_masked(x, Some(&all_masked)).is_err());
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 8], |i| ((i * 37 % 17) as f64).sin() * 4.0 + 1.0));
        let g = tape.constant(Tensor::full(vec![8], 1.0));
        let b = tape.constant(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        assert!(tape.backward(sq).is_err());
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4., 8., 12.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn conv_identity_kernel_and_extent_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 4, 5, 1], |i| i as f64));
        let k = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, Conv2dSpec::same(1, 1)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let k5 = tape.constant(Tensor::zeros(vec![5, 5, 1, 1]));
        let spec = Conv2dSpec { stride: 1, dilation: 2, padding: 0 };
        assert!(matches!(tape.conv2d(x, k5, None, spec), Err(Error::Config(_))));
        let even = tape.constant(Tensor::zeros(vec![2, 2, 1, 1]));
        assert!(tape.conv2d(x, even, None, Conv2dSpec::same(1, 1)).is_err());
    }

    #[test]
    fn finite_check_names_primitive() {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let x = tape.constant(Tensor::full(vec![2], 1e308));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "scale" }));
    }

    #[test]
    fn roll_then_inverse_roll_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 5, 3], |i| i as f64));
        let r = tape.roll(x, 1, -2).unwrap();
        assert_eq!(tape.value(r).at(&[0, 0, 0]), tape.value(x).at(&[0, 2, 0]));
        let back = tape.roll(r, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}

//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs for
//! the vector-Jacobian product. Inputs always precede their consumers, so
//! [`Tape::backward`] is a single reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormAxes};
use crate::tensor::{dims4, numel_of, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf formulation.
    Gelu,
    /// tanh approximation of GELU. Never the default.
    GeluTanh,
    Relu,
    Silu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let half = T::of(0.5);
        match self {
            Activation::Gelu => half * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf()),
            Activation::GeluTanh => {
                let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(0.044715) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let half = T::of(0.5);
        match self {
            Activation::Gelu => {
                let cdf = half * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
                let pdf = T::of(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
                cdf + x * pdf
            }
            Activation::GeluTanh => {
                let c = T::of(SQRT_2_OVER_PI);
                let a = T::of(0.044715);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPoolExcl {
        input: Var,
        k: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannel {
        x: Var,
        v: Var,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    ChannelAffineConst {
        x: Var,
        scale: Vec<T>,
    },
    ScaleSamples {
        x: Var,
        factors: Vec<T>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Normalize {
        x: Var,
        axes: NormAxes,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    MeanSpatial(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Batch statistics produced by a normalization, used for BatchNorm running
/// estimates.
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// `(B, C, rest)` view of a tensor with at least two axes.
fn channel_view(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "{what}: expected at least [B, C], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], numel_of(&shape[2..])))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Cross-correlation with zero padding. `weight` is `[Cout, Cin/groups, Kh, Kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let xs = dims4(self.shape(input), "conv2d input")?;
        let ws = dims4(self.shape(weight), "conv2d weight")?;
        let geom = ConvGeom::new(xs, ws, stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::invalid(format!(
                    "conv2d: bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Stride-1, `k // 2`-padded average pooling that divides by the number of
    /// in-bounds cells in each window.
    pub fn avg_pool2d_excl(&mut self, input: Var, k: usize) -> Result<Var> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "avg_pool2d_excl: pool size must be odd and positive, got {k}"
            )));
        }
        let [b, c, h, w] = dims4(self.shape(input), "avg_pool2d_excl input")?;
        let out = kernels::avg_pool_excl_forward(self.data(input), b * c, h, w, k);
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, Op::AvgPoolExcl { input, k }, &[input]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    fn check_channel_vec(&self, x: Var, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        let dims = channel_view(self.shape(x), what)?;
        if self.shape(v) != [dims.1] {
            return Err(Error::invalid(format!(
                "{what}: per-channel vector has shape {:?}, expected [{}]",
                self.shape(v),
                dims.1
            )));
        }
        Ok(dims)
    }

    fn broadcast_channels(&self, x: Var, dims: (usize, usize, usize), f: impl Fn(T, usize) -> T) -> Tensor<T> {
        let (_, c, s) = dims;
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| f(e, (i / s) % c))
            .collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved")
    }

    /// `x * v[c]` for `x` of shape `[B, C, ...]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let dims = self.check_channel_vec(x, v, "mul_channel")?;
        let vv = self.data(v).to_vec();
        let out = self.broadcast_channels(x, dims, |e, c| e * vv[c]);
        Ok(self.push(out, Op::MulChannel { x, v }, &[x, v]))
    }

    /// `x + v[c]` for `x` of shape `[B, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let dims = self.check_channel_vec(x, v, "add_channel")?;
        let vv = self.data(v).to_vec();
        let out = self.broadcast_channels(x, dims, |e, c| e + vv[c]);
        Ok(self.push(out, Op::AddChannel { x, v }, &[x, v]))
    }

    /// `x * scale[c] + shift[c]` with constant, non-differentiable coefficients.
    pub fn channel_affine_const(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let dims = channel_view(self.shape(x), "channel_affine_const")?;
        if scale.len() != dims.1 || shift.len() != dims.1 {
            return Err(Error::invalid(format!(
                "channel_affine_const: coefficient length {} / {}, expected {}",
                scale.len(),
                shift.len(),
                dims.1
            )));
        }
        let out = self.broadcast_channels(x, dims, |e, c| e * scale[c] + shift[c]);
        Ok(self.push(out, Op::ChannelAffineConst { x, scale }, &[x]))
    }

    /// Multiplies sample `b` of `x` by the constant `factors[b]`.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(Error::invalid(format!(
                "scale_samples: {} factors for shape {shape:?}",
                factors.len()
            )));
        }
        let per = numel_of(&shape[1..]);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| e * factors[i / per])
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ScaleSamples { x, factors }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|e| kind.apply(e));
        self.push(out, Op::Activation { x, kind }, &[x])
    }

    /// Zero-mean, unit-variance normalization of `x` viewed as `[B, C, rest]`,
    /// without affine parameters. Returns the batch statistics alongside.
    pub fn normalize(&mut self, x: Var, axes: NormAxes, eps: T) -> Result<(Var, GroupStats<T>)> {
        let dims = channel_view(self.shape(x), "normalize")?;
        let stats = kernels::normalize_forward(self.data(x), dims, axes, eps);
        let value = Tensor::new(self.shape(x).to_vec(), stats.xhat)?;
        let count = axes.group_size(dims.0, dims.1, dims.2);
        let var = self.push(
            value,
            Op::Normalize {
                x,
                axes,
                rstd: stats.rstd,
            },
            &[x],
        );
        Ok((
            var,
            GroupStats {
                mean: stats.mean,
                var: stats.var,
                count,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer = numel_of(&shape[..axis]);
        let inner = numel_of(&shape[axis + 1..]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::invalid(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions differ ({k} vs {kb}) for {sa:?} x {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let batch = numel_of(&sa[..r - 2]);
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        Ok((batch, m, k, n, out_shape))
    }

    /// Batched `a @ b` (or `a @ b^T` when `trans_b`) over matching leading axes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, out_shape) = self.matmul_dims(a, b, trans_b)?;
        let data = kernels::bmm(batch, m, k, n, self.data(a), false, self.data(b), trans_b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x @ w^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sw[1] != sx[sx.len() - 1] {
            return Err(Error::invalid(format!(
                "linear: input {sx:?} incompatible with weight {sw:?}"
            )));
        }
        let (fan_out, fan_in) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::invalid(format!(
                    "linear: bias shape {:?}, expected [{fan_out}]",
                    self.shape(b)
                )));
            }
        }
        let rows = numel_of(&sx) / fan_in;
        let mut data = kernels::bmm(1, rows, fan_in, fan_out, self.data(x), false, self.data(w), true);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in data.chunks_mut(fan_out) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = fan_out;
        let value = Tensor::new(out_shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax_lastdim: scalar input"))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean over all spatial positions: `[B, C, ...] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_view(self.shape(x), "mean_spatial")?;
        let inv = T::one() / T::of(s as f64);
        let data = self
            .data(x)
            .chunks(s)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([b, c], data)?;
        Ok(self.push(value, Op::MeanSpatial(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Batch-mean cross-entropy against `(1 - smoothing) * onehot + smoothing / K`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [batch, classes] = shape[..] else {
            return Err(Error::invalid(format!(
                "cross_entropy: logits must be [B, K], got {shape:?}"
            )));
        };
        if targets.len() != batch {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::invalid(format!(
                "cross_entropy: smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let off = smoothing / T::of(classes as f64);
        let on = T::one() - smoothing + off;
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (c, v) in row.iter_mut().enumerate() {
                let logp = *v - lse;
                let q = if c == t { on } else { off };
                total -= q * logp;
                *v = logp.exp();
            }
        }
        let value = Tensor::scalar(total / T::of(batch as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`. Every leaf that requires a
    /// gradient gets one; leaves not connected to the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (var, contribution) in self.vjp(node, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn vjp(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (rg(*input), rg(*weight), bias.is_some_and(rg));
                let grads = kernels::conv2d_backward(geom, g, self.data(*input), self.data(*weight), need);
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPoolExcl { input, k } => {
                let [b, c, h, w] = dims4(self.shape(*input), "").expect("checked in forward");
                vec![(*input, kernels::avg_pool_excl_backward(g, b * c, h, w, *k))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()),
                    (*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()),
                ]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::MulChannel { x, v } => {
                let (_, c, s) = channel_view(self.shape(*x), "").expect("checked in forward");
                let (xv, vv) = (self.data(*x), self.data(*v));
                let dx = g.iter().enumerate().map(|(i, &gi)| gi * vv[(i / s) % c]).collect();
                let mut dv = vec![T::zero(); c];
                for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                    dv[(i / s) % c] += gi * xi;
                }
                vec![(*x, dx), (*v, dv)]
            }
            Op::AddChannel { x, v } => {
                let (_, c, s) = channel_view(self.shape(*x), "").expect("checked in forward");
                let mut dv = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    dv[(i / s) % c] += gi;
                }
                vec![(*x, g.to_vec()), (*v, dv)]
            }
            Op::ChannelAffineConst { x, scale } => {
                let (_, c, s) = channel_view(self.shape(*x), "").expect("checked in forward");
                vec![(*x, g.iter().enumerate().map(|(i, &gi)| gi * scale[(i / s) % c]).collect())]
            }
            Op::ScaleSamples { x, factors } => {
                let per = g.len() / factors.len();
                vec![(*x, g.iter().enumerate().map(|(i, &gi)| gi * factors[i / per]).collect())]
            }
            Op::Activation { x, kind } => {
                let xv = self.data(*x);
                vec![(*x, g.iter().zip(xv).map(|(&gi, &xi)| gi * kind.derivative(xi)).collect())]
            }
            Op::Normalize { x, axes, rstd } => {
                let dims = channel_view(self.shape(*x), "").expect("checked in forward");
                vec![(*x, kernels::normalize_backward(g, node.value.data(), rstd, dims, *axes))]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, dx) = permute_data(g, node.value.shape(), &inverse);
                vec![(*x, dx)]
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel_of(&shape[..*axis]);
                let inner = numel_of(&shape[axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); numel_of(shape)];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n, _) = self.matmul_dims(*a, *b, *trans_b).expect("checked in forward");
                let (av, bv) = (self.data(*a), self.data(*b));
                let mut out = Vec::new();
                if rg(*a) {
                    let da = if *trans_b {
                        kernels::bmm(batch, m, n, k, g, false, bv, false)
                    } else {
                        kernels::bmm(batch, m, n, k, g, false, bv, true)
                    };
                    out.push((*a, da));
                }
                if rg(*b) {
                    let db = if *trans_b {
                        kernels::bmm(batch, n, m, k, g, true, av, false)
                    } else {
                        kernels::bmm(batch, k, m, n, av, true, g, false)
                    };
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let rows = g.len() / fan_out;
                let mut out = Vec::new();
                if rg(*x) {
                    out.push((*x, kernels::bmm(1, rows, fan_out, fan_in, g, false, self.data(*w), false)));
                }
                if rg(*w) {
                    out.push((*w, kernels::bmm(1, fan_out, rows, fan_in, g, true, self.data(*x), false)));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-scalar");
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanSpatial(x) => {
                let (_, _, s) = channel_view(self.shape(*x), "").expect("checked in forward");
                let inv = T::one() / T::of(s as f64);
                let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, s)).collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let batch = targets.len();
                let off = *smoothing / T::of(classes as f64);
                let on = T::one() - *smoothing + off;
                let scale = g[0] / T::of(batch as f64);
                let dx = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let q = if i % classes == targets[i / classes] { on } else { off };
                        (p - q) * scale
                    })
                    .collect();
                vec![(*logits, dx)]
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the leaf does not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

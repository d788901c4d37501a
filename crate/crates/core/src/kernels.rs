//! Slice-level numeric kernels shared by the autodiff ops.
//!
//! Every kernel writes each output element from exactly one loop nest in a
//! fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length of a strided, zero-padded window sweep.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "kernel ({kernel}) and stride ({stride}) must be positive"
        )));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {padded} (input {input}, pad {pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        weight: [usize; 4],
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        let [out_channels, cin_per_group, kernel_h, kernel_w] = weight;
        if groups == 0 {
            return Err(Error::invalid("conv2d: groups must be positive"));
        }
        if in_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d: input channels {in_channels} not divisible by groups {groups}"
            )));
        }
        if out_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d: output channels {out_channels} not divisible by groups {groups}"
            )));
        }
        if cin_per_group != in_channels / groups {
            return Err(Error::invalid(format!(
                "conv2d: weight dim 1 is {cin_per_group}, expected in_channels/groups = {}",
                in_channels / groups
            )));
        }
        let out_h = conv_out_len(in_h, kernel_h, stride.0, padding.0)?;
        let out_w = conv_out_len(in_w, kernel_w, stride.1, padding.1)?;
        Ok(ConvGeom {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane_out];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            let o_off = (b * g.out_channels + co) * plane_out;
            let out_plane = &mut out[o_off..o_off + plane_out];
            if let Some(bias) = bias {
                out_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let i_off = (b * g.in_channels + ci) * plane_in;
                let in_plane = &x[i_off..i_off + plane_in];
                for kh in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(kh, ph, sh, g.in_h, g.out_h);
                    for kw in 0..g.kernel_w {
                        let (ow_lo, ow_hi) = valid_range(kw, pw, sw, g.in_w, g.out_w);
                        let wv = w[((co * cin_g + cil) * g.kernel_h + kh) * g.kernel_w + kw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * sh + kh - ph;
                            let in_row = &in_plane[ih * g.in_w..(ih + 1) * g.in_w];
                            let out_row = &mut out_plane[oh * g.out_w..(oh + 1) * g.out_w];
                            if sw == 1 {
                                let shift = ow_lo + kw - pw;
                                let n = ow_hi - ow_lo;
                                for (o, &i) in out_row[ow_lo..ow_hi]
                                    .iter_mut()
                                    .zip(&in_row[shift..shift + n])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    out_row[ow] += wv * in_row[ow * sw + kw - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    dy: &[T],
    x: &[T],
    w: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let ksz = g.kernel_h * g.kernel_w;

    let input = need.0.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.in_channels * plane_in];
        for b in 0..g.batch {
            for ci in 0..g.in_channels {
                let grp = ci / cin_g;
                let cil = ci % cin_g;
                let i_off = (b * g.in_channels + ci) * plane_in;
                let dx_plane = &mut dx[i_off..i_off + plane_in];
                for co in grp * cout_g..(grp + 1) * cout_g {
                    let o_off = (b * g.out_channels + co) * plane_out;
                    let dy_plane = &dy[o_off..o_off + plane_out];
                    for kh in 0..g.kernel_h {
                        let (oh_lo, oh_hi) = valid_range(kh, ph, sh, g.in_h, g.out_h);
                        for kw in 0..g.kernel_w {
                            let (ow_lo, ow_hi) = valid_range(kw, pw, sw, g.in_w, g.out_w);
                            let wv = w[(co * cin_g + cil) * ksz + kh * g.kernel_w + kw];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * sh + kh - ph;
                                let dy_row = &dy_plane[oh * g.out_w..(oh + 1) * g.out_w];
                                let dx_row = &mut dx_plane[ih * g.in_w..(ih + 1) * g.in_w];
                                for ow in ow_lo..ow_hi {
                                    dx_row[ow * sw + kw - pw] += wv * dy_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    let weight = need.1.then(|| {
        let mut dw = vec![T::zero(); g.out_channels * cin_g * ksz];
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                for kh in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(kh, ph, sh, g.in_h, g.out_h);
                    for kw in 0..g.kernel_w {
                        let (ow_lo, ow_hi) = valid_range(kw, pw, sw, g.in_w, g.out_w);
                        let mut acc = T::zero();
                        for b in 0..g.batch {
                            let o_off = (b * g.out_channels + co) * plane_out;
                            let i_off = (b * g.in_channels + ci) * plane_in;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * sh + kh - ph;
                                let dy_row = &dy[o_off + oh * g.out_w..o_off + (oh + 1) * g.out_w];
                                let x_row = &x[i_off + ih * g.in_w..i_off + (ih + 1) * g.in_w];
                                for ow in ow_lo..ow_hi {
                                    acc += dy_row[ow] * x_row[ow * sw + kw - pw];
                                }
                            }
                        }
                        dw[(co * cin_g + cil) * ksz + kh * g.kernel_w + kw] = acc;
                    }
                }
            }
        }
        dw
    });

    let bias = need.2.then(|| {
        (0..g.out_channels)
            .map(|co| {
                let mut acc = T::zero();
                for b in 0..g.batch {
                    let o_off = (b * g.out_channels + co) * plane_out;
                    for &v in &dy[o_off..o_off + plane_out] {
                        acc += v;
                    }
                }
                acc
            })
            .collect()
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Inclusive-exclusive bounds of a radius-`r` window around `i`, clipped to `[0, len)`.
#[inline]
fn window(i: usize, r: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Stride-1 average pooling with `k // 2` zero padding whose divisor counts only
/// in-bounds cells. `x` is a stack of `planes` planes of `h * w`.
pub fn avg_pool_excl_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let out_plane = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let (i0, i1) = window(i, r, h);
            for j in 0..w {
                let (j0, j1) = window(j, r, w);
                let mut acc = T::zero();
                for ii in i0..i1 {
                    for &v in &plane[ii * w + j0..ii * w + j1] {
                        acc += v;
                    }
                }
                let count = T::of(((i1 - i0) * (j1 - j0)) as f64);
                out_plane[i * w + j] = acc / count;
            }
        }
    }
    out
}

pub fn avg_pool_excl_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let mut dx = vec![T::zero(); dy.len()];
    for p in 0..planes {
        let dy_plane = &dy[p * h * w..(p + 1) * h * w];
        let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let (i0, i1) = window(i, r, h);
            for j in 0..w {
                let (j0, j1) = window(j, r, w);
                let share = dy_plane[i * w + j] / T::of(((i1 - i0) * (j1 - j0)) as f64);
                for ii in i0..i1 {
                    for v in &mut dx_plane[ii * w + j0..ii * w + j1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

/// `c[m, n] += a[m, k] @ b[k, n]`, all row-major.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Batched matmul. `a` is `[batch, m, k]` (or `[batch, k, m]` when `trans_a`),
/// `b` is `[batch, k, n]` (or `[batch, n, k]` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let a_i = &a[i * m * k..(i + 1) * m * k];
        let b_i = &b[i * k * n..(i + 1) * k * n];
        let a_t;
        let a_i = if trans_a {
            a_t = transpose(k, m, a_i);
            &a_t[..]
        } else {
            a_i
        };
        let b_t;
        let b_i = if trans_b {
            b_t = transpose(n, k, b_i);
            &b_t[..]
        } else {
            b_i
        };
        gemm_acc(m, k, n, a_i, b_i, &mut out[i * m * n..(i + 1) * m * n]);
    }
    out
}

/// Reduction layout for a normalization over a `[B, C, S]` view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// One group per sample, over all of `C x S`.
    Sample,
    /// One group per `(b, s)` position, over `C`.
    Position,
    /// One group per channel, over `B x S`.
    Channel,
}

impl NormAxes {
    pub fn groups(self, b: usize, c: usize, s: usize) -> usize {
        match self {
            NormAxes::Sample => b,
            NormAxes::Position => b * s,
            NormAxes::Channel => c,
        }
    }

    pub fn group_size(self, b: usize, c: usize, s: usize) -> usize {
        b * c * s / self.groups(b, c, s)
    }

    #[inline]
    fn group_of(self, b: usize, c: usize, s: usize, ss: usize) -> usize {
        match self {
            NormAxes::Sample => b,
            NormAxes::Position => b * ss + s,
            NormAxes::Channel => c,
        }
    }
}

fn for_each_group<T: Copy>(
    axes: NormAxes,
    dims: (usize, usize, usize),
    data: &[T],
    mut f: impl FnMut(usize, usize, T),
) {
    let (bs, cs, ss) = dims;
    let mut i = 0;
    for b in 0..bs {
        for c in 0..cs {
            for s in 0..ss {
                f(axes.group_of(b, c, s, ss), i, data[i]);
                i += 1;
            }
        }
    }
}

pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// `(x - mean) / sqrt(var + eps)` per group, two-pass statistics.
pub fn normalize_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    axes: NormAxes,
    eps: T,
) -> NormStats<T> {
    let (bs, cs, ss) = dims;
    let groups = axes.groups(bs, cs, ss);
    let count = T::of(axes.group_size(bs, cs, ss) as f64);
    let mut mean = vec![T::zero(); groups];
    for_each_group(axes, dims, x, |g, _, v| mean[g] += v);
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); groups];
    for_each_group(axes, dims, x, |g, _, v| {
        let d = v - mean[g];
        var[g] += d * d;
    });
    var.iter_mut().for_each(|v| *v /= count);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for_each_group(axes, dims, x, |g, i, v| xhat[i] = (v - mean[g]) * rstd[g]);
    NormStats {
        mean,
        var,
        xhat,
        rstd,
    }
}

pub fn normalize_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    dims: (usize, usize, usize),
    axes: NormAxes,
) -> Vec<T> {
    let (bs, cs, ss) = dims;
    let groups = axes.groups(bs, cs, ss);
    let count = T::of(axes.group_size(bs, cs, ss) as f64);
    let mut mean_dy = vec![T::zero(); groups];
    let mut mean_dy_xhat = vec![T::zero(); groups];
    for_each_group(axes, dims, dy, |g, i, v| {
        mean_dy[g] += v;
        mean_dy_xhat[g] += v * xhat[i];
    });
    mean_dy.iter_mut().for_each(|m| *m /= count);
    mean_dy_xhat.iter_mut().for_each(|m| *m /= count);
    let mut dx = vec![T::zero(); dy.len()];
    for_each_group(axes, dims, dy, |g, i, v| {
        dx[i] = rstd[g] * (v - mean_dy[g] - xhat[i] * mean_dy_xhat[g]);
    });
    dx
}

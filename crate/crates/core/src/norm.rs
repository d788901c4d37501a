//! The four normalization variants: Modified Layer Normalization (per-sample
//! statistics over channels and space), channel-only Layer Normalization,
//! Batch Normalization, and no normalization at all.
//!
//! All variants carry per-channel affine parameters of shape `[C]` and use the
//! biased variance in the denominator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::NormAxes;
use crate::params::{BnUpdate, ForwardCtx, Init, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{dims4, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Mln,
    Ln,
    Bn,
    None,
}

impl NormKind {
    pub fn param_count(self, channels: usize) -> usize {
        match self {
            NormKind::None => 0,
            _ => 2 * channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Mln => "mln",
            NormKind::Ln => "ln",
            NormKind::Bn => "bn",
            NormKind::None => "none",
        }
    }
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul_channel(x, gamma)?;
    tape.add_channel(scaled, beta)
}

/// Modified Layer Normalization: mean and variance over all `(C, H, W)` of
/// each sample, then a per-channel affine.
pub fn mln<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
    dims4(tape.shape(x), "mln")?;
    let (xhat, _) = tape.normalize(x, NormAxes::Sample, eps)?;
    affine(tape, xhat, gamma, beta)
}

/// Layer Normalization over the channel axis only, per `(b, h, w)` position.
pub fn layer_norm_channel<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
    dims4(tape.shape(x), "layer_norm_channel")?;
    let (xhat, _) = tape.normalize(x, NormAxes::Position, eps)?;
    affine(tape, xhat, gamma, beta)
}

/// Train-mode Batch Normalization. Returns the output together with the batch
/// mean and the *unbiased* batch variance for the running estimates.
pub fn batch_norm_train<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<(Var, Vec<T>, Vec<T>)> {
    let [b, _, h, w] = dims4(tape.shape(x), "batch_norm")?;
    if b * h * w < 2 {
        return Err(Error::invalid(format!(
            "batch_norm: train mode needs at least 2 values per channel, got B*H*W = {}",
            b * h * w
        )));
    }
    let (xhat, stats) = tape.normalize(x, NormAxes::Channel, eps)?;
    let n = T::of(stats.count as f64);
    let correction = n / (n - T::one());
    let unbiased = stats.var.iter().map(|&v| v * correction).collect();
    Ok((affine(tape, xhat, gamma, beta)?, stats.mean, unbiased))
}

/// Eval-mode Batch Normalization using running statistics.
pub fn batch_norm_eval<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Var> {
    dims4(tape.shape(x), "batch_norm")?;
    let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let shift = running_mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
    let xhat = tape.channel_affine_const(x, scale, shift)?;
    affine(tape, xhat, gamma, beta)
}

/// A normalization layer bound to parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    pub eps: f64,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
    running: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub fn build<T: Scalar>(kind: NormKind, channels: usize, prefix: &str, store: &mut ParamStore<T>, init: &Init<'_>) -> Self {
        let (weight, bias) = match kind {
            NormKind::None => (None, None),
            _ => (
                Some(store.add(format!("{prefix}.weight"), ParamKind::Trainable, init.constant(&[channels], 1.0))),
                Some(store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros([channels]))),
            ),
        };
        let running = (kind == NormKind::Bn).then(|| {
            (
                store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros([channels])),
                store.add(format!("{prefix}.running_var"), ParamKind::Buffer, init.constant(&[channels], 1.0)),
            )
        });
        Norm {
            kind,
            channels,
            eps: NORM_EPS,
            weight,
            bias,
            running,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let eps = T::of(self.eps);
        let (Some(w), Some(b)) = (self.weight, self.bias) else {
            return Ok(x);
        };
        let (gamma, beta) = (ctx.var(w), ctx.var(b));
        match self.kind {
            NormKind::None => Ok(x),
            NormKind::Mln => mln(ctx.tape, x, gamma, beta, eps),
            NormKind::Ln => layer_norm_channel(ctx.tape, x, gamma, beta, eps),
            NormKind::Bn => {
                let (rm, rv) = self.running.expect("bn has running stats");
                match ctx.mode {
                    Mode::Train => {
                        let (y, mean, var) = batch_norm_train(ctx.tape, x, gamma, beta, eps)?;
                        ctx.push_bn_update(BnUpdate {
                            running_mean: rm,
                            running_var: rv,
                            batch_mean: mean,
                            batch_var: var,
                            momentum: BN_MOMENTUM,
                        });
                        Ok(y)
                    }
                    Mode::Eval => {
                        let (store, tape) = (ctx.store, &mut *ctx.tape);
                        batch_norm_eval(tape, x, gamma, beta, store.get(rm).data(), store.get(rv).data(), eps)
                    }
                }
            }
        }
    }
}

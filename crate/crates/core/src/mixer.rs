//! Token mixers: the interchangeable component of a MetaFormer block that
//! moves information between spatial tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ForwardCtx, Init, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::{dims4, Scalar, Tensor};

pub const DEFAULT_POOL_SIZE: usize = 3;
pub const DEFAULT_DW_KERNEL: usize = 3;
/// Channels per attention head when the head count is not given.
pub const ATTENTION_HEAD_DIM: usize = 32;

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

fn default_kernel() -> usize {
    DEFAULT_DW_KERNEL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixerConfig {
    Pooling {
        #[serde(default = "default_pool_size")]
        pool_size: usize,
    },
    Identity,
    /// Frozen row-stochastic `N x N` matrix; binds to the build-time token count.
    RandomMatrix,
    DepthwiseConv {
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
    Attention {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        heads: Option<usize>,
    },
    /// One fully connected layer over tokens; binds to the build-time token count.
    SpatialFc,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig::Pooling {
            pool_size: DEFAULT_POOL_SIZE,
        }
    }
}

impl MixerConfig {
    pub fn pooling() -> Self {
        Self::default()
    }

    pub fn attention() -> Self {
        MixerConfig::Attention { heads: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixerConfig::Pooling { .. } => "pooling",
            MixerConfig::Identity => "identity",
            MixerConfig::RandomMatrix => "random_matrix",
            MixerConfig::DepthwiseConv { .. } => "depthwise_conv",
            MixerConfig::Attention { .. } => "attention",
            MixerConfig::SpatialFc => "spatial_fc",
        }
    }

    /// Whether the mixer's parameters depend on the number of tokens.
    pub fn is_resolution_bound(&self) -> bool {
        matches!(self, MixerConfig::RandomMatrix | MixerConfig::SpatialFc)
    }

    /// Head count used for `channels`; defaults to one head per 32 channels.
    pub fn heads_for(&self, channels: usize) -> usize {
        match self {
            MixerConfig::Attention { heads: Some(h) } => *h,
            _ => (channels / ATTENTION_HEAD_DIM).max(1),
        }
    }

    pub fn validate(&self, path: &str, channels: usize) -> Result<()> {
        match *self {
            MixerConfig::Pooling { pool_size: k } if k == 0 || k % 2 == 0 => {
                Err(Error::config(format!("{path}.pool_size"), format!("must be odd and positive, got {k}")))
            }
            MixerConfig::DepthwiseConv { kernel: k } if k == 0 || k % 2 == 0 => {
                Err(Error::config(format!("{path}.kernel"), format!("must be odd and positive, got {k}")))
            }
            MixerConfig::Attention { .. } => {
                let h = self.heads_for(channels);
                if h == 0 || !channels.is_multiple_of(h) {
                    return Err(Error::config(
                        format!("{path}.heads"),
                        format!("{h} heads do not divide {channels} channels"),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `(trainable, frozen)` parameter counts for `channels` channels and
    /// `tokens` tokens.
    pub fn param_count(&self, channels: usize, tokens: usize) -> (u64, u64) {
        let (c, n) = (channels as u64, tokens as u64);
        match *self {
            MixerConfig::Pooling { .. } | MixerConfig::Identity => (0, 0),
            MixerConfig::RandomMatrix => (0, n * n),
            MixerConfig::DepthwiseConv { kernel } => (c * (kernel * kernel) as u64 + c, 0),
            MixerConfig::Attention { .. } => (4 * c * c + 4 * c, 0),
            MixerConfig::SpatialFc => (n * n + n, 0),
        }
    }
}

/// `avg_pool2d_excl(x, k) - x`. Parameter free.
pub fn pooling_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, pool_size: usize) -> Result<Var> {
    let pooled = tape.avg_pool2d_excl(x, pool_size)?;
    tape.sub(pooled, x)
}

pub fn identity_mixer(x: Var) -> Var {
    x
}

/// Applies `weight` (`[N, N]`) and an optional `bias` (`[N]`) to every
/// channel's flattened token vector: `t -> weight @ t + bias`.
fn token_linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, what: &str) -> Result<Var> {
    let [b, c, h, w] = dims4(tape.shape(x), what)?;
    let n = h * w;
    let expected = tape.shape(weight)[0];
    if expected != n {
        return Err(Error::invalid(format!(
            "{what}: built for N = {expected} tokens, input has N = {n} ({h}x{w})"
        )));
    }
    let flat = tape.reshape(x, [b, c, n])?;
    let mixed = tape.linear(flat, weight, bias)?;
    tape.reshape(mixed, [b, c, h, w])
}

/// `X' = W_R X` over tokens with a frozen, row-stochastic `W_R`.
pub fn random_matrix_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, matrix: Var) -> Result<Var> {
    token_linear(tape, x, matrix, None, "random_matrix_mixer")
}

pub fn spatial_fc_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    token_linear(tape, x, weight, Some(bias), "spatial_fc_mixer")
}

/// Per-channel `k x k` convolution with `k // 2` zero padding.
pub fn depthwise_conv_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let [_, c, _, _] = dims4(tape.shape(x), "depthwise_conv_mixer")?;
    let k = tape.shape(weight)[2];
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!("depthwise_conv_mixer: kernel {k} must be odd")));
    }
    tape.conv2d(x, weight, Some(bias), (1, 1), (k / 2, k / 2), c)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// Multi-head self-attention over the `H*W` tokens of each sample, with
/// `softmax(Q K^T / sqrt(d)) V` per head and an output projection.
pub fn attention_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, w: AttentionWeights, heads: usize) -> Result<Var> {
    let [b, c, h, wd] = dims4(tape.shape(x), "attention_mixer")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!(
            "attention_mixer: {heads} heads do not divide {c} channels"
        )));
    }
    let n = h * wd;
    let d = c / heads;
    let tokens = tape.reshape(x, [b, c, n])?;
    let tokens = tape.permute(tokens, &[0, 2, 1])?;
    let qkv = tape.linear(tokens, w.qkv_weight, Some(w.qkv_bias))?;
    let qkv = tape.reshape(qkv, [b, n, 3, heads, d])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = [qkv; 3];
    for (i, slot) in split.iter_mut().enumerate() {
        let part = tape.narrow(qkv, 0, i, 1)?;
        *slot = tape.reshape(part, [b, heads, n, d])?;
    }
    let [q, k, v] = split;
    let scores = tape.matmul(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let attn = tape.softmax_lastdim(scores)?;
    let out = tape.matmul(attn, v, false)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, [b, n, c])?;
    let out = tape.linear(out, w.proj_weight, Some(w.proj_bias))?;
    let out = tape.permute(out, &[0, 2, 1])?;
    tape.reshape(out, [b, c, h, wd])
}

/// A token mixer bound to parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum TokenMixer {
    Pooling {
        pool_size: usize,
    },
    Identity,
    RandomMatrix {
        matrix: ParamId,
        tokens: usize,
    },
    DepthwiseConv {
        weight: ParamId,
        bias: ParamId,
    },
    Attention {
        qkv_weight: ParamId,
        qkv_bias: ParamId,
        proj_weight: ParamId,
        proj_bias: ParamId,
        heads: usize,
    },
    SpatialFc {
        weight: ParamId,
        bias: ParamId,
        tokens: usize,
    },
}

impl TokenMixer {
    /// Allocates and initializes the mixer's tensors. `tokens` is the token
    /// count at the build resolution.
    pub fn build<T: Scalar>(
        config: &MixerConfig,
        channels: usize,
        tokens: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        config.validate(prefix, channels)?;
        let c = channels;
        Ok(match *config {
            MixerConfig::Pooling { pool_size } => TokenMixer::Pooling { pool_size },
            MixerConfig::Identity => TokenMixer::Identity,
            MixerConfig::RandomMatrix => TokenMixer::RandomMatrix {
                matrix: store.add(format!("{prefix}.matrix"), ParamKind::Frozen, init.softmax_uniform_rows(tokens)),
                tokens,
            },
            MixerConfig::DepthwiseConv { kernel } => TokenMixer::DepthwiseConv {
                weight: store.add(
                    format!("{prefix}.weight"),
                    ParamKind::Trainable,
                    init.trunc_normal(&[c, 1, kernel, kernel], INIT_STD),
                ),
                bias: store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros([c])),
            },
            MixerConfig::Attention { .. } => TokenMixer::Attention {
                qkv_weight: store.add(
                    format!("{prefix}.qkv.weight"),
                    ParamKind::Trainable,
                    init.trunc_normal(&[3 * c, c], INIT_STD),
                ),
                qkv_bias: store.add(format!("{prefix}.qkv.bias"), ParamKind::Trainable, Tensor::zeros([3 * c])),
                proj_weight: store.add(
                    format!("{prefix}.proj.weight"),
                    ParamKind::Trainable,
                    init.trunc_normal(&[c, c], INIT_STD),
                ),
                proj_bias: store.add(format!("{prefix}.proj.bias"), ParamKind::Trainable, Tensor::zeros([c])),
                heads: config.heads_for(c),
            },
            MixerConfig::SpatialFc => TokenMixer::SpatialFc {
                weight: store.add(
                    format!("{prefix}.weight"),
                    ParamKind::Trainable,
                    init.trunc_normal(&[tokens, tokens], INIT_STD),
                ),
                bias: store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros([tokens])),
                tokens,
            },
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        match *self {
            TokenMixer::Pooling { pool_size } => pooling_mixer(ctx.tape, x, pool_size),
            TokenMixer::Identity => Ok(identity_mixer(x)),
            TokenMixer::RandomMatrix { matrix, .. } => {
                let m = ctx.var(matrix);
                random_matrix_mixer(ctx.tape, x, m)
            }
            TokenMixer::DepthwiseConv { weight, bias } => {
                let (w, b) = (ctx.var(weight), ctx.var(bias));
                depthwise_conv_mixer(ctx.tape, x, w, b)
            }
            TokenMixer::Attention {
                qkv_weight,
                qkv_bias,
                proj_weight,
                proj_bias,
                heads,
            } => {
                let w = AttentionWeights {
                    qkv_weight: ctx.var(qkv_weight),
                    qkv_bias: ctx.var(qkv_bias),
                    proj_weight: ctx.var(proj_weight),
                    proj_bias: ctx.var(proj_bias),
                };
                attention_mixer(ctx.tape, x, w, heads)
            }
            TokenMixer::SpatialFc { weight, bias, .. } => {
                let (w, b) = (ctx.var(weight), ctx.var(bias));
                spatial_fc_mixer(ctx.tape, x, w, b)
            }
        }
    }
}

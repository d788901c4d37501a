//! One MetaFormer block: token-mixing and channel-MLP residual sub-blocks.

use rand::{Rng, RngCore};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::mixer::{MixerConfig, TokenMixer};
use crate::norm::{Norm, NormKind};
use crate::params::{ForwardCtx, Init, Mode, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::{Scalar, Tensor};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub mixer: MixerConfig,
    pub norm: NormKind,
    pub activation: Activation,
    pub use_residual: bool,
    pub use_channel_mlp: bool,
    /// LayerScale initial value; `None` disables LayerScale.
    pub layer_scale_init: Option<f64>,
    pub drop_path_rate: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            mixer: MixerConfig::pooling(),
            norm: NormKind::Mln,
            activation: Activation::Gelu,
            use_residual: true,
            use_channel_mlp: true,
            layer_scale_init: Some(1e-5),
            drop_path_rate: 0.0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self, path: &str, channels: usize) -> Result<()> {
        self.mixer.validate(&format!("{path}.mixer"), channels)?;
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(
                format!("{path}.drop_path"),
                format!("must be in [0, 1), got {}", self.drop_path_rate),
            ));
        }
        if let Some(eps) = self.layer_scale_init {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config(
                    format!("{path}.layer_scale_init"),
                    format!("must be positive, got {eps}"),
                ));
            }
        }
        Ok(())
    }
}

/// `fc2(act(fc1(x)))` with 1x1 convolutions `w1: [hidden, C, 1, 1]` and
/// `w2: [C, hidden, 1, 1]`.
pub fn channel_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    fc1: (Var, Var),
    fc2: (Var, Var),
    activation: Activation,
) -> Result<Var> {
    let h = tape.conv2d(x, fc1.0, Some(fc1.1), (1, 1), (0, 0), 1)?;
    let h = tape.activation(h, activation);
    tape.conv2d(h, fc2.0, Some(fc2.1), (1, 1), (0, 0), 1)
}

/// Stochastic depth over the leading (sample) axis. In train mode each
/// sample is kept when `u >= p` and rescaled by `1 / (1 - p)`, else zeroed.
pub fn drop_path<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("drop_path: rate {p} outside [0, 1)")));
    }
    if p == 0.0 || mode == Mode::Eval {
        return Ok(x);
    }
    let batch = tape.shape(x).first().copied().unwrap_or(0);
    let keep = T::of(1.0 / (1.0 - p));
    let factors = (0..batch)
        .map(|_| if rng.random::<f64>() >= p { keep } else { T::zero() })
        .collect();
    tape.scale_samples(x, factors)
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub config: BlockConfig,
    pub channels: usize,
    norm1: Norm,
    mixer: TokenMixer,
    layer_scale_1: Option<ParamId>,
    norm2: Option<Norm>,
    mlp: Option<Mlp>,
    layer_scale_2: Option<ParamId>,
}

impl Block {
    pub fn build<T: Scalar>(
        config: BlockConfig,
        channels: usize,
        tokens: usize,
        prefix: &str,
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        config.validate(prefix, channels)?;
        let c = channels;
        let layer_scale = |name: &str, store: &mut ParamStore<T>, init: &Init<'_>| {
            config
                .layer_scale_init
                .map(|eps| store.add(format!("{prefix}.{name}"), ParamKind::Trainable, init.constant(&[c], eps)))
        };
        let norm1 = Norm::build(config.norm, c, &format!("{prefix}.norm1"), store, init);
        let mixer = TokenMixer::build(&config.mixer, c, tokens, &format!("{prefix}.mixer"), store, init)?;
        let layer_scale_1 = layer_scale("layer_scale_1", store, init);
        let (mut norm2, mut mlp, mut layer_scale_2) = (None, None, None);
        if config.use_channel_mlp {
            norm2 = Some(Norm::build(config.norm, c, &format!("{prefix}.norm2"), store, init));
            let hidden = MLP_RATIO * c;
            let mut conv = |name: &str, cout: usize, cin: usize| {
                (
                    store.add(
                        format!("{prefix}.mlp.{name}.weight"),
                        ParamKind::Trainable,
                        init.trunc_normal(&[cout, cin, 1, 1], INIT_STD),
                    ),
                    store.add(format!("{prefix}.mlp.{name}.bias"), ParamKind::Trainable, Tensor::zeros([cout])),
                )
            };
            let fc1 = conv("fc1", hidden, c);
            let fc2 = conv("fc2", c, hidden);
            mlp = Some(Mlp { fc1, fc2 });
            layer_scale_2 = layer_scale("layer_scale_2", store, init);
        }
        Ok(Block {
            config,
            channels,
            norm1,
            mixer,
            layer_scale_1,
            norm2,
            mlp,
            layer_scale_2,
        })
    }

    pub fn mixer(&self) -> &TokenMixer {
        &self.mixer
    }

    fn branch_out<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, branch: Var, ls: Option<ParamId>) -> Result<Var> {
        let branch = match ls {
            Some(id) => {
                let v = ctx.var(id);
                ctx.tape.mul_channel(branch, v)?
            }
            None => branch,
        };
        let branch = drop_path(ctx.tape, branch, self.config.drop_path_rate, ctx.mode, &mut *ctx.rng)?;
        if self.config.use_residual {
            ctx.tape.add(x, branch)
        } else {
            Ok(branch)
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let h = self.mixer.forward(ctx, h)?;
        let y = self.branch_out(ctx, x, h, self.layer_scale_1)?;
        let (Some(norm2), Some(mlp)) = (&self.norm2, &self.mlp) else {
            return Ok(y);
        };
        let h = norm2.forward(ctx, y)?;
        let fc1 = (ctx.var(mlp.fc1.0), ctx.var(mlp.fc1.1));
        let fc2 = (ctx.var(mlp.fc2.0), ctx.var(mlp.fc2.1));
        let h = channel_mlp(ctx.tape, h, fc1, fc2, self.config.activation)?;
        self.branch_out(ctx, y, h, self.layer_scale_2)
    }
}

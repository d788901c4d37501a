//! Four-stage hierarchical model: patch embeddings, blocks, final norm, head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::block::Block;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::norm::Norm;
use crate::params::{BnUpdate, ForwardCtx, Init, Mode, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
struct Embed {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    embeds: Vec<Embed>,
    stages: Vec<Vec<Block>>,
    final_norm: Norm,
    head: (ParamId, ParamId),
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; identical seeds give identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with(config, &mut Init::Random(&mut rng))
    }

    /// Builds the structure with every tensor zeroed, ready to be loaded into.
    pub fn build_zeroed(config: &ModelConfig) -> Result<Self> {
        Self::build_with(config, &mut Init::Zeros)
    }

    fn build_with(config: &ModelConfig, init: &mut Init<'_>) -> Result<Self> {
        config.validate()?;
        let grids = config.stage_grids(config.input_size, config.input_size)?;
        let block_configs = config.block_configs()?;
        let mut store = ParamStore::new();
        let mut embeds = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for s in 0..4 {
            let c = config.dims[s];
            let k = config.patch[s].kernel;
            let prefix = format!("stage{}", s + 1);
            embeds.push(Embed {
                weight: store.add(
                    format!("{prefix}.embed.weight"),
                    ParamKind::Trainable,
                    init.trunc_normal(&[c, cin, k, k], INIT_STD),
                ),
                bias: store.add(format!("{prefix}.embed.bias"), ParamKind::Trainable, Tensor::zeros([c])),
            });
            let tokens = grids[s].0 * grids[s].1;
            let blocks = block_configs[s]
                .iter()
                .enumerate()
                .map(|(j, bc)| Block::build(*bc, c, tokens, &format!("{prefix}.block{j}"), &mut store, init))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            cin = c;
        }
        let final_norm = Norm::build(config.norm, cin, "norm", &mut store, init);
        let head = (
            store.add(
                "head.weight",
                ParamKind::Trainable,
                init.trunc_normal(&[config.num_classes, cin], INIT_STD),
            ),
            store.add("head.bias", ParamKind::Trainable, Tensor::zeros([config.num_classes])),
        );
        Ok(Model {
            config: config.clone(),
            store,
            embeds,
            stages,
            final_norm,
            head,
        })
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    /// `(trainable, frozen)` scalar counts. Buffers are in neither.
    pub fn param_counts(&self) -> (u64, u64) {
        (self.store.count(ParamKind::Trainable), self.store.count(ParamKind::Frozen))
    }

    /// Records the forward pass of `x: [B, C_in, H, W]` on `ctx.tape` and
    /// returns logits `[B, num_classes]`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (s, (embed, blocks)) in self.embeds.iter().zip(&self.stages).enumerate() {
            let p = self.config.patch[s];
            let (w, b) = (ctx.var(embed.weight), ctx.var(embed.bias));
            h = ctx
                .tape
                .conv2d(h, w, Some(b), (p.stride, p.stride), (p.padding, p.padding), 1)
                .map_err(|e| Error::invalid(format!("stage {} patch embed: {e}", s + 1)))?;
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
        }
        let h = self.final_norm.forward(ctx, h)?;
        let pooled = ctx.tape.mean_spatial(h)?;
        let (w, b) = (ctx.var(self.head.0), ctx.var(self.head.1));
        ctx.tape.linear(pooled, w, Some(b))
    }

    /// Runs a forward pass on a fresh tape. Returns logits and the BatchNorm
    /// statistics gathered in train mode (not yet applied).
    pub fn run(&self, x: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor<T>, Vec<BnUpdate<T>>)> {
        let mut tape = Tape::new();
        let bindings = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, &bindings, mode, rng);
        let y = self.forward(&mut ctx, xv)?;
        let updates = ctx.into_bn_updates();
        Ok((tape.value(y).clone(), updates))
    }

    /// Eval-mode logits. Pure: no randomness, no state change.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(x, Mode::Eval, &mut unused)?.0)
    }

    /// Eval-mode class predictions, one per sample.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.infer(x)?;
        Ok(argmax_rows(&logits))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        self.store.apply_bn_updates(updates);
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            embeds: self.embeds.clone(),
            stages: self.stages.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head,
        }
    }
}

/// Index of the largest entry of each row of a `[B, K]` tensor (first on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

//! Central finite-difference check of a whole model's backward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ForwardCtx, Mode, ParamKind};
use crate::tensor::Tensor;

/// Largest trainable parameter count accepted.
pub const MAX_PARAMS: u64 = 200_000;
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub batch: usize,
    /// Coordinates checked per tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Scales every analytic gradient by 1.01 before comparing. A negative
    /// control for the checker itself.
    pub corrupt_analytic: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            tolerance: 1e-4,
            batch: 2,
            samples_per_tensor: 4,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `stage2.block0.mlp.fc1.weight` -> `stage2.block0`; `head.bias` -> `head`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = if parts[0].starts_with("stage") { 2 } else { 1 };
    parts[..keep.min(parts.len())].join(".")
}

struct Problem {
    model: Model<f64>,
    input: Tensor<f64>,
    targets: Vec<usize>,
    seed: u64,
}

impl Problem {
    /// Train-mode loss with the drop-path RNG reset, so every evaluation
    /// sees the same masks.
    fn loss(&self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut tape = Tape::new();
        let bindings = self.model.store.bind(&mut tape);
        let x = tape.constant(self.input.clone());
        let mut ctx = ForwardCtx::new(&mut tape, &self.model.store, &bindings, Mode::Train, &mut rng);
        let logits = self.model.forward(&mut ctx, x)?;
        let loss = tape.cross_entropy(logits, &self.targets, 0.1)?;
        tape.value(loss).item()
    }

    fn analytic(&self) -> Result<Vec<Option<Tensor<f64>>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut tape = Tape::new();
        let bindings = self.model.store.bind(&mut tape);
        let x = tape.constant(self.input.clone());
        let mut ctx = ForwardCtx::new(&mut tape, &self.model.store, &bindings, Mode::Train, &mut rng);
        let logits = self.model.forward(&mut ctx, x)?;
        let loss = tape.cross_entropy(logits, &self.targets, 0.1)?;
        let mut grads = tape.backward(loss)?;
        Ok(self
            .model
            .store
            .ids()
            .map(|id| match self.model.store.entry(id).kind {
                ParamKind::Trainable => grads.take(bindings.var(id)),
                _ => None,
            })
            .collect())
    }
}

/// Compares analytic gradients of a seeded f64 model against central
/// differences on a sample of coordinates of every trainable tensor.
pub fn gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let probe = Model::<f32>::build_zeroed(config)?;
    let (trainable, _) = probe.param_counts();
    if trainable > MAX_PARAMS {
        return Err(Error::invalid(format!(
            "config has {trainable} trainable parameters; finite differences are limited to {MAX_PARAMS}. \
             Use smaller dims/depths (e.g. dims 8/16/32/64, depths 1/1/2/1) or a smaller input size"
        )));
    }
    if opts.batch == 0 || opts.samples_per_tensor == 0 {
        return Err(Error::invalid("batch and samples per tensor must be positive"));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    data_rng.set_stream(1);
    let s = config.input_size;
    let input = Tensor::from_fn([opts.batch, config.in_channels, s, s], |_| data_rng.random_range(-1.0..1.0));
    let targets = (0..opts.batch).map(|_| data_rng.random_range(0..config.num_classes)).collect();
    let mut problem = Problem {
        model: Model::build(config, opts.seed)?,
        input,
        targets,
        seed: opts.seed,
    };
    let analytic = problem.analytic()?;
    let mut groups: BTreeMap<String, (usize, f64, usize)> = BTreeMap::new();
    let ids: Vec<_> = problem.model.store.ids().collect();
    for (order, id) in ids.into_iter().enumerate() {
        let Some(grad) = &analytic[id.index()] else { continue };
        let name = problem.model.store.entry(id).name.clone();
        let n = grad.numel();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| data_rng.random_range(0..n)).collect()
        };
        let slot = groups.entry(group_of(&name)).or_insert((0, 0.0, order));
        for i in coords {
            let orig = problem.model.store.get(id).data()[i];
            problem.model.store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = problem.loss()?;
            problem.model.store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = problem.loss()?;
            problem.model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let mut a = grad.data()[i];
            if opts.corrupt_analytic {
                a *= 1.01;
            }
            slot.0 += 1;
            slot.1 = slot.1.max(rel_err(a, numeric));
        }
    }
    let mut groups: Vec<(usize, GroupResult)> = groups
        .into_iter()
        .map(|(group, (checked, max_rel_err, order))| {
            (
                order,
                GroupResult {
                    group,
                    checked,
                    max_rel_err,
                    passed: max_rel_err < opts.tolerance,
                },
            )
        })
        .collect();
    groups.sort_by_key(|(order, _)| *order);
    let groups: Vec<GroupResult> = groups.into_iter().map(|(_, g)| g).collect();
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        passed: groups.iter().all(|g| g.passed),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            dims: [4, 8, 8, 8],
            depths: [1, 1, 1, 1],
            ..ModelConfig::tiny(3, 16)
        }
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("stage2.block0.mlp.fc1.weight"), "stage2.block0");
        assert_eq!(group_of("stage1.embed.bias"), "stage1.embed");
        assert_eq!(group_of("head.bias"), "head");
    }

    #[test]
    fn small_model_passes_and_corruption_fails() {
        let ok = gradcheck(&small(), &GradcheckOptions::default()).unwrap();
        assert!(ok.passed, "{ok:?}");
        assert_eq!(ok.groups.first().unwrap().group, "stage1.embed");
        assert_eq!(ok.groups.last().unwrap().group, "head");
        let bad = gradcheck(
            &small(),
            &GradcheckOptions {
                corrupt_analytic: true,
                ..GradcheckOptions::default()
            },
        )
        .unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn refuses_large_configs() {
        let err = gradcheck(&ModelConfig::tiny(10, 32), &GradcheckOptions::default()).unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("200000"), "{err}");
    }
}

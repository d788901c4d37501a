//! Named parameter storage and the per-forward execution context.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Randomly initialized, then never updated (the global random mixing matrix).
    Frozen,
    /// Non-learned running state (BatchNorm statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, ordered list of every tensor a model owns. Order is build order and
/// is the canonical order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn count(&self, kind: ParamKind) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.value.numel() as u64)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Puts every trainable and frozen tensor on the tape. Trainable tensors
    /// become gradient-receiving leaves; frozen ones become constants. Buffers
    /// are read directly from the store and get no node.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Some(tape.param(e.value.clone())),
                ParamKind::Frozen => Some(tape.constant(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Bindings { vars }
    }

    /// Folds BatchNorm batch statistics into the running buffers:
    /// `running <- (1 - m) * running + m * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let m = T::of(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Tape variables for the entries of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Pending BatchNorm running-statistic update. `batch_var` is already the
/// unbiased estimate.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: f64,
}

/// Everything a module needs during one forward pass.
pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub bindings: &'a Bindings,
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        bindings: &'a Bindings,
        mode: Mode,
        rng: &'a mut dyn RngCore,
    ) -> Self {
        ForwardCtx {
            tape,
            store,
            bindings,
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bindings.var(id)
    }

    pub fn push_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate<T>> {
        self.bn_updates
    }
}

/// How freshly built parameters are filled.
pub enum Init<'a> {
    Random(&'a mut dyn RngCore),
    /// All zeros; used when the values are about to be overwritten by a load.
    Zeros,
}

pub(crate) const INIT_STD: f64 = 0.02;
/// Truncation bound of the weight initializer, in standard deviations.
pub(crate) const TRUNC_SIGMAS: f64 = 2.0;

impl Init<'_> {
    /// Normal(0, std) samples rejected outside `±2 std`.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Random(rng) => Tensor::from_fn(shape.to_vec(), |_| {
                let z = loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= TRUNC_SIGMAS {
                        break z;
                    }
                };
                T::of(z * std)
            }),
        }
    }

    /// Uniform `[0, 1)` rows, each passed through softmax.
    pub fn softmax_uniform_rows<T: Scalar>(&mut self, n: usize) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros([n, n]),
            Init::Random(rng) => {
                let mut data: Vec<f64> = (0..n * n)
                    .map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
                    .collect();
                for row in data.chunks_mut(n) {
                    crate::autodiff::softmax_in_place(row);
                }
                Tensor::new([n, n], data.into_iter().map(T::of).collect()).expect("n x n")
            }
        }
    }

    pub fn constant<T: Scalar>(&self, shape: &[usize], v: f64) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Random(_) => Tensor::full(shape.to_vec(), T::of(v)),
        }
    }
}

pub(crate) fn check_positive(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(path, "must be positive"));
    }
    Ok(())
}

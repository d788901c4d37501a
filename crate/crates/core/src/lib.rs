//! MetaFormer image classifiers with pluggable token mixers, built on a small
//! tape-based reverse-mode autodiff engine.

pub mod analysis;
pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mixer;
pub mod model;
pub mod norm;
pub mod params;
pub mod tensor;
pub mod train;

pub use analysis::{analyze, CostReport};
pub use autodiff::{Activation, Gradients, Tape, Var};
pub use block::BlockConfig;
pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use mixer::MixerConfig;
pub use model::Model;
pub use norm::NormKind;
pub use params::{Mode, ParamKind, ParamStore};
pub use tensor::{DType, Scalar, Tensor};

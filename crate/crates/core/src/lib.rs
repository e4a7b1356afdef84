//! Subclass segmentation with limited subclass labels and abundant
//! superclass labels.
//!
//! * [`tensor`], [`graph`], [`optim`]: dense tensors, reverse-mode
//!   differentiation over a fixed operator set, SGD with momentum.
//! * [`data`]: the label hierarchy, synthetic samples and dataset splits.
//! * [`segnet`]: U-Net backbone, superclass/subclass heads with prior
//!   concatenation and separate normalization, and the losses.
//! * [`hiermix`]: transform-invariant pseudo labels and foreground mixup.
//! * [`metrics`]: Dice and HD95.
//! * [`trainer`]: batching, the training step, runs, checkpoints, ablations.

pub mod data;
pub mod error;
pub mod graph;
pub mod hiermix;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod tsr1;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::{Real, Tensor};

//! Attacks on defensively distilled image classifiers.
//!
//! The crate trains small convolutional classifiers (optionally through
//! two-phase defensive distillation), then attacks them three ways:
//!
//! * [`whitebox::epsilon_attack`]: logit-margin loss minimized with Adam over
//!   a tanh reparameterization of the per-pixel ε-box.
//! * [`blackbox::region_attack`]: the same search driven only by output
//!   probabilities, evaluated at Gaussian-perturbed copies of the iterate.
//! * [`blackbox::bypass_run`]: adversarials crafted on a low-temperature
//!   model, replayed against higher-temperature ones.
//!
//! [`metrics`] aggregates results into CSV reports; [`io`] covers IDX/CIFAR
//! ingestion and the versioned model file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blackbox;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod whitebox;

pub use error::{Error, Result};
pub use network::{ForwardTrace, LayerSpec, Network, Profile};
pub use tensor::Tensor;
pub use train::{LabeledDataset, SoftLabelSet, TrainConfig};

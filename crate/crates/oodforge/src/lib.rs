//! oodforge: domain-wise adversarial training and its invariance-penalty
//! neighbors (ERM, IRMv1, sample-wise AT, UAT, LDAT) over small
//! piecewise-linear ReLU networks.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense arrays with reverse-mode autodiff on a Wengert tape;
//! - [`gradcheck`]: finite-difference oracles used throughout the tests;
//! - [`nets`]: MLP / small-CNN models with exact local linearization;
//! - [`penalties`]: the gradient-penalty functionals and their identity
//!   verification harness;
//! - [`trainers`]: the training algorithms and their shared optimizer;
//! - [`data`]: IDX parsing, the colored-digits correlation-shift dataset,
//!   and a synthetic spurious-feature dataset;
//! - [`harness`]: hyperparameter sampling, leave-one-domain-out evaluation,
//!   model selection, and result emission (backing the `oodforge` binary).

pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod nets;
pub mod penalties;
pub mod tensor;
pub mod trainers;

pub use tensor::{Scalar, Tape, Tensor, TensorError};

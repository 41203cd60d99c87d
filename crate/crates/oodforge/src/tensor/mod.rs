//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: every operation appends a node holding its
//! output value, the operation kind, and the ids of its inputs. Node ids are
//! assigned in execution order, so the vector itself is a topological order
//! and the backward pass is a single reverse sweep that visits each node
//! exactly once. No hashing and no threading are involved anywhere, which is
//! what makes gradients bit-reproducible run to run.
//!
//! Element types are `f32` or `f64` via the [`Scalar`] trait. 64-bit is the
//! default everywhere; the identity checks in `penalties` rely on 1e-8
//! tolerances that only hold there. 32-bit exists purely as a speed option
//! for training runs.
//!
//! Numerical conventions:
//! - ReLU's subgradient at exactly 0 is 0 (the activation mask uses strict
//!   positivity, which keeps local linearizations consistent).
//! - The logistic loss is computed as softplus(−y·ŷ) and the sigmoid is
//!   evaluated branch-wise, so neither overflows for large |logits|.
//! - Non-finite values are rejected when data enters the tape; consumers
//!   re-check scalar losses and updated parameters (see `trainers`), rather
//!   than scanning every intermediate on the hot path.

mod conv;
mod tape;

pub use conv::{col2im, im2col, ConvGeom};
pub use tape::{Tape, Tensor};

use ndarray::NdFloat;
use serde::{de::DeserializeOwned, Serialize};

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar: NdFloat + Serialize + DeserializeOwned + 'static {
    /// Precision tag used in checkpoints and configs ("f32"/"f64").
    const TAG: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Numerically stable sigmoid, evaluated branch-wise so exp never overflows.
#[inline]
pub fn sigmoid<E: Scalar>(t: E) -> E {
    if t >= E::zero() {
        E::one() / (E::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (E::one() + e)
    }
}

/// Numerically stable softplus: max(t,0) + ln(1 + exp(−|t|)).
#[inline]
pub fn softplus<E: Scalar>(t: E) -> E {
    t.max(E::zero()) + (-t.abs()).exp().ln_1p()
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value entering the tape ({context})")]
    NonFinite { context: &'static str },
    #[error("operands belong to different tapes")]
    CrossTape,
    #[error("{0}")]
    Domain(String),
}

//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are bound onto the tape as leaves; after
//! [`Tape::backward`] their gradients are read back and handed to
//! [`AdamW`].

mod check;
mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{gradcheck, op_cases, rel_error, GradcheckReport, OpCase};
pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint, FORMAT_VERSION};
pub use optim::{clip_grad_norm, grad_norm, AdamState, AdamW, StepOutcome};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{inverse_sigmoid, sigmoid, Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by every layer normalisation in the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`]; every operation appends a node, and
//! [`Tape::backward`] sweeps the nodes in reverse to accumulate gradients
//! into leaves. Learnable tensors are kept in a [`ParamSet`] and bound onto
//! a fresh tape for each forward pass.

pub mod check;
mod error;
mod linalg;
pub mod nn;
pub mod optim;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use nn::{dropout, gru_cell, lstm_cell, GruVars, LstmVars, Mode};
pub use optim::{adam_step, clip_grad_norm, Adam, AdamConfig, AdamSlot, Bound, ParamId, ParamSet};
pub use tape::{Binary, Tape, Unary, Var};
pub use tensor::Tensor;

/// Default layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

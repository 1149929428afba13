//! Training library for deep residual networks with bias-order
//! regularization.
//!
//! The parameter space of a dense network is massively degenerate: permuting
//! the neurons of a hidden layer (biases together with their incident weight
//! rows/columns) yields a different parameter vector but the same network
//! function. This crate breaks that symmetry by penalizing out-of-order bias
//! pairs within each layer — a quadratic penalty `(γ/2)·Σ ‖min(Δb, 0)‖²` on
//! the negative part of adjacent bias differences — so that trained networks
//! end up with monotonically nondecreasing biases in every hidden layer.
//!
//! Everything is built from scratch on `f64`:
//!
//! - [`tensor`] — minimal dense vector/matrix kernels with fixed summation
//!   order for reproducibility,
//! - [`network`] — ResNet/feedforward definition, forward evaluation,
//!   parameter flattening, permutation tooling, checkpoints,
//! - [`loss`] — data misfit, smoothed L1/L2 regularizers and the
//!   bias-order penalty,
//! - [`adjoint`] — hand-derived reverse-mode gradients via the state/adjoint
//!   equations, plus a finite-difference oracle,
//! - [`optim`] — dense BFGS (optionally L-BFGS) with Armijo backtracking,
//!   validation-patience early stopping and penalty path-following,
//! - [`data`] — the sin(x) regression set, a synthetic stiff-ODE
//!   (Robertson kinetics) trajectory generator with an implicit integrator,
//!   next-step supervision pairs, closed-loop rollout, and CSV/JSON I/O.

pub mod adjoint;
pub mod data;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced by {context} at layer {layer}")]
    NonFinite { context: &'static str, layer: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error("ODE integrator failed for initial condition {ic:?}: {reason}")]
    Integrator { ic: Vec<f64>, reason: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

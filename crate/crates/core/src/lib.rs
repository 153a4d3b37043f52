//! Gating-induced pullbacks for ReLU networks.
//!
//! A ReLU network evaluated at `x` is a product of weight matrices interleaved
//! with 0/1 gate diagonals. Replacing those diagonals by other gate values in
//! `[0, 1]` during the backward pass yields a family of input-space pullbacks:
//! hard gates give the ordinary gradient, sigmoid gates `sigmoid(z / temp)`
//! give excitation pullbacks. This crate computes them, checks them against a
//! brute-force enumeration over network paths, runs projected gradient ascent
//! along them, and measures how stable gate patterns are during training.

// `!(x > 0.0)` is used deliberately so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ascent;
mod conv;
pub mod error;
pub mod gating;
pub mod interface;
pub mod network;
pub mod pathspace;
pub mod pullback;
pub mod stability;
pub mod verify;

pub use ascent::{pga_run, pga_step, AscentConfig, AscentTrajectory, StepOutcome};
pub use error::{Error, Result};
pub use gating::{
    excitation_gate, hard_gate, logistic, pool_softmax_weights, GateKind, GatingSpec, PoolGate,
};
pub use network::{
    Affine, Conv, ForwardTrace, InducedForward, MaxPool, Network, Normalization, PoolRecord, Shape,
    Stage, Violation,
};
pub use pathspace::{PathIndex, PathLayout, PathTable, TensorField};
pub use pullback::{
    finite_diff_gradient, pullback_covector, pullback_head, pullback_neuron, FiniteDiffGradient,
    PullbackTarget, PullbackVector,
};
pub use stability::{
    gate_flip_rate, pearson, stability_report, train_sgd, StabilityReport, TrainConfig,
};

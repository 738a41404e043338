//! Adaptive sparse attention and adaptive monotonic multi-head attention.
//!
//! * [`transforms`]: softmax, sparsemax, 1.5-entmax, bisection α-entmax, Tsallis entropy.
//! * [`gradients`]: vector-Jacobian products, ∂p/∂α, finite-difference oracles.
//! * [`attention`]: multi-head scaled dot-product attention with per-head normalizers.
//! * [`monotonic`]: monotonic energy, hard decoding, expected alignment, L1 head penalty.
//! * [`train`]: synthetic alignment tasks and a small trainer with manual backprop.
//! * [`cli`]: the command implementations behind the `adasparse` binary.

// NaN must fail range checks, so `!(x > 0.0)` is deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod error;
pub mod gradients;
pub mod monotonic;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};

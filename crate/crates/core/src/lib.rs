// SPDX-License-Identifier: MIT OR Apache-2.0

//! A toy-scale transformer laboratory for positional hidden-state channels.
//!
//! The crate builds small decoder-only transformers with deterministic
//! seeded weights and studies how position information stored in
//! individual residual-stream channels shapes attention:
//!
//! - [`numerics`]: smoothing, cubic least squares, monotonicity and
//!   smoothness scores, plus the dense kernels the model runs on.
//! - [`toymodel`]: the transformer, its checkpoint format, and a forward
//!   pass with declarative overrides (mask, position ids, channel edits,
//!   attention boosts) and captures.
//! - [`probe`]: segment attention, averaged hidden-state dumps (PHSD
//!   files), and the perturbation builders.
//! - [`search`]: monotone/smooth candidate channels and selection by
//!   calibration loss.
//! - [`scaling`]: last-token attention recomputed from hidden states whose
//!   positional channels are scaled.
//! - [`harness`]: synthetic key-value retrieval, position sweeps,
//!   experiment presets and report emission.

pub mod error;
pub mod harness;
pub mod numerics;
pub mod probe;
pub mod scaling;
pub mod search;
pub mod toymodel;

pub use error::{Error, Result};

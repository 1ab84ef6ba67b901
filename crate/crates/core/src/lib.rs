//! Offline preference optimization with reward-difference coefficients.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode AD tape over dense `f64` arrays.
//! - [`model`]: a tiny causal transformer with policy, reward and pairwise
//!   difference heads, plus checkpointing and decoding.
//! - [`scoring`]: Bradley-Terry reward loss and the difference-model
//!   objective with its duplication and reverse regularizers.
//! - [`coefficients`]: per-pair reward-difference coefficients `R^alpha`.
//! - [`alignment`]: SFT, RRHF, DPO and KTO losses, each optionally weighted
//!   by coefficients.
//! - [`datagen`]: synthetic preference corpora with an exact ground-truth
//!   reward, and the JSONL dataset format.
//! - [`harness`]: training loops, evaluation and run directories.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::manual_is_multiple_of)]

pub mod alignment;
pub mod autodiff;
pub mod coefficients;
pub mod datagen;
pub mod digest;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod scoring;
pub mod seed;
pub mod verify;

pub use autodiff::{Array, Gradients, Tape, Var};
pub use error::{Error, Result};

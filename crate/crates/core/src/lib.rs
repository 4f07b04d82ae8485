//! Neuro-fuzzy networks with learnable rule structure, batch-delayed
//! neurogenesis and a small Dueling Double DQL harness.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fuzzy;
pub mod inference;
pub mod neurogenesis;
pub mod rl;
pub mod rules;
pub mod training;

pub use error::{NfnError, Result};

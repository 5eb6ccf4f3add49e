//! Speculative decoding with a cascaded non-autoregressive drafter.
//!
//! The crate bundles a small decoder-only target transformer, a drafter that
//! emits `N` next-token distributions in one pass, backbone draft trees,
//! lossless tree verification, drafter training and a generation engine.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod target_model;
pub mod drafter;
pub mod draft_tree;
pub mod verification;
pub mod training;
pub mod engine;
pub mod cli;

pub use error::{Error, Result};

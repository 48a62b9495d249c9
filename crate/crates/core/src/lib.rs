//! Activation-sensitivity analysis for post-training weight quantization.
//!
//! The crate computes loss-derived channel sensitivity for the linear layers
//! of small dense networks, the cheaper proxies that quantizers rely on, the
//! quantizers themselves (round-to-nearest, activation-aware scaling and
//! Hessian-compensated greedy rounding), and a set of experiments that measure
//! where the proxies break down.

pub mod calib;
pub mod cli;
pub mod diagnostics;
pub mod error;
mod fmt;
pub mod netcore;
pub mod numerics;
pub mod quantize;
pub mod sensitivity;

pub use error::{Error, Result};

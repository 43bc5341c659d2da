//! Frozen softmax attention networks that emulate algorithms in-context.
//!
//! The crate builds fixed-weight attention layers whose behaviour is selected
//! entirely by the prompt: a two-layer network that reproduces an arbitrary
//! attention head from its weights packed into tokens, single layers that run
//! gradient descent on in-context regression data, modern Hopfield variants of
//! the same constructions, and a small trainer for the learned counterparts.

pub mod algorithms;
pub mod attention;
pub mod data;
pub mod emulator;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod hopfield;
pub mod linalg;
pub mod prompt;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;

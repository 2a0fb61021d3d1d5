//! Variational Bi-LSTM sequence modeling.
//!
//! A self-contained f64 implementation: a define-by-run autodiff tape, LSTM
//! cells (the forward one augmented with a latent variable and a backward
//! summary), the variational objective, Adam training, and a small CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod recurrent;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}

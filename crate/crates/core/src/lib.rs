//! Distribution-preserving lossy compression on CPU.
//!
//! A compressor here is a deterministic encoder to a finite code followed
//! by a stochastic decoder whose outputs follow the data distribution at
//! every rate. The crate provides the pieces to build, train and measure
//! such systems: priors and datasets, quantizers, divergence estimators,
//! networks with a small reverse-mode autodiff engine, training loops, and
//! evaluation sweeps.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod divergences;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod optim;
pub mod quantization;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

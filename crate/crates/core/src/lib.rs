//! Error-bounded lossy compression of CNN activations, the adaptive
//! error-bound controller that sizes each layer's bound from training
//! statistics, and a small deterministic CNN engine used both as a
//! gradient oracle and as an end-to-end testbed.
//!
//! Module map:
//!
//! * [`tensor`]: dense row-major tensors, statistics, the `CMTT` file format.
//! * [`codec`]: dual quantization, 1-D Lorenzo prediction, canonical Huffman
//!   coding and the zero-preserving decompression filter (`CMTZ` format).
//! * [`errprop`]: uniform error injection, the gradient-error model and the
//!   Monte Carlo calibration of its coefficient.
//! * [`controller`]: per-layer statistics, error-bound planning, collection
//!   interval adaptation and batch sizing.
//! * [`nn`]: layers, SGD with momentum, activation storage and the training loop.
//! * [`data`]: IDX loading and the synthetic image generator.

pub mod codec;
pub mod controller;
pub mod data;
pub mod errprop;
mod error;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};

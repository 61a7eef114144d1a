//! Core library for studying low-bit weight-only quantization errors on a
//! small pre-LN GLU transformer.
//!
//! The crate is split along the measurement pipeline:
//!
//! - [`runtime`]: deterministic CPU forward pass with opt-in activation taps
//!   and cross-model activation patching hooks.
//! - [`quant`]: RTN, NormalFloat, GPTQ, and AWQ weight-only quantizers plus
//!   mixed-precision restoration.
//! - [`metrics`]: per-example error vectors, Pearson correlations, residual
//!   magnitudes, kurtosis profiles, layer-wise MSE, and large-error /
//!   control set construction.
//! - [`localize`]: early exiting (logit lens) and cross-model activation
//!   patching reports.
//!
//! Everything here is pure computation over in-memory tensors; file formats
//! and the CLI live in the companion `quanterr` crate. The crate is
//! `no_std`-compatible (with `alloc`); transcendental functions go through
//! `libm` so results are bit-identical with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod corpus;
pub mod fixture;
pub mod localize;
pub mod math;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod weights;

pub use config::ModelConfig;
pub use corpus::{Document, TokenCorpus};
pub use runtime::{ActivationTrace, Tap, TapSpec};
pub use tensor::Matrix;
pub use weights::ModelWeights;

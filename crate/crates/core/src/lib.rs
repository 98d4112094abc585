//! Sparse-view fan-beam CT reconstruction with wavelet-domain score-based
//! diffusion priors.
//!
//! The pipeline simulates fan-beam projections of synthetic phantoms,
//! splits sinograms into Haar sub-bands, learns score models on the
//! full four-band stack and on the three detail bands, and completes
//! missing views with a two-stage predictor-corrector sampler before a
//! final filtered backprojection.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fbp;
pub mod phantom;
pub mod projector;
pub mod wavelet;
pub mod diffusion;
pub mod sampler;
pub mod metrics;
pub mod io;
pub mod pipeline;

pub use error::{Result, SwordError};

//! Thermal positional encoding for attention-based crop classification of
//! satellite image time series.
//!
//! The crate covers growing-degree-day computation, the positional encoders
//! (calendar and thermal sinusoids, learnable Fourier features, a recurrent
//! encoder), a pixel-set encoder with a lightweight temporal attention
//! classifier, a synthetic multi-region phenology generator and a
//! leave-one-region-out evaluation harness.

pub mod encodings;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthgen;
pub mod thermal;

pub use error::{Error, Result};

//! Text-guided spatiotemporal traffic forecasting and traffic-conditioned
//! report generation, implemented from scratch on dense `f64` kernels with
//! hand-derived gradients.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod gradcheck;
pub mod nn;
pub mod numerics;
pub mod predictor;
pub mod text_encoder;
pub mod tokenizer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

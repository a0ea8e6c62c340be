//! Interactive sketch-based image retrieval.
//!
//! Vector sketches and raster images are embedded into one search space;
//! results are grouped into candidate intents and the query sketch is
//! nudged toward intents the user weights up, by gradient descent on its
//! recurrent latent code.

pub mod ann;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod intent;
pub mod joint;
pub mod numerics;
pub mod perturb;
pub mod pipeline;
pub mod raster_encoder;
pub mod service;
pub mod sketch;
pub mod vae;

pub use error::{Error, Result};

/// Default double-precision tensor.
pub type Tensor64 = numerics::Tensor<f64>;
/// Single-precision tensor, used for stored index vectors.
pub type Tensor32 = numerics::Tensor<f32>;

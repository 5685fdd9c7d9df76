//! Infrared image super-resolution by next-scale autoregression over a
//! condition-adaptive codebook, guided by heat-source and edge priors.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod degrade;
pub mod error;
pub mod guidance;
pub mod imaging;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod train;

pub use error::{Error, Result};

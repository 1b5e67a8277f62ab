//! Cluster-based triad recurrent bias correction of hourly air-quality
//! forecasts.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod series;
pub mod station;
pub mod synth;
pub mod trainer;
pub mod window;

pub use error::{Error, Result};

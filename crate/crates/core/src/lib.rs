//! Direction-of-arrival estimation with a stacked intelligent metasurface
//! trained to act as a two-dimensional DFT.

pub mod analysis;
pub mod config;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod manifest;
pub mod trainer;
pub mod wave;

pub use error::{ConfigErrorKind, Error, Result};

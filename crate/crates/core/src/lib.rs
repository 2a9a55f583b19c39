//! Correspondence estimation by reverse-diffusion sampling over matching
//! matrices, with the supporting projections, optimal-transport solvers,
//! synthetic benchmarks and metrics.

pub mod cli;
pub mod denoise;
pub mod error;
pub mod geometry;
pub mod io;
pub mod matmath;
pub mod metrics;
pub mod otsolve;
pub mod sampler;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};

//! Lossy compression and conditional emulation of gridded space-time fields.
//!
//! A field `Y(x, t)` on a latitude/longitude grid is transformed to per-pixel
//! Fourier coefficients. Each pixel gets a semiparametric spectral density
//! `f(ω; x) = exp(u0(ω) + θ(x)·u(ω))`, and the maps of scaled coefficients at
//! every frequency are modeled as independent Matérn (smoothness 1) fields with
//! a frequency-dependent inverse range `κ(ω)`, represented through a sparse
//! SPDE precision matrix on a triangulated sphere.
//!
//! Compression stores the fitted model plus a greedily chosen, budget-limited
//! set of coefficients. Decompression fills in the rest by conditional
//! expectation or conditional simulation.

pub mod codec;
pub mod condgp;
mod error;
pub mod evalmetrics;
pub mod gridio;
pub mod rng;
pub mod select;
pub mod spde;
pub mod spectral;
pub mod specmodel;
pub mod synthgen;

pub use error::{Error, Result};
pub use num_complex::Complex64;

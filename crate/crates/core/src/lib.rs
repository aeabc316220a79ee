//! Simulation and analysis of full-field photon-counting images of
//! spontaneous parametric down-conversion.
//!
//! The crate covers the whole chain: a double-Gaussian biphoton source, a
//! thresholded EMCCD-like detector, the FFT intercorrelation estimator with
//! its witness, 2D Gaussian peak fitting and the position–momentum
//! uncertainty report. Data-parallel loops run on rayon when the `parallel`
//! feature is enabled (default) and fall back to sequential loops otherwise;
//! results are identical either way.

// NaN must fail these guards, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod correlator;
pub mod detector;
pub mod error;
mod fft2;
pub mod optics;
pub mod peakfit;
pub mod par;
pub mod report;
pub mod rng;
pub mod source;

pub use error::{Error, Result};

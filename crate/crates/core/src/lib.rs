//! Estimation of lens modulation transfer function (MTF) charts from
//! photographs.
//!
//! The pipeline measures PSFs from pinhole-panel images ([`psf_lab`]),
//! interpolates them across the field ([`kernel_regression`]), synthesizes
//! blurred training patches ([`training_data`]), trains a convolutional
//! regressor that predicts local MTF values ([`estimator`]) and aggregates
//! local estimates into global charts with Gaussian-process regression
//! ([`aggregate`]). MTF computations live in [`mtf_core`].

pub mod aggregate;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod kernel_regression;
pub mod mtf_core;
pub mod oracle;
pub mod pgm;
pub mod plane;
pub mod psf_lab;
pub mod training_data;

pub use error::{Error, Result};
pub use plane::{GrayImage, Plane};

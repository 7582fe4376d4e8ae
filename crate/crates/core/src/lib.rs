//! Simulation and reconstruction toolkit for 3D wide-field fluorescence
//! microscopy: pupil-plane PSF synthesis, a noisy forward model, classical
//! deconvolution baselines, and a measurement-to-clean stochastic-interpolant
//! transport driven by a lateral-axial factorized U-Net.

pub mod error;
pub mod optics;
pub mod voxgrid;

pub use error::{Error, Result};
pub use voxgrid::{Grid, Volume};
pub mod classical;
pub mod evalsuite;
pub mod interpolant;
pub mod laxnet;
pub mod phantom;
pub mod sampler;

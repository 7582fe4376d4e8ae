//! Wide-field PSF synthesis from pupil-plane optics and the forward imaging model.

mod forward;
mod poisson;
mod psf;
mod zernike;

pub use forward::{convolve3d, forward_image, NoiseConfig, Otf};
pub use poisson::sample_poisson;
pub use psf::{compute_psf, Psf};
pub use zernike::{noll_to_nm, zernike, zernike_phase, PupilPhase};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::Grid;

/// Pupil-plane description of the microscope and its sampling grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    /// Emission wavelength in micrometers.
    pub lambda_em: f64,
    /// Excitation wavelength in micrometers; carried as metadata.
    pub lambda_ex: f64,
    pub na: f64,
    /// Immersion refractive index.
    pub n0: f64,
    /// `(noll_index, coefficient in waves RMS)` pairs.
    pub zernike: Vec<(u32, f64)>,
    pub grid: Grid,
}

impl OpticalConfig {
    /// Water-immersion FITC setup on the full 136x136x40 grid.
    pub fn paper() -> Self {
        OpticalConfig {
            lambda_em: 0.515,
            lambda_ex: 0.488,
            na: 1.1,
            n0: 1.33,
            zernike: Vec::new(),
            grid: Grid {
                nx: 136,
                ny: 136,
                nz: 40,
                dx: 0.1,
                dy: 0.1,
                dz: 0.3,
            },
        }
    }

    /// Same optics on the 32x32x8 desk grid.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.grid.nx = 32;
        cfg.grid.ny = 32;
        cfg.grid.nz = 8;
        cfg
    }

    pub fn with_grid(mut self, grid: Grid) -> Self {
        self.grid = grid;
        self
    }

    /// Pupil cutoff frequency `na / lambda_em` in cycles per micrometer.
    pub fn cutoff(&self) -> f64 {
        self.na / self.lambda_em
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.lambda_em > 0.0 && self.lambda_em.is_finite()) {
            return Err(Error::Config(format!("lambda_em must be positive, got {}", self.lambda_em)));
        }
        if !(self.na > 0.0 && self.na <= self.n0) {
            return Err(Error::Config(format!(
                "need 0 < na <= n0, got na = {}, n0 = {}",
                self.na, self.n0
            )));
        }
        let limit = 1.0 / (2.0 * 2.0 * self.cutoff());
        if self.grid.dx > limit || self.grid.dy > limit {
            return Err(Error::Config(format!(
                "lateral sampling ({}, {}) um violates Nyquist limit {:.4} um",
                self.grid.dx, self.grid.dy, limit
            )));
        }
        for &(j, _) in &self.zernike {
            if !(1..=15).contains(&j) {
                return Err(Error::UnsupportedNoll(j));
            }
        }
        Ok(())
    }
}

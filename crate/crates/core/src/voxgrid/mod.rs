//! Volume data model shared by every other module.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`, so each lateral slice is one contiguous run.

mod fft;
mod io;
mod manifest;
mod rng;

pub use fft::{fft2_plane_inverse, fft3, fftfreq, ifft3, Spectrum};
pub use io::{load_volume, save_volume, read_volume, write_volume, VOLUME_MAGIC};
pub use manifest::{DatasetManifest, DatasetRecord, Split};
pub use rng::{derive_stream, mix64, RngStream};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts and physical spacing (micrometers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let g = Grid {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidDims(format!(
                "voxel counts must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !(ok(self.dx) && ok(self.dy) && ok(self.dz)) {
            return Err(Error::InvalidDims(format!(
                "spacings must be positive, got ({}, {}, {})",
                self.dx, self.dy, self.dz
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }
}

/// Real-valued 3D field on a physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }

    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidDims(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                grid.nx,
                grid.ny,
                grid.nz
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.nz {
            for y in 0..grid.ny {
                for x in 0..grid.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    /// Contiguous lateral slice at depth `z`.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.grid.nx * self.grid.ny;
        &self.data[z * n..(z + 1) * n]
    }

    pub fn check_same_dims(&self, other: &Volume, what: &str) -> Result<()> {
        if self.grid.same_dims(&other.grid) {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.grid.dims(),
                other.grid.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        self.check_same_dims(other, "zip_map")?;
        Ok(Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Volume {
        self.map(|v| v * s)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Rounds every value to the nearest 32-bit float, the on-disk precision.
    pub fn quantized(&self) -> Volume {
        self.map(|v| v as f32 as f64)
    }
}

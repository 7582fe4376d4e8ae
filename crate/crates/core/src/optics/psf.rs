use num_complex::Complex64;
use serde::Serialize;

use super::{zernike_phase, OpticalConfig};
use crate::error::Result;
use crate::voxgrid::{fft2_plane_inverse, fftfreq, Volume};

/// Intensity point-spread function centered at voxel `(nx/2, ny/2, nz/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    pub volume: Volume,
    pub config: OpticalConfig,
    /// Lateral sum of each z-plane before global normalization.
    pub plane_energy: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    optical_config: &'a OpticalConfig,
    plane_energy: &'a [f64],
}

impl Psf {
    /// JSON echo of the generating configuration, written next to saved PSFs.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            optical_config: &self.config,
            plane_energy: &self.plane_energy,
        })
        .expect("config serializes")
    }
}

pub fn compute_psf(cfg: &OpticalConfig) -> Result<Psf> {
    cfg.validate()?;
    let g = cfg.grid;
    let (nx, ny, nz) = g.dims();
    let phase = zernike_phase(cfg)?;
    let cutoff2 = cfg.cutoff().powi(2);
    let medium2 = (cfg.n0 / cfg.lambda_em).powi(2);
    let tau = std::f64::consts::TAU;

    // pupil samples: (plane index, aberrated pupil value, axial frequency)
    let mut pupil = Vec::new();
    for iy in 0..ny {
        let ky = fftfreq(iy, ny, g.dy);
        for ix in 0..nx {
            let kx = fftfreq(ix, nx, g.dx);
            let k2 = kx * kx + ky * ky;
            if k2 <= cutoff2 {
                let p = Complex64::from_polar(1.0, tau * phase.at(ix, iy));
                pupil.push((ix + nx * iy, p, (medium2 - k2).sqrt()));
            }
        }
    }

    let mut data = vec![0.0; g.len()];
    let mut plane_energy = Vec::with_capacity(nz);
    let mut field = vec![Complex64::default(); nx * ny];
    for iz in 0..nz {
        let zeta = (iz as f64 - (nz / 2) as f64) * g.dz;
        field.iter_mut().for_each(|c| *c = Complex64::default());
        for &(i, p, kz) in &pupil {
            field[i] = p * Complex64::from_polar(1.0, -tau * zeta * kz);
        }
        fft2_plane_inverse(&mut field, nx, ny);
        let plane = &mut data[iz * nx * ny..(iz + 1) * nx * ny];
        let mut energy = 0.0;
        for iy in 0..ny {
            let sy = (iy + ny - ny / 2) % ny;
            for ix in 0..nx {
                let sx = (ix + nx - nx / 2) % nx;
                let v = field[sx + nx * sy].norm_sqr();
                plane[ix + nx * iy] = v;
                energy += v;
            }
        }
        plane_energy.push(energy);
    }
    let total: f64 = plane_energy.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Ok(Psf {
        volume: Volume::from_vec(g, data)?,
        config: cfg.clone(),
        plane_energy,
    })
}

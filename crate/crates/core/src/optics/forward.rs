use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{sample_poisson, Psf};
use crate::error::{Error, Result};
use crate::voxgrid::{fft3, ifft3, Grid, RngStream, Spectrum, Volume};

/// Transfer function: FFT of a kernel whose center sits at linear index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Otf {
    pub spectrum: Spectrum,
}

impl Otf {
    pub fn from_psf(psf: &Psf) -> Self {
        Self::from_centered(&psf.volume)
    }

    /// Kernel stored with its center at voxel `(nx/2, ny/2, nz/2)`.
    pub fn from_centered(kernel: &Volume) -> Self {
        let g = *kernel.grid();
        let (cx, cy, cz) = (g.nx / 2, g.ny / 2, g.nz / 2);
        let shifted = Volume::from_fn(g, |x, y, z| {
            kernel.get((x + cx) % g.nx, (y + cy) % g.ny, (z + cz) % g.nz)
        });
        Self::from_origin(&shifted)
    }

    /// Kernel stored with its center at voxel `(0, 0, 0)`.
    pub fn from_origin(kernel: &Volume) -> Self {
        Otf {
            spectrum: fft3(kernel),
        }
    }

    /// Transfer function of the identity kernel.
    pub fn identity(grid: Grid) -> Self {
        Otf {
            spectrum: Spectrum::from_vec(grid, vec![Complex64::new(1.0, 0.0); grid.len()])
                .expect("grid length"),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.spectrum.grid()
    }

    pub fn values(&self) -> &[Complex64] {
        self.spectrum.data()
    }

    fn check(&self, v: &Volume) -> Result<()> {
        if self.grid().same_dims(v.grid()) {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "volume {:?} vs otf {:?}",
                v.grid().dims(),
                self.grid().dims()
            )))
        }
    }

    /// Applies `H` (or `conj(H)` when `adjoint`) to `v` by pointwise product in frequency.
    pub fn apply(&self, v: &Volume, adjoint: bool) -> Result<Volume> {
        self.check(v)?;
        let mut s = fft3(v);
        for (a, h) in s.data_mut().iter_mut().zip(self.values()) {
            *a *= if adjoint { h.conj() } else { *h };
        }
        let mut out = ifft3(&s);
        // keep the caller's spacing
        out = Volume::from_vec(*v.grid(), out.into_data())?;
        Ok(out)
    }
}

/// Circular 3D convolution `h * x`.
pub fn convolve3d(x: &Volume, otf: &Otf) -> Result<Volume> {
    otf.apply(x, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Expected photon count at the brightest voxel of the noiseless image.
    pub peak_photons: f64,
    /// Gaussian read-noise standard deviation, in image intensity units.
    pub read_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            peak_photons: 1000.0,
            read_sigma: 0.01,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_photons > 0.0) {
            return Err(Error::Config(format!("peak_photons must be positive, got {}", self.peak_photons)));
        }
        if !(self.read_sigma >= 0.0) {
            return Err(Error::Config(format!("read_sigma must be non-negative, got {}", self.read_sigma)));
        }
        Ok(())
    }
}

/// Blurs `x`, then applies Poisson shot noise and Gaussian read noise.
///
/// Voxel `i` draws from child stream `i`, so the result does not depend on
/// traversal order.
pub fn forward_image(x: &Volume, otf: &Otf, noise: &NoiseConfig, stream: &RngStream) -> Result<Volume> {
    noise.validate()?;
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(Error::NegativeInput { index, value });
    }
    let blurred = convolve3d(x, otf)?;
    let peak = blurred.max();
    if !(peak > 0.0) {
        return Err(Error::EmptySpecimen);
    }
    let floor = blurred.min();
    if floor < -1e-6 * peak {
        return Err(Error::Config(format!(
            "convolution produced {floor:e} from a non-negative specimen (peak {peak:e}); kernel is not non-negative"
        )));
    }
    let scale = noise.peak_photons / peak;
    let mut out = blurred;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = v.max(0.0);
        let mut rng = stream.child(i as u64);
        let shot = sample_poisson(scale * c, &mut rng) / scale;
        let read = if noise.read_sigma > 0.0 {
            noise.read_sigma * rng.standard_normal()
        } else {
            0.0
        };
        *v = shot + read;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{compute_psf, OpticalConfig};
    use crate::voxgrid::derive_stream;

    fn unit_grid(n: usize) -> Grid {
        Grid::new(n, n, n, 1.0, 1.0, 1.0).unwrap()
    }

    fn random(g: Grid, seed: u64) -> Volume {
        let mut s = derive_stream(seed, "conv-test", 0);
        Volume::from_fn(g, |_, _, _| s.next_f64())
    }

    /// Direct spatial circular convolution with an origin-centered kernel.
    fn direct_convolution(x: &Volume, k: &Volume) -> Volume {
        let g = *x.grid();
        Volume::from_fn(g, |i, j, l| {
            let mut acc = 0.0;
            for z in 0..g.nz {
                for y in 0..g.ny {
                    for xx in 0..g.nx {
                        let kx = (i + g.nx - xx) % g.nx;
                        let ky = (j + g.ny - y) % g.ny;
                        let kz = (l + g.nz - z) % g.nz;
                        acc += x.get(xx, y, z) * k.get(kx, ky, kz);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_spatial_convolution() {
        let g = unit_grid(8);
        let x = random(g, 1);
        let k = random(g, 2);
        let fast = convolve3d(&x, &Otf::from_origin(&k)).unwrap();
        let slow = direct_convolution(&x, &k);
        let scale = slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn impulse_reproduces_psf_and_constant_is_preserved() {
        let mut cfg = OpticalConfig::desk();
        cfg.grid.nz = 6;
        let psf = compute_psf(&cfg).unwrap();
        let otf = Otf::from_psf(&psf);
        let g = cfg.grid;
        let mut imp = Volume::zeros(g);
        imp.set(g.nx / 2, g.ny / 2, g.nz / 2, 1.0);
        let out = convolve3d(&imp, &otf).unwrap();
        let m = psf.volume.max();
        for (a, b) in out.data().iter().zip(psf.volume.data()) {
            assert!((a - b).abs() <= 1e-6 * m);
        }
        let c = 3.5;
        let flat = convolve3d(&Volume::filled(g, c), &otf).unwrap();
        assert!(flat.data().iter().all(|v| (v - c).abs() <= 1e-6 * c));
        assert!((otf.values()[0].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convolution_is_linear() {
        let g = unit_grid(6);
        let otf = Otf::from_origin(&random(g, 3));
        let (x1, x2) = (random(g, 4), random(g, 5));
        let (a, b) = (0.7, -2.3);
        let combo = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let lhs = convolve3d(&combo, &otf).unwrap();
        let r1 = convolve3d(&x1, &otf).unwrap();
        let r2 = convolve3d(&x2, &otf).unwrap();
        for i in 0..g.len() {
            let rhs = a * r1.data()[i] + b * r2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-8 * 10.0);
        }
    }

    #[test]
    fn rejects_dim_mismatch() {
        let otf = Otf::identity(unit_grid(4));
        assert!(convolve3d(&Volume::zeros(unit_grid(5)), &otf).is_err());
    }

    #[test]
    fn noiseless_limit_tracks_blurred_image() {
        let g = unit_grid(8);
        let x = random(g, 6);
        let otf = Otf::from_origin(&random(g, 7).scale(1.0 / 256.0));
        let clean = convolve3d(&x, &otf).unwrap();
        let noise = NoiseConfig {
            peak_photons: 1e9,
            read_sigma: 0.0,
        };
        let y = forward_image(&x, &otf, &noise, &derive_stream(1, "noise", 0)).unwrap();
        let m = clean.max();
        for (a, b) in y.data().iter().zip(clean.data()) {
            if *b >= 0.1 * m {
                assert!((a - b).abs() <= 1e-3 * b);
            }
        }
    }

    #[test]
    fn shot_noise_variance() {
        let g = Grid::new(100, 100, 10, 1.0, 1.0, 1.0).unwrap();
        let x = Volume::filled(g, 1.0);
        let noise = NoiseConfig {
            peak_photons: 100.0,
            read_sigma: 0.0,
        };
        let y = forward_image(&x, &Otf::identity(g), &noise, &derive_stream(3, "noise", 0)).unwrap();
        let n = y.len() as f64;
        let mean = y.mean();
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.01 - 1.0).abs() < 0.15, "variance {var}");
    }

    #[test]
    fn deterministic_and_error_paths() {
        let g = unit_grid(6);
        let x = random(g, 8);
        let otf = Otf::identity(g);
        let s = derive_stream(9, "noise", 2);
        let a = forward_image(&x, &otf, &NoiseConfig::default(), &s).unwrap();
        let b = forward_image(&x, &otf, &NoiseConfig::default(), &s).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(matches!(
            forward_image(&Volume::zeros(g), &otf, &NoiseConfig::default(), &s),
            Err(Error::EmptySpecimen)
        ));
        assert!(forward_image(&x.scale(-1.0), &otf, &NoiseConfig::default(), &s).is_err());
    }
}

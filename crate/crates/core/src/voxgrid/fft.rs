//! Separable 3D FFT over the x-fastest layout.
//!
//! Forward transforms are unnormalized; inverse transforms scale by `1/N`.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::{Grid, Volume};
use crate::error::Result;

/// Complex field with the same dims as the volume it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: Grid,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_vec(grid: Grid, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(crate::Error::InvalidDims(format!(
                "spectrum length {} does not match grid {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Spectrum { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Value at the mirrored frequency `-k mod N`.
    pub fn mirrored(&self, i: usize) -> Complex64 {
        let g = &self.grid;
        let (x, y, z) = g.coords(i);
        let m = |k: usize, n: usize| (n - k) % n;
        self.data[g.index(m(x, g.nx), m(y, g.ny), m(z, g.nz))]
    }
}

fn transform_axis(
    data: &mut [Complex64],
    (nx, ny, nz): (usize, usize, usize),
    axis: usize,
    planner: &mut FftPlanner<f64>,
    direction: FftDirection,
) {
    let (len, stride) = match axis {
        0 => (nx, 1),
        1 => (ny, nx),
        _ => (nz, nx * ny),
    };
    if len == 1 {
        return;
    }
    let fft = planner.plan_fft(len, direction);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    if axis == 0 {
        for row in data.chunks_exact_mut(nx) {
            fft.process_with_scratch(row, &mut scratch);
        }
        return;
    }
    let mut line = vec![Complex64::default(); len];
    let total = nx * ny * nz;
    for base in 0..total {
        // visit each line once, from its first element
        let along = (base / stride) % len;
        if along != 0 {
            continue;
        }
        for (k, c) in line.iter_mut().enumerate() {
            *c = data[base + k * stride];
        }
        fft.process_with_scratch(&mut line, &mut scratch);
        for (k, c) in line.iter().enumerate() {
            data[base + k * stride] = *c;
        }
    }
}

pub(crate) fn transform3(data: &mut [Complex64], dims: (usize, usize, usize), inverse: bool) {
    let mut planner = FftPlanner::new();
    let dir = if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    };
    for axis in 0..3 {
        transform_axis(data, dims, axis, &mut planner, dir);
    }
    if inverse {
        let s = 1.0 / (dims.0 * dims.1 * dims.2) as f64;
        for c in data.iter_mut() {
            *c *= s;
        }
    }
}

pub fn fft3(v: &Volume) -> Spectrum {
    let g = *v.grid();
    let mut data: Vec<Complex64> = v.data().iter().map(|&r| Complex64::new(r, 0.0)).collect();
    transform3(&mut data, g.dims(), false);
    Spectrum { grid: g, data }
}

/// Inverse transform; the imaginary residue is discarded.
pub fn ifft3(s: &Spectrum) -> Volume {
    let g = s.grid;
    let mut data = s.data.clone();
    transform3(&mut data, g.dims(), true);
    Volume::from_vec(g, data.into_iter().map(|c| c.re).collect())
        .expect("spectrum dims are valid")
}

/// In-place normalized inverse 2D transform of one `nx x ny` plane.
pub fn fft2_plane_inverse(plane: &mut [Complex64], nx: usize, ny: usize) {
    transform3(plane, (nx, ny, 1), true);
}

/// Frequency (cycles per unit length) of DFT bin `i` for `n` samples at spacing `d`.
#[inline]
pub fn fftfreq(i: usize, n: usize, d: f64) -> f64 {
    let k = if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    };
    k / (n as f64 * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::derive_stream;

    fn grid(nx: usize, ny: usize, nz: usize) -> Grid {
        Grid::new(nx, ny, nz, 1.0, 1.0, 1.0).unwrap()
    }

    fn random_volume(g: Grid, seed: u64) -> Volume {
        let mut s = derive_stream(seed, "fft-test", 0);
        Volume::from_fn(g, |_, _, _| s.next_f64() * 2.0 - 1.0)
    }

    /// Direct O(N^2) DFT used as an independent reference.
    fn naive_dft(v: &Volume) -> Vec<Complex64> {
        let g = v.grid();
        let tau = std::f64::consts::TAU;
        let mut out = vec![Complex64::default(); g.len()];
        for (k, o) in out.iter_mut().enumerate() {
            let (kx, ky, kz) = g.coords(k);
            for (j, &val) in v.data().iter().enumerate() {
                let (x, y, z) = g.coords(j);
                let phase = -tau
                    * ((kx * x) as f64 / g.nx as f64
                        + (ky * y) as f64 / g.ny as f64
                        + (kz * z) as f64 / g.nz as f64);
                *o += Complex64::from_polar(val, phase);
            }
        }
        out
    }

    #[test]
    fn constant_volume_has_only_dc() {
        let g = grid(4, 6, 3);
        let c = 2.5;
        let s = fft3(&Volume::filled(g, c));
        let n = g.len() as f64;
        assert!((s.data()[0].re - c * n).abs() < 1e-9 * c * n);
        for z in &s.data()[1..] {
            assert!(z.norm() < 1e-9 * c * n);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let g = grid(5, 4, 3);
        let mut v = Volume::zeros(g);
        v.set(0, 0, 0, 1.0);
        for z in fft3(&v).data() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_and_parseval() {
        let g = grid(4, 4, 4);
        let v = random_volume(g, 9);
        let fast = fft3(&v);
        let slow = naive_dft(&v);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10 * (1.0 + b.norm()));
        }
        let energy: f64 = v.data().iter().map(|x| x * x).sum();
        let spec: f64 = slow.iter().map(|z| z.norm_sqr()).sum::<f64>() / g.len() as f64;
        assert!((energy - spec).abs() <= 1e-10 * energy);
    }

    #[test]
    fn round_trip_and_hermitian_symmetry() {
        let g = grid(6, 5, 4);
        let v = random_volume(g, 3);
        let s = fft3(&v);
        let back = ifft3(&s);
        let scale = v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6 * scale);
        }
        for i in 0..g.len() {
            let d = (s.data()[i] - s.mirrored(i).conj()).norm();
            assert!(d <= 1e-6 * s.data()[i].norm().max(1e-12) + 1e-9);
        }
    }

    #[test]
    fn linear_layout_is_x_fastest() {
        let g = grid(3, 4, 5);
        let v = Volume::from_fn(g, |x, y, z| (x + 10 * y + 100 * z) as f64);
        let mut expected = Vec::new();
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    expected.push((x + 10 * y + 100 * z) as f64);
                }
            }
        }
        assert_eq!(v.data(), &expected[..]);
        assert_eq!(g.coords(g.index(2, 3, 4)), (2, 3, 4));
    }

    #[test]
    fn fftfreq_matches_numpy_convention() {
        let f: Vec<f64> = (0..4).map(|i| fftfreq(i, 4, 0.5)).collect();
        assert_eq!(f, vec![0.0, 0.5, -1.0, -0.5]);
        let f: Vec<f64> = (0..5).map(|i| fftfreq(i, 5, 1.0)).collect();
        assert_eq!(f, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }
}

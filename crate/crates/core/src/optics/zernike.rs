use super::OpticalConfig;
use crate::error::{Error, Result};
use crate::voxgrid::fftfreq;

/// Radial order `n` and signed azimuthal order `m` of Noll index `j`.
pub fn noll_to_nm(j: u32) -> (u32, i32) {
    let mut n = 0u32;
    while (n + 1) * (n + 2) / 2 < j {
        n += 1;
    }
    // position within radial order n, 0-based
    let k = j - n * (n + 1) / 2 - 1;
    let m_abs = if n % 2 == 0 {
        2 * ((k + 1) / 2)
    } else {
        2 * (k / 2) + 1
    } as i32;
    let m = if m_abs != 0 && j % 2 == 1 { -m_abs } else { m_abs };
    (n, m)
}

fn radial(n: u32, m_abs: u32, rho: f64) -> f64 {
    let fact = |k: u32| (1..=k).map(|i| i as f64).product::<f64>();
    (0..=(n - m_abs) / 2)
        .map(|s| {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            sign * fact(n - s)
                / (fact(s) * fact((n + m_abs) / 2 - s) * fact((n - m_abs) / 2 - s))
                * rho.powi((n - 2 * s) as i32)
        })
        .sum()
}

/// Unit-RMS Noll Zernike polynomial at polar pupil coordinates.
pub fn zernike(j: u32, rho: f64, theta: f64) -> Result<f64> {
    if !(1..=15).contains(&j) {
        return Err(Error::UnsupportedNoll(j));
    }
    let (n, m) = noll_to_nm(j);
    let r = radial(n, m.unsigned_abs(), rho);
    Ok(if m == 0 {
        (n as f64 + 1.0).sqrt() * r
    } else if m > 0 {
        (2.0 * (n as f64 + 1.0)).sqrt() * r * (m as f64 * theta).cos()
    } else {
        (2.0 * (n as f64 + 1.0)).sqrt() * r * ((-m) as f64 * theta).sin()
    })
}

/// Aberration phase in waves, sampled on the lateral DFT frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PupilPhase {
    pub nx: usize,
    pub ny: usize,
    /// x-fastest; zero outside the pupil disk.
    pub values: Vec<f64>,
}

impl PupilPhase {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix + self.nx * iy]
    }
}

pub fn zernike_phase(cfg: &OpticalConfig) -> Result<PupilPhase> {
    let g = &cfg.grid;
    let cutoff = cfg.cutoff();
    let mut values = vec![0.0; g.nx * g.ny];
    for &(j, _) in &cfg.zernike {
        if !(1..=15).contains(&j) {
            return Err(Error::UnsupportedNoll(j));
        }
    }
    for iy in 0..g.ny {
        let ky = fftfreq(iy, g.ny, g.dy);
        for ix in 0..g.nx {
            let kx = fftfreq(ix, g.nx, g.dx);
            let rho = (kx * kx + ky * ky).sqrt() / cutoff;
            if rho > 1.0 {
                continue;
            }
            let theta = ky.atan2(kx);
            let mut phi = 0.0;
            for &(j, a) in &cfg.zernike {
                phi += a * zernike(j, rho, theta)?;
            }
            values[ix + g.nx * iy] = phi;
        }
    }
    Ok(PupilPhase {
        nx: g.nx,
        ny: g.ny,
        values,
    })
}

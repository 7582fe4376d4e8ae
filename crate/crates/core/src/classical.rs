//! Model-based deconvolution baselines: Richardson-Lucy, Wiener, and
//! constrained least squares with a discrete Laplacian regularizer.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::Otf;
use crate::voxgrid::{fft3, ifft3, Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub iterations: usize,
    /// Divisor floor relative to `max(y)`.
    pub epsilon_div: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            iterations: 50,
            epsilon_div: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Wiener,
    ClsLaplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsConfig {
    pub lambda_reg: f64,
    pub mode: FilterMode,
    /// Use unit weights on all six Laplacian neighbours instead of
    /// spacing-aware weights.
    pub isotropic: bool,
}

impl ClsConfig {
    pub fn wiener(lambda_reg: f64) -> Self {
        ClsConfig {
            lambda_reg,
            mode: FilterMode::Wiener,
            isotropic: false,
        }
    }

    pub fn cls(lambda_reg: f64) -> Self {
        ClsConfig {
            lambda_reg,
            mode: FilterMode::ClsLaplacian,
            isotropic: false,
        }
    }
}

/// Iterative Richardson-Lucy state, one multiplicative update per [`step`](Self::step).
pub struct RichardsonLucy<'a> {
    y: &'a Volume,
    otf: &'a Otf,
    floor: f64,
    estimate: Volume,
    iteration: usize,
}

impl<'a> RichardsonLucy<'a> {
    pub fn new(y: &'a Volume, otf: &'a Otf, epsilon_div: f64) -> Result<Self> {
        if !(epsilon_div > 0.0) {
            return Err(Error::Config(format!("epsilon_div must be positive, got {epsilon_div}")));
        }
        if let Some((index, &value)) = y.data().iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(Error::NegativeInput { index, value });
        }
        if !otf.grid().same_dims(y.grid()) {
            return Err(Error::DimMismatch("richardson_lucy: y vs otf".into()));
        }
        let peak = y.max();
        let floor = if peak > 0.0 {
            epsilon_div * peak
        } else {
            f64::MIN_POSITIVE
        };
        Ok(RichardsonLucy {
            y,
            otf,
            floor,
            estimate: y.clone(),
            iteration: 0,
        })
    }

    pub fn estimate(&self) -> &Volume {
        &self.estimate
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<&Volume> {
        let blurred = self.otf.apply(&self.estimate, false)?;
        let ratio = self
            .y
            .zip_map(&blurred, |y, b| y / b.max(self.floor))?;
        let correction = self.otf.apply(&ratio, true)?;
        for (x, c) in self.estimate.data_mut().iter_mut().zip(correction.data()) {
            // round-off in the correction can dip below zero where x is already ~0
            *x = (*x * c).max(0.0);
        }
        self.iteration += 1;
        Ok(&self.estimate)
    }
}

pub fn richardson_lucy(y: &Volume, otf: &Otf, cfg: &RlConfig) -> Result<Volume> {
    if cfg.iterations == 0 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    let mut rl = RichardsonLucy::new(y, otf, cfg.epsilon_div)?;
    for _ in 0..cfg.iterations {
        rl.step()?;
    }
    Ok(rl.estimate)
}

/// Poisson log-likelihood `sum(y log(h*x) - h*x)` without the `log(y!)` constant.
pub fn poisson_log_likelihood(y: &Volume, otf: &Otf, x: &Volume) -> Result<f64> {
    let blurred = otf.apply(x, false)?;
    Ok(y.data()
        .iter()
        .zip(blurred.data())
        .map(|(&yv, &b)| {
            let b = b.max(f64::MIN_POSITIVE);
            if yv > 0.0 {
                yv * b.ln() - b
            } else {
                -b
            }
        })
        .sum())
}

/// Runs RL up to `max_iterations` against a known ground truth and returns
/// the iteration count with the highest PSNR, along with that PSNR.
pub fn rl_sweep(y: &Volume, gt: &Volume, otf: &Otf, max_iterations: usize, data_range: f64) -> Result<(usize, f64)> {
    let mut rl = RichardsonLucy::new(y, otf, RlConfig::default().epsilon_div)?;
    let mut best = (0, f64::NEG_INFINITY);
    for _ in 0..max_iterations {
        let psnr = crate::evalsuite::psnr(rl.step()?, gt, data_range)?;
        if psnr > best.1 {
            best = (rl.iteration(), psnr);
        }
    }
    Ok(best)
}

/// `|L(k)|^2` for the circular 7-point Laplacian.
pub fn laplacian_power(grid: &Grid, isotropic: bool) -> Vec<f64> {
    let (wx, wy, wz) = if isotropic {
        (1.0, 1.0, 1.0)
    } else {
        let dz2 = grid.dz * grid.dz;
        (dz2 / (grid.dx * grid.dx), dz2 / (grid.dy * grid.dy), 1.0)
    };
    let tau = std::f64::consts::TAU;
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|k| 2.0 * (tau * k as f64 / n as f64).cos() - 2.0)
            .collect()
    };
    let (lx, ly, lz) = (axis(grid.nx), axis(grid.ny), axis(grid.nz));
    let mut out = Vec::with_capacity(grid.len());
    for z in 0..grid.nz {
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let l = wx * lx[x] + wy * ly[y] + wz * lz[z];
                out.push(l * l);
            }
        }
    }
    out
}

fn regularized_inverse(y: &Volume, otf: &Otf, lambda: f64, penalty: Option<&[f64]>) -> Result<Volume> {
    if !otf.grid().same_dims(y.grid()) {
        return Err(Error::DimMismatch("linear filter: y vs otf".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda_reg must be >= 0, got {lambda}")));
    }
    let mut s = fft3(y);
    for (i, (v, h)) in s.data_mut().iter_mut().zip(otf.values()).enumerate() {
        let reg = lambda * penalty.map_or(1.0, |p| p[i]);
        let denom = h.norm_sqr() + reg;
        *v = if denom > 0.0 {
            h.conj() * *v / denom
        } else {
            Complex64::default()
        };
    }
    let out = ifft3(&s);
    Volume::from_vec(*y.grid(), out.into_data())
}

/// Wiener-type inverse `conj(H) Y / (|H|^2 + lambda)`.
pub fn wiener(y: &Volume, otf: &Otf, cfg: &ClsConfig) -> Result<Volume> {
    regularized_inverse(y, otf, cfg.lambda_reg, None)
}

/// Constrained least squares `conj(H) Y / (|H|^2 + lambda |L|^2)`.
pub fn cls_laplacian(y: &Volume, otf: &Otf, cfg: &ClsConfig) -> Result<Volume> {
    let lap = laplacian_power(y.grid(), cfg.isotropic);
    regularized_inverse(y, otf, cfg.lambda_reg, Some(&lap))
}

/// Dispatches on `cfg.mode`.
pub fn linear_filter(y: &Volume, otf: &Otf, cfg: &ClsConfig) -> Result<Volume> {
    match cfg.mode {
        FilterMode::Wiener => wiener(y, otf, cfg),
        FilterMode::ClsLaplacian => cls_laplacian(y, otf, cfg),
    }
}

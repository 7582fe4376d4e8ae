//! Voxel-wise credibility of an ensemble reconstruction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::SampleEnsemble;
use crate::voxgrid::Volume;

pub const DEFAULT_TAU: f64 = 3.0;
/// SD floor on [0, 1]-normalized data.
pub const DEFAULT_SD_FLOOR: f64 = 1e-4;
pub const HISTOGRAM_BINS: usize = 64;
pub const HISTOGRAM_MAX: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CredibilityReport {
    pub tau: f64,
    /// Fraction of voxels with `|mean - gt| / sd <= tau`.
    pub coverage: f64,
    /// Fractions per bin of width `6 / 64` over `[0, 6)`; the last bin also
    /// collects every ratio `>= 6`.
    pub histogram: Vec<f64>,
    /// Mean Gaussian negative log-likelihood of the ground truth.
    pub nll: f64,
    pub sd_floor: f64,
    pub voxels: usize,
}

impl CredibilityReport {
    pub fn histogram_csv(&self) -> String {
        let w = HISTOGRAM_MAX / HISTOGRAM_BINS as f64;
        let mut s = String::from("bin_lo,bin_hi,fraction\n");
        for (i, f) in self.histogram.iter().enumerate() {
            let hi = if i + 1 == HISTOGRAM_BINS {
                "inf".to_string()
            } else {
                format!("{}", (i + 1) as f64 * w)
            };
            s.push_str(&format!("{},{},{}\n", i as f64 * w, hi, f));
        }
        s
    }
}

/// Credibility statistics from a per-voxel mean and standard deviation.
pub fn credibility_from_stats(mean: &Volume, sd: &Volume, gt: &Volume, tau: f64, sd_floor: f64) -> Result<CredibilityReport> {
    mean.check_same_dims(gt, "credibility mean")?;
    sd.check_same_dims(gt, "credibility sd")?;
    if !(sd_floor > 0.0) {
        return Err(Error::Config(format!("sd_floor must be positive, got {sd_floor}")));
    }
    let n = gt.len();
    let mut covered = 0usize;
    let mut hist = vec![0usize; HISTOGRAM_BINS];
    let mut nll = 0.0;
    let ln_2pi = std::f64::consts::TAU.ln();
    for i in 0..n {
        let sigma = sd.data()[i].max(sd_floor);
        let err = mean.data()[i] - gt.data()[i];
        let ratio = err.abs() / sigma;
        if ratio <= tau {
            covered += 1;
        }
        let bin = ((ratio / HISTOGRAM_MAX * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1;
        nll += 0.5 * (ln_2pi + 2.0 * sigma.ln()) + err * err / (2.0 * sigma * sigma);
    }
    Ok(CredibilityReport {
        tau,
        coverage: covered as f64 / n as f64,
        histogram: hist.iter().map(|&c| c as f64 / n as f64).collect(),
        nll: nll / n as f64,
        sd_floor,
        voxels: n,
    })
}

pub fn credibility(ensemble: &SampleEnsemble, gt: &Volume, tau: f64) -> Result<CredibilityReport> {
    credibility_with_floor(ensemble, gt, tau, DEFAULT_SD_FLOOR)
}

pub fn credibility_with_floor(ensemble: &SampleEnsemble, gt: &Volume, tau: f64, sd_floor: f64) -> Result<CredibilityReport> {
    if ensemble.len() < 2 {
        return Err(Error::Config(format!(
            "credibility needs at least 2 samples, got {}",
            ensemble.len()
        )));
    }
    credibility_from_stats(&ensemble.mean, &ensemble.sd, gt, tau, sd_floor)
}

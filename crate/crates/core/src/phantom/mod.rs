//! Synthetic fluorophore phantoms: thresholded multi-octave simplex noise,
//! one random base intensity per connected cell.

mod dataset;
mod simplex;

pub use dataset::{generate_dataset, DatasetSplits};
pub use simplex::{simplex3, SimplexNoise};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::{derive_stream, Grid, Volume};

const MAX_ATTEMPTS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub grid: Grid,
    pub octaves: u32,
    /// Noise cycles across each volume edge at the coarsest octave.
    pub base_frequency: f64,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    /// Quantile range the per-volume threshold is drawn from.
    pub threshold_range: (f64, f64),
    /// Range of per-cell base intensities.
    pub intensity_range: (f64, f64),
    pub margin_voxels: usize,
    pub master_seed: u64,
}

impl PhantomConfig {
    pub fn desk() -> Self {
        PhantomConfig {
            grid: Grid {
                nx: 32,
                ny: 32,
                nz: 8,
                dx: 0.1,
                dy: 0.1,
                dz: 0.3,
            },
            octaves: 3,
            base_frequency: 4.0,
            persistence: 0.5,
            threshold_range: (0.6, 0.9),
            intensity_range: (0.2, 1.0),
            margin_voxels: 2,
            master_seed: 0,
        }
    }

    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.grid.nx = 136;
        c.grid.ny = 136;
        c.grid.nz = 40;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (lo, hi) = self.threshold_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("threshold_range must satisfy 0 < lo < hi < 1, got {:?}", self.threshold_range)));
        }
        let (imin, imax) = self.intensity_range;
        if !(imin > 0.0 && imin <= imax) {
            return Err(Error::Config(format!("intensity_range must satisfy 0 < min <= max, got {:?}", self.intensity_range)));
        }
        let smallest = self.grid.nx.min(self.grid.ny).min(self.grid.nz);
        if 2 * self.margin_voxels >= smallest {
            return Err(Error::Config(format!("margin {} too wide for {:?}", self.margin_voxels, self.grid.dims())));
        }
        if self.octaves == 0 || !(self.persistence > 0.0 && self.persistence < 1.0) || !(self.base_frequency > 0.0) {
            return Err(Error::Config("octaves >= 1, 0 < persistence < 1 and base_frequency > 0 required".into()));
        }
        Ok(())
    }
}

fn fractal_field(cfg: &PhantomConfig, noise: &SimplexNoise) -> Vec<f64> {
    let g = cfg.grid;
    let mut out = Vec::with_capacity(g.len());
    for z in 0..g.nz {
        for y in 0..g.ny {
            for x in 0..g.nx {
                let p = [
                    x as f64 / g.nx as f64,
                    y as f64 / g.ny as f64,
                    z as f64 / g.nz as f64,
                ];
                let mut v = 0.0;
                let mut amp = 1.0;
                let mut freq = cfg.base_frequency;
                for o in 0..cfg.octaves {
                    // shift each octave so lattice origins do not line up
                    let off = 17.31 * o as f64;
                    v += amp * noise.eval([p[0] * freq + off, p[1] * freq + off, p[2] * freq + off]);
                    amp *= cfg.persistence;
                    freq *= 2.0;
                }
                out.push(v);
            }
        }
    }
    out
}

fn in_margin(g: &Grid, m: usize, x: usize, y: usize, z: usize) -> bool {
    x < m || y < m || z < m || x >= g.nx - m || y >= g.ny - m || z >= g.nz - m
}

/// Labels 6-connected foreground components; 0 marks background.
pub fn label_components(grid: &Grid, mask: &[bool]) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = grid.coords(i);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < grid.nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - grid.nx);
            }
            if y + 1 < grid.ny {
                visit(i + grid.nx);
            }
            if z > 0 {
                visit(i - grid.nx * grid.ny);
            }
            if z + 1 < grid.nz {
                visit(i + grid.nx * grid.ny);
            }
        }
    }
    (labels, next)
}

/// Phantom `index` of the family described by `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<Volume> {
    cfg.validate()?;
    let g = cfg.grid;
    let root = derive_stream(cfg.master_seed, "phantom", index);
    for attempt in 0..MAX_ATTEMPTS {
        let s = root.child(attempt as u64);
        let noise = SimplexNoise::new(&s.child(0));
        let field = fractal_field(cfg, &noise);

        let q = s.child(1).uniform(cfg.threshold_range.0, cfg.threshold_range.1);
        let mut sorted = field.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((q * sorted.len() as f64) as usize).min(sorted.len() - 1);
        let threshold = sorted[rank];

        let mask: Vec<bool> = field
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (x, y, z) = g.coords(i);
                v > threshold && !in_margin(&g, cfg.margin_voxels, x, y, z)
            })
            .collect();
        let (labels, count) = label_components(&g, &mask);
        if count == 0 {
            continue;
        }
        let mut intensity = s.child(2);
        let (lo, hi) = cfg.intensity_range;
        let levels: Vec<f64> = (0..count).map(|_| intensity.uniform(lo, hi)).collect();
        let data = labels
            .iter()
            .map(|&l| if l == 0 { 0.0 } else { levels[l as usize - 1] })
            .collect();
        return Volume::from_vec(g, data);
    }
    Err(Error::EmptyPhantom(MAX_ATTEMPTS))
}

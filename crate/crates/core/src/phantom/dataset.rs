use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_phantom, PhantomConfig};
use crate::error::{Error, Result};
use crate::optics::{compute_psf, forward_image, NoiseConfig, OpticalConfig, Otf};
use crate::voxgrid::{derive_stream, save_volume, DatasetManifest, DatasetRecord, Split};

/// Number of volumes per split; indices are assigned train, then val, then test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetSplits {
    pub fn desk() -> Self {
        DatasetSplits {
            train: 64,
            val: 8,
            test: 8,
        }
    }

    pub fn paper() -> Self {
        DatasetSplits {
            train: 640,
            val: 80,
            test: 80,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Serialize)]
struct GeneratorEcho<'a> {
    phantom: &'a PhantomConfig,
    optics: &'a OpticalConfig,
    noise: &'a NoiseConfig,
    splits: &'a DatasetSplits,
}

/// Writes clean phantoms, their simulated measurements, the shared PSF and a
/// `manifest.json` into `out_dir`. `threads > 1` spreads indices over worker
/// threads; output bytes do not depend on the thread count.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    optics: &OpticalConfig,
    noise: &NoiseConfig,
    splits: &DatasetSplits,
    out_dir: impl AsRef<Path>,
    threads: usize,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if !cfg.grid.same_dims(&optics.grid) {
        return Err(Error::DimMismatch(format!(
            "phantom grid {:?} vs optics grid {:?}",
            cfg.grid.dims(),
            optics.grid.dims()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let psf = compute_psf(optics)?;
    // blur with the kernel as stored on disk so `simulate` reproduces the set
    let otf = Otf::from_centered(&psf.volume.quantized());
    save_volume(&psf.volume, out_dir.join("psf.vol"))?;
    let sidecar = out_dir.join("psf.json");
    std::fs::write(&sidecar, psf.sidecar_json()).map_err(|e| Error::io(&sidecar, e))?;

    let n = splits.total();
    let work = |i: usize| -> Result<f64> {
        let clean = generate_phantom(cfg, i as u64)?.quantized();
        let y = forward_image(&clean, &otf, noise, &derive_stream(cfg.master_seed, "noise", i as u64))?;
        save_volume(&clean, out_dir.join(format!("clean_{i:04}.vol")))?;
        save_volume(&y, out_dir.join(format!("degraded_{i:04}.vol")))?;
        Ok(clean.max())
    };
    let maxima: Vec<f64> = if threads <= 1 {
        (0..n).map(work).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<f64>>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = n.div_ceil(threads).max(1);
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let work = &work;
                scope.spawn(move || {
                    for (k, slot) in part.iter_mut().enumerate() {
                        *slot = Some(work(c * chunk + k));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every index visited")).collect::<Result<_>>()?
    };

    let records = (0..n)
        .map(|i| DatasetRecord {
            id: i,
            clean_path: format!("clean_{i:04}.vol"),
            degraded_path: format!("degraded_{i:04}.vol"),
            split: splits.split_of(i),
        })
        .collect();
    let manifest = DatasetManifest {
        records,
        clean_max: maxima.iter().copied().fold(0.0, f64::max),
        psf_path: Some("psf.vol".into()),
        config: serde_json::to_value(GeneratorEcho {
            phantom: cfg,
            optics,
            noise,
            splits,
        })?,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

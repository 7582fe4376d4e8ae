//! PSNR and Gaussian-window SSIM / MS-SSIM, computed slice-wise over z.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::voxgrid::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// `10 log10(range^2 / mse)`; `+inf` when the volumes are identical.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    a.check_same_dims(b, "psnr")?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    let mse = mse(a.data(), b.data());
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `nx x ny` plane.
fn filter_valid(plane: &[f64], nx: usize, ny: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let w = taps.len();
    let (ox, oy) = (nx - w + 1, ny - w + 1);
    let mut tmp = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            tmp[x + ox * y] = (0..w).map(|k| taps[k] * plane[x + k + nx * y]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[x + ox * y] = (0..w).map(|k| taps[k] * tmp[x + ox * (y + k)]).sum();
        }
    }
    (out, ox, oy)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn plane_ssim(a: &[f64], b: &[f64], nx: usize, ny: usize, data_range: f64) -> (f64, f64) {
    let taps = gaussian_taps();
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, ox, oy) = filter_valid(a, nx, ny, &taps);
    let (mu_b, ..) = filter_valid(b, nx, ny, &taps);
    let (e_aa, ..) = filter_valid(&prod(&|x, _| x * x), nx, ny, &taps);
    let (e_bb, ..) = filter_valid(&prod(&|_, y| y * y), nx, ny, &taps);
    let (e_ab, ..) = filter_valid(&prod(&|x, y| x * y), nx, ny, &taps);
    let n = (ox * oy) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ox * oy {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let contrast = (2.0 * cov + c2) / (va + vb + c2);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim += lum * contrast;
        cs += contrast;
    }
    (ssim / n, cs / n)
}

fn check_window(a: &Volume, b: &Volume) -> Result<()> {
    a.check_same_dims(b, "ssim")?;
    let g = a.grid();
    if g.nx < SSIM_WINDOW || g.ny < SSIM_WINDOW {
        return Err(Error::InvalidDims(format!(
            "lateral dims {}x{} below the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            g.nx, g.ny
        )));
    }
    Ok(())
}

/// SSIM of every z-slice.
pub fn ssim_per_slice(a: &Volume, b: &Volume, data_range: f64) -> Result<Vec<f64>> {
    check_window(a, b)?;
    let g = a.grid();
    Ok((0..g.nz)
        .map(|z| plane_ssim(a.slice(z), b.slice(z), g.nx, g.ny, data_range).0)
        .collect())
}

/// Slice-averaged SSIM with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    let s = ssim_per_slice(a, b, data_range)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Number of MS-SSIM scales that fit in `n` lateral samples.
pub fn ms_ssim_scales(n: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&m| n >= SSIM_WINDOW << (m - 1))
        .last()
        .unwrap_or(0)
}

/// Renormalized weights for `scales` levels.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn downsample2(p: &[f64], nx: usize, ny: usize) -> (Vec<f64>, usize, usize) {
    let (hx, hy) = (nx / 2, ny / 2);
    let mut out = vec![0.0; hx * hy];
    for y in 0..hy {
        for x in 0..hx {
            let i = 2 * x + nx * 2 * y;
            out[x + hx * y] = 0.25 * (p[i] + p[i + 1] + p[i + nx] + p[i + nx + 1]);
        }
    }
    (out, hx, hy)
}

/// Multi-scale SSIM; negative per-scale terms are clamped to zero before
/// the weighted geometric mean.
pub fn ms_ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_window(a, b)?;
    let g = a.grid();
    let scales = ms_ssim_scales(g.nx.min(g.ny));
    let weights = ms_ssim_weights(scales);
    let mut total = 0.0;
    for z in 0..g.nz {
        let (mut pa, mut pb) = (a.slice(z).to_vec(), b.slice(z).to_vec());
        let (mut nx, mut ny) = (g.nx, g.ny);
        let mut value = 1.0;
        for (s, w) in weights.iter().enumerate() {
            let (full, cs) = plane_ssim(&pa, &pb, nx, ny, data_range);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(*w);
            if s + 1 < scales {
                let (da, hx, hy) = downsample2(&pa, nx, ny);
                let (db, ..) = downsample2(&pb, nx, ny);
                pa = da;
                pb = db;
                nx = hx;
                ny = hy;
            }
        }
        total += value;
    }
    Ok(total / g.nz as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn serialize_db_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_infinite() {
            seq.serialize_element(if *x > 0.0 { "inf" } else { "-inf" })?;
        } else {
            seq.serialize_element(x)?;
        }
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeMetrics {
    pub name: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    #[serde(serialize_with = "serialize_db_vec")]
    pub slice_psnr: Vec<f64>,
    pub slice_ssim: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub data_range: f64,
    pub volumes: Vec<VolumeMetrics>,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms_ssim: f64,
}

pub fn volume_metrics(name: &str, pred: &Volume, gt: &Volume, data_range: f64) -> Result<VolumeMetrics> {
    let g = *gt.grid();
    let slice_psnr = (0..g.nz)
        .map(|z| {
            let m = mse(pred.slice(z), gt.slice(z));
            if m == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (data_range * data_range / m).log10()
            }
        })
        .collect();
    Ok(VolumeMetrics {
        name: name.to_string(),
        psnr: psnr(pred, gt, data_range)?,
        ssim: ssim(pred, gt, data_range)?,
        ms_ssim: ms_ssim(pred, gt, data_range)?,
        slice_psnr,
        slice_ssim: ssim_per_slice(pred, gt, data_range)?,
    })
}

impl MetricsReport {
    pub fn new(data_range: f64, volumes: Vec<VolumeMetrics>) -> Self {
        let n = volumes.len().max(1) as f64;
        MetricsReport {
            data_range,
            mean_psnr: volumes.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: volumes.iter().map(|v| v.ssim).sum::<f64>() / n,
            mean_ms_ssim: volumes.iter().map(|v| v.ms_ssim).sum::<f64>() / n,
            volumes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim,ms_ssim\n");
        for v in &self.volumes {
            s.push_str(&format!("{},{},{},{}\n", v.name, v.psnr, v.ssim, v.ms_ssim));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::{derive_stream, Grid};

    fn grid(n: usize, nz: usize) -> Grid {
        Grid::new(n, n, nz, 0.1, 0.1, 0.3).unwrap()
    }

    fn random(g: Grid, seed: u64) -> Volume {
        let mut s = derive_stream(seed, "metrics", 0);
        Volume::from_fn(g, |_, _, _| s.next_f64())
    }

    #[test]
    fn psnr_closed_forms() {
        let g = grid(8, 2);
        let a = random(g, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn identical_volumes_score_one() {
        let a = random(grid(32, 3), 2);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(ms_ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_follow_luminance_formula() {
        let g = grid(16, 2);
        let (c, d) = (0.4, 0.15);
        let a = Volume::filled(g, c);
        let b = Volume::filled(g, c + d);
        let c1 = (K1 * 1.0f64).powi(2);
        let expected = (2.0 * c * (c + d) + c1) / (c * c + (c + d).powi(2) + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn scale_adaptation() {
        assert_eq!(ms_ssim_scales(32), 2);
        assert_eq!(ms_ssim_scales(136), 4);
        assert_eq!(ms_ssim_scales(176), 5);
        assert_eq!(ms_ssim_scales(11), 1);
        let w = ms_ssim_weights(2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / 0.3304).abs() < 1e-15);
    }

    #[test]
    fn ssim_bounded_and_rejects_small_slices() {
        let g = grid(24, 2);
        let (a, b) = (random(g, 3), random(g, 4));
        let s = ssim(&a, &b, 1.0).unwrap();
        let m = ms_ssim(&a, &b, 1.0).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((-1.0..=1.0).contains(&m));
        let small = Volume::zeros(grid(8, 2));
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let a = random(grid(16, 2), 5);
        let m = volume_metrics("a", &a, &a, 1.0).unwrap();
        let r = MetricsReport::new(1.0, vec![m]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        assert!(r.to_csv().starts_with("name,psnr"));
    }
}

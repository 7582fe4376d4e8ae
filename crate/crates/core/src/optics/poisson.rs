//! Poisson variates: inversion below mean 10, Hörmann's PTRS at or above it.

use crate::voxgrid::RngStream;

const SMALL_MEAN: f64 = 10.0;

/// `ln(k!)`, exact table below 10 and Stirling series above.
fn ln_factorial(k: f64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_945_7,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
        10.604_602_902_745_25,
        12.801_827_480_081_469,
    ];
    if k < 10.0 {
        return TABLE[k as usize];
    }
    let k2 = k * k;
    (k + 0.5) * k.ln() - k + 0.5 * std::f64::consts::TAU.ln()
        + (1.0 / 12.0 - (1.0 / 360.0 - 1.0 / (1260.0 * k2)) / k2) / k
}

fn inversion(mean: f64, rng: &mut RngStream) -> f64 {
    let u = rng.next_f64();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0.0;
    while u > cdf && k < 1000.0 {
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}

fn ptrs(mean: f64, rng: &mut RngStream) -> f64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.next_f64() - 0.5;
        let v = rng.next_f64();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -mean + k * loglam - ln_factorial(k)
        {
            return k;
        }
    }
}

/// Draws one Poisson variate with the given mean (`mean <= 0` gives 0).
pub fn sample_poisson(mean: f64, rng: &mut RngStream) -> f64 {
    if mean <= 0.0 {
        0.0
    } else if mean < SMALL_MEAN {
        inversion(mean, rng)
    } else {
        ptrs(mean, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::derive_stream;

    fn moments(mean: f64, n: usize) -> (f64, f64) {
        let mut s = derive_stream(11, "poisson", mean.to_bits());
        let xs: Vec<f64> = (0..n).map(|_| sample_poisson(mean, &mut s)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    }

    #[test]
    fn mean_and_variance_match_across_regimes() {
        for mean in [0.3, 2.0, 9.5, 10.0, 37.0, 1000.0, 1e6] {
            let n = 100_000;
            let (m, v) = moments(mean, n);
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 5.0 * se, "mean {mean}: got {m}");
            assert!((v / mean - 1.0).abs() < 0.03, "mean {mean}: var {v}");
        }
    }

    #[test]
    fn small_mean_pmf() {
        let mean = 3.0;
        let n = 200_000;
        let mut s = derive_stream(2, "pmf", 0);
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let k = sample_poisson(mean, &mut s) as usize;
            if k < 8 {
                counts[k] += 1;
            }
        }
        let mut p = (-mean).exp();
        for (k, &c) in counts.iter().enumerate() {
            if k > 0 {
                p *= mean / k as f64;
            }
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() < 5.0 * (p / n as f64).sqrt() + 1e-4, "k = {k}");
        }
    }

    #[test]
    fn stirling_branch_is_continuous() {
        let exact: f64 = (1..=10).map(|i| (i as f64).ln()).sum();
        assert!((ln_factorial(10.0) - exact).abs() < 1e-10);
        let exact9: f64 = (1..=9).map(|i| (i as f64).ln()).sum();
        assert!((ln_factorial(9.0) - exact9).abs() < 1e-12);
    }
}

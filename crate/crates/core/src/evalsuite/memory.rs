//! Analytic attention-memory model for volumetric versus lateral-axial
//! factorized attention.
//!
//! For a level with feature map `(X, Y, Z, C)`, `H` heads and `B` bytes per
//! element:
//!
//! * activations (Q, K, V, output): `4 * X*Y*Z * C * B` for both layouts;
//! * volumetric scores: `H * (X*Y*Z)^2 * B`;
//! * factorized scores: `Z * H * (X*Y)^2 * B + X*Y * H * Z^2 * B`.
//!
//! The linear regime drops the score terms, modelling fused kernels that
//! never materialize the score matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionArch {
    Volumetric,
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemRegime {
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDims {
    pub x: u64,
    pub y: u64,
    pub channels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemModelConfig {
    /// Feature-map levels ordered from the deepest (smallest) outward.
    pub levels: Vec<LevelDims>,
    pub axial: u64,
    pub heads: u64,
    pub bytes_per_element: u64,
    pub regime: MemRegime,
}

impl MemModelConfig {
    /// Lateral sizes 17, 34, ..., 544 at 40 planes: the four levels of the
    /// 136-wide network extended by two shallower levels, with channel
    /// widths halving outward from 512 and floored at 64.
    pub fn paper(regime: MemRegime) -> Self {
        let levels = (0..6)
            .map(|l| LevelDims {
                x: 17 << l,
                y: 17 << l,
                channels: (512u64 >> l).max(64),
            })
            .collect();
        MemModelConfig {
            levels,
            axial: 40,
            heads: 1,
            bytes_per_element: 2,
            regime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axial == 0 || self.heads == 0 || self.bytes_per_element == 0 {
            return Err(Error::Config("axial, heads and bytes_per_element must be positive".into()));
        }
        if self.levels.iter().any(|l| l.x == 0 || l.y == 0 || l.channels == 0) {
            return Err(Error::Config("level dims must be positive".into()));
        }
        Ok(())
    }
}

/// Score-matrix bytes of one level.
pub fn score_bytes(level: &LevelDims, axial: u64, heads: u64, bytes: u64, arch: AttentionArch) -> u128 {
    let lateral = (level.x * level.y) as u128;
    let (z, h, b) = (axial as u128, heads as u128, bytes as u128);
    match arch {
        AttentionArch::Volumetric => h * (lateral * z).pow(2) * b,
        AttentionArch::Factorized => z * h * lateral.pow(2) * b + lateral * h * z * z * b,
    }
}

/// Q/K/V/output activation bytes of one level.
pub fn activation_bytes(level: &LevelDims, axial: u64, bytes: u64) -> u128 {
    4 * (level.x * level.y * axial) as u128 * level.channels as u128 * bytes as u128
}

/// Attention memory in bytes with attention on the deepest `depth` levels.
pub fn attention_memory(cfg: &MemModelConfig, arch: AttentionArch, depth: usize) -> Result<u128> {
    cfg.validate()?;
    if depth > cfg.levels.len() {
        return Err(Error::Config(format!(
            "depth {depth} exceeds the {} configured levels",
            cfg.levels.len()
        )));
    }
    Ok(cfg.levels[..depth]
        .iter()
        .map(|l| {
            let act = activation_bytes(l, cfg.axial, cfg.bytes_per_element);
            match cfg.regime {
                MemRegime::Quadratic => act + score_bytes(l, cfg.axial, cfg.heads, cfg.bytes_per_element, arch),
                MemRegime::Linear => act,
            }
        })
        .sum())
}

/// `depth,arch,regime,bytes` rows for every depth and both layouts.
pub fn memory_csv(cfg: &MemModelConfig) -> Result<String> {
    let regime = match cfg.regime {
        MemRegime::Quadratic => "quadratic",
        MemRegime::Linear => "linear",
    };
    let mut s = String::from("depth,arch,regime,bytes\n");
    for d in 1..=cfg.levels.len() {
        for (arch, name) in [(AttentionArch::Volumetric, "volumetric"), (AttentionArch::Factorized, "factorized")] {
            s.push_str(&format!("{d},{name},{regime},{}\n", attention_memory(cfg, arch, d)?));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bottleneck() -> LevelDims {
        LevelDims {
            x: 17,
            y: 17,
            channels: 64,
        }
    }

    #[test]
    fn bottleneck_score_arithmetic() {
        let vol = score_bytes(&bottleneck(), 40, 1, 2, AttentionArch::Volumetric);
        let fac = score_bytes(&bottleneck(), 40, 1, 2, AttentionArch::Factorized);
        assert_eq!(vol, 2 * 11560u128 * 11560);
        assert_eq!(vol, 267_267_200);
        assert_eq!(fac, 2 * (40 * 289u128 * 289 + 289 * 1600));
        assert_eq!(fac, 7_606_480);
        let ratio = vol as f64 / fac as f64;
        assert!((ratio - 35.137).abs() < 1e-3);
    }

    #[test]
    fn single_slice_degenerates() {
        let l = bottleneck();
        let vol = score_bytes(&l, 1, 2, 2, AttentionArch::Volumetric);
        let fac = score_bytes(&l, 1, 2, 2, AttentionArch::Factorized);
        let axial_term = 289 * 2 * 2;
        assert_eq!(fac - axial_term, vol);
    }

    #[test]
    fn factorized_never_exceeds_volumetric() {
        for lateral in 1..=40u64 {
            for z in 1..=25u64 {
                let l = LevelDims { x: lateral, y: 1, channels: 8 };
                let vol = score_bytes(&l, z, 1, 1, AttentionArch::Volumetric);
                let fac = score_bytes(&l, z, 1, 1, AttentionArch::Factorized);
                if lateral >= 2 && z >= 2 {
                    assert!(fac <= vol, "L={lateral} Z={z}");
                }
                if lateral * z > lateral + z {
                    assert!(fac < vol, "L={lateral} Z={z}");
                }
            }
        }
    }

    #[test]
    fn monotone_in_depth_and_csv_shape() {
        let cfg = MemModelConfig::paper(MemRegime::Quadratic);
        for arch in [AttentionArch::Volumetric, AttentionArch::Factorized] {
            let mut last = 0;
            for d in 0..=6 {
                let m = attention_memory(&cfg, arch, d).unwrap();
                assert!(m >= last);
                last = m;
            }
        }
        assert!(attention_memory(&cfg, AttentionArch::Factorized, 7).is_err());
        let csv = memory_csv(&cfg).unwrap();
        assert_eq!(csv.lines().count(), 1 + 12);
        assert!(csv.starts_with("depth,arch,regime,bytes\n1,volumetric,quadratic,"));
    }
}

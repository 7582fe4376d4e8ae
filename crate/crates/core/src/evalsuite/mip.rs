use std::fmt::Write as _;

use crate::voxgrid::Volume;

/// Maximum-intensity projection along z with the depth index attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mip {
    pub nx: usize,
    pub ny: usize,
    pub max: Vec<f64>,
    /// Smallest z attaining the maximum.
    pub depth: Vec<usize>,
}

pub fn mip_depth(v: &Volume) -> Mip {
    let g = v.grid();
    let plane = g.nx * g.ny;
    let mut max = v.slice(0).to_vec();
    let mut depth = vec![0usize; plane];
    for z in 1..g.nz {
        for (i, &val) in v.slice(z).iter().enumerate() {
            if val > max[i] {
                max[i] = val;
                depth[i] = z;
            }
        }
    }
    Mip {
        nx: g.nx,
        ny: g.ny,
        max,
        depth,
    }
}

impl Mip {
    /// 8-bit binary graymap (P5) of the max map, scaled to its own range.
    pub fn max_pgm(&self) -> Vec<u8> {
        let lo = self.max.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels = self.max.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8);
        pgm(self.nx, self.ny, pixels)
    }

    /// Depth map as a graymap, depth `d` of `nz` mapped to `255 d / (nz - 1)`.
    pub fn depth_pgm(&self, nz: usize) -> Vec<u8> {
        let top = nz.saturating_sub(1).max(1) as f64;
        let pixels = self.depth.iter().map(|&d| (d as f64 / top * 255.0).round() as u8);
        pgm(self.nx, self.ny, pixels)
    }

    /// `x,y,max,depth` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,max,depth\n");
        for y in 0..self.ny {
            for x in 0..self.nx {
                let i = x + self.nx * y;
                let _ = writeln!(s, "{x},{y},{},{}", self.max[i], self.depth[i]);
            }
        }
        s
    }
}

fn pgm(nx: usize, ny: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// x-z cross-section at lateral row `y`.
pub fn cross_section_xz(v: &Volume, y: usize) -> Vec<f64> {
    let g = v.grid();
    let mut out = Vec::with_capacity(g.nx * g.nz);
    for z in 0..g.nz {
        for x in 0..g.nx {
            out.push(v.get(x, y, z));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::{derive_stream, Grid};

    #[test]
    fn single_slice_support() {
        let g = Grid::new(5, 4, 6, 1.0, 1.0, 1.0).unwrap();
        let v = Volume::from_fn(g, |x, y, z| if z == 3 { 1.0 + (x * y) as f64 } else { 0.0 });
        let m = mip_depth(&v);
        for i in 0..20 {
            assert_eq!(m.depth[i], 3);
        }
        assert_eq!(m.max, v.slice(3));
    }

    #[test]
    fn ties_resolve_to_smallest_depth() {
        let g = Grid::new(3, 3, 4, 1.0, 1.0, 1.0).unwrap();
        let m = mip_depth(&Volume::filled(g, 2.0));
        assert!(m.depth.iter().all(|&d| d == 0));
    }

    #[test]
    fn matches_loop_nest_oracle() {
        let g = Grid::new(4, 4, 3, 1.0, 1.0, 1.0).unwrap();
        let mut s = derive_stream(3, "mip", 0);
        let v = Volume::from_fn(g, |_, _, _| (s.next_f64() * 4.0).floor());
        let m = mip_depth(&v);
        for y in 0..4 {
            for x in 0..4 {
                let mut best = (f64::NEG_INFINITY, 0);
                for z in 0..3 {
                    if v.get(x, y, z) > best.0 {
                        best = (v.get(x, y, z), z);
                    }
                }
                assert_eq!((m.max[x + 4 * y], m.depth[x + 4 * y]), best);
            }
        }
        let pgm = m.max_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), "P5\n4 4\n255\n".len() + 16);
        assert_eq!(m.to_csv().lines().count(), 17);
    }
}

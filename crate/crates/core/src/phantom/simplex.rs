//! 3D simplex noise over a stream-seeded permutation table.

use crate::voxgrid::RngStream;

const GRAD3: [[f64; 3]; 12] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
];

const F3: f64 = 1.0 / 3.0;
const G3: f64 = 1.0 / 6.0;

#[derive(Clone)]
pub struct SimplexNoise {
    perm: [u8; 512],
}

impl SimplexNoise {
    /// Fisher-Yates shuffle of `0..256` driven by `stream`.
    pub fn new(stream: &RngStream) -> Self {
        let mut s = stream.clone();
        let mut p: [u8; 256] = std::array::from_fn(|i| i as u8);
        for i in (1..256).rev() {
            let j = s.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        SimplexNoise { perm }
    }

    #[inline]
    fn grad_index(&self, i: usize, j: usize, k: usize) -> usize {
        let p = &self.perm;
        p[i + p[j + p[k] as usize] as usize] as usize % 12
    }

    pub fn eval(&self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        let s = (x + y + z) * F3;
        let (i, j, k) = ((x + s).floor(), (y + s).floor(), (z + s).floor());
        let t = (i + j + k) * G3;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let z0 = z - (k - t);

        // which of the six tetrahedra holds the point
        let (i1, j1, k1, i2, j2, k2) = if x0 >= y0 {
            if y0 >= z0 {
                (1, 0, 0, 1, 1, 0)
            } else if x0 >= z0 {
                (1, 0, 0, 1, 0, 1)
            } else {
                (0, 0, 1, 1, 0, 1)
            }
        } else if y0 < z0 {
            (0, 0, 1, 0, 1, 1)
        } else if x0 < z0 {
            (0, 1, 0, 0, 1, 1)
        } else {
            (0, 1, 0, 1, 1, 0)
        };

        let corners = [
            (x0, y0, z0, 0, 0, 0),
            (x0 - i1 as f64 + G3, y0 - j1 as f64 + G3, z0 - k1 as f64 + G3, i1, j1, k1),
            (
                x0 - i2 as f64 + 2.0 * G3,
                y0 - j2 as f64 + 2.0 * G3,
                z0 - k2 as f64 + 2.0 * G3,
                i2,
                j2,
                k2,
            ),
            (x0 - 1.0 + 3.0 * G3, y0 - 1.0 + 3.0 * G3, z0 - 1.0 + 3.0 * G3, 1, 1, 1),
        ];
        let ii = i.rem_euclid(256.0) as usize;
        let jj = j.rem_euclid(256.0) as usize;
        let kk = k.rem_euclid(256.0) as usize;
        let mut n = 0.0;
        for (dx, dy, dz, oi, oj, ok) in corners {
            let t = 0.6 - dx * dx - dy * dy - dz * dz;
            if t > 0.0 {
                let g = GRAD3[self.grad_index(ii + oi, jj + oj, kk + ok)];
                let t2 = t * t;
                n += t2 * t2 * (g[0] * dx + g[1] * dy + g[2] * dz);
            }
        }
        (32.0 * n).clamp(-1.0, 1.0)
    }
}

/// One-shot evaluation; builds the permutation table from `stream` each call.
pub fn simplex3(p: [f64; 3], stream: &RngStream) -> f64 {
    SimplexNoise::new(stream).eval(p)
}

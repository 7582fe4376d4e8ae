//! Forward and adjoint kernels behind the graph operations. Feature maps are
//! `(C, N)` row blocks with `N = X*Y*Z` and x-fastest spatial order.

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taps {
    /// 3x3 in the x-y plane, never crossing z.
    Lateral3,
    /// 3 along z, never crossing x-y.
    Axial3,
    Pointwise,
}

impl Taps {
    pub fn count(self) -> usize {
        match self {
            Taps::Lateral3 => 9,
            Taps::Axial3 => 3,
            Taps::Pointwise => 1,
        }
    }

    /// Offsets in kernel-tap order: `ky*3 + kx` laterally, `kz` axially.
    pub fn offsets(self) -> Vec<(isize, isize, isize)> {
        match self {
            Taps::Lateral3 => (0..9).map(|t| (t % 3 - 1, t / 3 - 1, 0)).collect(),
            Taps::Axial3 => (0..3).map(|t| (0, 0, t - 1)).collect(),
            Taps::Pointwise => vec![(0, 0, 0)],
        }
    }
}

/// For each tap offset, calls `f(dst_start, src_start, len)` for every
/// contiguous in-bounds x-run of the shifted copy.
fn for_each_run(dims: (usize, usize, usize), off: (isize, isize, isize), mut f: impl FnMut(usize, usize, usize)) {
    let (nx, ny, nz) = dims;
    let (ox, oy, oz) = off;
    let x_lo = (-ox).max(0) as usize;
    let x_hi = (nx as isize - ox).min(nx as isize).max(0) as usize;
    if x_lo >= x_hi {
        return;
    }
    for z in 0..nz {
        let sz = z as isize + oz;
        if sz < 0 || sz >= nz as isize {
            continue;
        }
        for y in 0..ny {
            let sy = y as isize + oy;
            if sy < 0 || sy >= ny as isize {
                continue;
            }
            let dst = x_lo + nx * (y + ny * z);
            let src = (x_lo as isize + ox) as usize + nx * (sy as usize + ny * sz as usize);
            f(dst, src, x_hi - x_lo);
        }
    }
}

/// Rows `ci*K + k` hold channel `ci` shifted by tap `k`, zero padded.
pub fn im2col<T: Scalar>(x: &[T], cin: usize, dims: (usize, usize, usize), taps: Taps) -> Vec<T> {
    let n = dims.0 * dims.1 * dims.2;
    let offs = taps.offsets();
    let k = offs.len();
    let mut col = vec![T::ZERO; cin * k * n];
    for ci in 0..cin {
        let src = &x[ci * n..(ci + 1) * n];
        for (t, &off) in offs.iter().enumerate() {
            let row = &mut col[(ci * k + t) * n..(ci * k + t + 1) * n];
            for_each_run(dims, off, |d, s, len| row[d..d + len].copy_from_slice(&src[s..s + len]));
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `dx`.
pub fn col2im<T: Scalar>(dcol: &[T], cin: usize, dims: (usize, usize, usize), taps: Taps, dx: &mut [T]) {
    let n = dims.0 * dims.1 * dims.2;
    let offs = taps.offsets();
    let k = offs.len();
    for ci in 0..cin {
        let dst = &mut dx[ci * n..(ci + 1) * n];
        for (t, &off) in offs.iter().enumerate() {
            let row = &dcol[(ci * k + t) * n..(ci * k + t + 1) * n];
            for_each_run(dims, off, |d, s, len| {
                for i in 0..len {
                    dst[s + i] += row[d + i];
                }
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnAxis {
    /// Tokens are the x-y positions of one z-slice.
    Lateral,
    /// Tokens are the z positions of one lateral column.
    Axial,
}

/// Token layout of one attention instance inside a `(C, N)` block.
struct Instances {
    count: usize,
    tokens: usize,
    /// Stride between consecutive tokens.
    token_stride: isize,
    plane: usize,
    axis: AttnAxis,
}

impl Instances {
    fn new(dims: (usize, usize, usize), axis: AttnAxis) -> Self {
        let plane = dims.0 * dims.1;
        match axis {
            AttnAxis::Lateral => Instances {
                count: dims.2,
                tokens: plane,
                token_stride: 1,
                plane,
                axis,
            },
            AttnAxis::Axial => Instances {
                count: plane,
                tokens: dims.2,
                token_stride: plane as isize,
                plane,
                axis,
            },
        }
    }

    fn base(&self, i: usize) -> usize {
        match self.axis {
            AttnAxis::Lateral => i * self.plane,
            AttnAxis::Axial => i,
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the output and the
/// softmax matrices (one `T x T` block per instance and head).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    channels: usize,
    dims: (usize, usize, usize),
    heads: usize,
    axis: AttnAxis,
) -> (Vec<T>, Vec<T>) {
    let n = dims.0 * dims.1 * dims.2;
    let d = channels / heads;
    let inst = Instances::new(dims, axis);
    let tt = inst.tokens;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![T::ZERO; channels * n];
    let mut probs = vec![T::ZERO; inst.count * heads * tt * tt];
    let ts = inst.token_stride;
    let cs = n as isize;
    for i in 0..inst.count {
        for h in 0..heads {
            let base = h * d * n + inst.base(i);
            let p = &mut probs[(i * heads + h) * tt * tt..(i * heads + h + 1) * tt * tt];
            // S = Q K^T
            T::gemm(tt, d, tt, scale, &q[base..], ts, cs, &k[base..], cs, ts, T::ZERO, p, tt as isize, 1);
            for row in p.chunks_mut(tt) {
                let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
                let mut s = T::ZERO;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                let inv = T::ONE / s;
                for e in row.iter_mut() {
                    *e *= inv;
                }
            }
            // O = P V
            T::gemm(tt, tt, d, T::ONE, p, tt as isize, 1, &v[base..], ts, cs, T::ZERO, &mut out[base..], ts, cs);
        }
    }
    (out, probs)
}

/// Adjoint of [`attention_forward`], accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    channels: usize,
    dims: (usize, usize, usize),
    heads: usize,
    axis: AttnAxis,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let n = dims.0 * dims.1 * dims.2;
    let d = channels / heads;
    let inst = Instances::new(dims, axis);
    let tt = inst.tokens;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let ts = inst.token_stride;
    let cs = n as isize;
    let mut dp = vec![T::ZERO; tt * tt];
    for i in 0..inst.count {
        for h in 0..heads {
            let base = h * d * n + inst.base(i);
            let p = &probs[(i * heads + h) * tt * tt..(i * heads + h + 1) * tt * tt];
            // dP = dO V^T
            T::gemm(tt, d, tt, T::ONE, &dout[base..], ts, cs, &v[base..], cs, ts, T::ZERO, &mut dp, tt as isize, 1);
            // dV += P^T dO
            T::gemm(tt, tt, d, T::ONE, p, 1, tt as isize, &dout[base..], ts, cs, T::ONE, &mut dv[base..], ts, cs);
            // softmax adjoint, with the score scale folded in
            for (prow, drow) in p.chunks(tt).zip(dp.chunks_mut(tt)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (dr, &pr) in drow.iter_mut().zip(prow) {
                    *dr = pr * (*dr - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            T::gemm(tt, tt, d, T::ONE, &dp, tt as isize, 1, &k[base..], ts, cs, T::ONE, &mut dq[base..], ts, cs);
            T::gemm(tt, tt, d, T::ONE, &dp, 1, tt as isize, &q[base..], ts, cs, T::ONE, &mut dk[base..], ts, cs);
        }
    }
}

pub const GN_EPS: f64 = 1e-5;

/// Group normalization statistics `(mean, 1/std)` per group.
pub fn group_stats<T: Scalar>(x: &[T], channels: usize, n: usize, groups: usize) -> (Vec<T>, Vec<T>) {
    let per = channels / groups * n;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = &x[g * per..(g + 1) * per];
        let m = s.iter().map(|v| v.to_f64()).sum::<f64>() / per as f64;
        let var = s.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / per as f64;
        mean.push(T::from_f64(m));
        rstd.push(T::from_f64(1.0 / (var + GN_EPS).sqrt()));
    }
    (mean, rstd)
}

/// Per-plane uniform-window SSIM on `[0, 1]` data, averaged over every
/// valid window position of every z-slice. The window side is
/// `min(7, nx, ny)`.
pub const TRAIN_SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn ssim_window(nx: usize, ny: usize) -> usize {
    TRAIN_SSIM_WINDOW.min(nx).min(ny)
}

/// Valid-mode box sums of an `nx x ny` plane with a `w x w` window.
fn box_valid(p: &[f64], nx: usize, ny: usize, w: usize) -> Vec<f64> {
    let (ox, oy) = (nx - w + 1, ny - w + 1);
    let mut rows = vec![0.0; ox * ny];
    for y in 0..ny {
        let r = &p[nx * y..nx * (y + 1)];
        let mut s: f64 = r[..w].iter().sum();
        rows[ox * y] = s;
        for x in 1..ox {
            s += r[x + w - 1] - r[x - 1];
            rows[x + ox * y] = s;
        }
    }
    let mut out = vec![0.0; ox * oy];
    for x in 0..ox {
        let mut s: f64 = (0..w).map(|k| rows[x + ox * k]).sum();
        out[x] = s;
        for y in 1..oy {
            s += rows[x + ox * (y + w - 1)] - rows[x + ox * (y - 1)];
            out[x + ox * y] = s;
        }
    }
    out
}

/// Adjoint of [`box_valid`]: spreads each window value over its pixels.
fn box_adjoint(c: &[f64], nx: usize, ny: usize, w: usize) -> Vec<f64> {
    let (ox, oy) = (nx - w + 1, ny - w + 1);
    let mut cols = vec![0.0; ox * ny];
    for x in 0..ox {
        for y in 0..ny {
            let lo = y.saturating_sub(w - 1);
            let hi = y.min(oy - 1);
            if lo <= hi {
                cols[x + ox * y] = (lo..=hi).map(|j| c[x + ox * j]).sum();
            }
        }
    }
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let lo = x.saturating_sub(w - 1);
            let hi = x.min(ox - 1);
            if lo <= hi {
                out[x + nx * y] = (lo..=hi).map(|i| cols[i + ox * y]).sum();
            }
        }
    }
    out
}

/// Mean training SSIM of `a` against `b`, plus the per-pixel gradient with
/// respect to `a` when `want_grad` is set.
pub fn ssim_train<T: Scalar>(a: &[T], b: &[T], dims: (usize, usize, usize), want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (nx, ny, nz) = dims;
    let w = ssim_window(nx, ny);
    let np = (w * w) as f64;
    let (ox, oy) = (nx - w + 1, ny - w + 1);
    let windows = (ox * oy * nz) as f64;
    let plane = nx * ny;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for z in 0..nz {
        let pa: Vec<f64> = a[z * plane..(z + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let pb: Vec<f64> = b[z * plane..(z + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let sa = box_valid(&pa, nx, ny, w);
        let sb = box_valid(&pb, nx, ny, w);
        let saa = box_valid(&sq(&pa, &pa), nx, ny, w);
        let sbb = box_valid(&sq(&pb, &pb), nx, ny, w);
        let sab = box_valid(&sq(&pa, &pb), nx, ny, w);
        let nw = ox * oy;
        let (mut c0, mut c1, mut c2) = (vec![0.0; nw], vec![0.0; nw], vec![0.0; nw]);
        for i in 0..nw {
            let ma = sa[i] / np;
            let mb = sb[i] / np;
            let va = saa[i] / np - ma * ma;
            let vb = sbb[i] / np - mb * mb;
            let cov = sab[i] / np - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = va + vb + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if grad.is_some() {
                let g_mu = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
                let g_var = -s / b2;
                let g_cov = 2.0 * a1 / (b1 * b2);
                c0[i] = (g_mu - 2.0 * g_var * ma - g_cov * mb) / np;
                c1[i] = 2.0 * g_var / np;
                c2[i] = g_cov / np;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (d0, d1, d2) = (box_adjoint(&c0, nx, ny, w), box_adjoint(&c1, nx, ny, w), box_adjoint(&c2, nx, ny, w));
            for p in 0..plane {
                g[z * plane + p] = (d0[p] + pa[p] * d1[p] + pb[p] * d2[p]) / windows;
            }
        }
    }
    (total / windows, grad)
}

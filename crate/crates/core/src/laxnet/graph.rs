//! Tape-based reverse-mode differentiation over [`Tensor4`] values.

use crate::error::{Error, Result};

use super::kernels::{self, AttnAxis, Taps};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor4;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        taps: Taps,
        /// `None` for pointwise convolutions, which read `x` directly.
        col: Option<Vec<T>>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        axis: AttnAxis,
        probs: Vec<T>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddChannel {
        x: usize,
        v: usize,
    },
    Affine {
        x: usize,
        a: T,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Mse {
        x: usize,
        target: Vec<T>,
    },
    Ssim {
        x: usize,
        grad: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<(usize, usize)>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a recorded value; zeros when it is off the loss path.
    pub fn of(&self, v: Var, len: usize) -> Vec<T> {
        self.nodes[v.0].clone().unwrap_or_else(|| vec![T::ZERO; len])
    }

    /// Gradients of every parameter touched by the graph, by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (usize, Option<&Vec<T>>)> + '_ {
        self.params.iter().map(|&(pid, node)| (pid, self.nodes[node].as_ref()))
    }

    /// Adds the parameter gradients into `acc` (one buffer per parameter).
    pub fn accumulate(&self, acc: &mut [Vec<T>]) {
        for (pid, g) in self.params() {
            if let Some(g) = g {
                for (a, &b) in acc[pid].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

fn dims_of(shape: [usize; 4]) -> (usize, usize, usize) {
    (shape[1], shape[2], shape[3])
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or differentiable input.
    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter `pid` of `store`; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<T>, pid: usize) -> Var {
        if let Some(&(_, n)) = self.param_nodes.iter().find(|(p, _)| *p == pid) {
            return Var(n);
        }
        let v = self.push(store.tensor(pid).clone(), Op::Param);
        self.param_nodes.push((pid, v.0));
        v
    }

    /// Convolution with weights `[cout, cin * taps]` and optional bias.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, taps: Taps) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let k = taps.count();
        let cin = xs[0];
        let cout = ws[0];
        if ws[1] * ws[2] * ws[3] != cin * k {
            return Err(Error::DimMismatch(format!(
                "convolution weights {ws:?} do not match {cin} input channels with {k} taps"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::DimMismatch(format!("bias length {} != {cout}", self.value(b).len())));
            }
        }
        let n = xs[1] * xs[2] * xs[3];
        let col = match taps {
            Taps::Pointwise => None,
            _ => Some(kernels::im2col(self.value(x).data(), cin, dims_of(xs), taps)),
        };
        let mut out = Tensor4::zeros([cout, xs[1], xs[2], xs[3]]);
        {
            let src = col.as_deref().unwrap_or(self.value(x).data());
            T::gemm(
                cout,
                cin * k,
                n,
                T::ONE,
                self.value(w).data(),
                (cin * k) as isize,
                1,
                src,
                n as isize,
                1,
                T::ZERO,
                out.data_mut(),
                n as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for (co, row) in out.data_mut().chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        Ok(self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                taps,
                col,
            },
        ))
    }

    /// Scaled dot-product attention of `q` against `k`, `v` per head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, axis: AttnAxis) -> Result<Var> {
        let s = self.value(q).shape();
        if self.value(k).shape() != s || self.value(v).shape() != s {
            return Err(Error::DimMismatch("attention q, k, v shapes differ".into()));
        }
        if heads == 0 || s[0] % heads != 0 {
            return Err(Error::HeadDivisibility { heads, channels: s[0] });
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            s[0],
            dims_of(s),
            heads,
            axis,
        );
        Ok(self.push(
            Tensor4::from_vec(s, out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                axis,
                probs,
            },
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let c = s[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::DimMismatch(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::DimMismatch("group norm affine length".into()));
        }
        let n = s[1] * s[2] * s[3];
        let xv = self.value(x).data();
        let (mean, rstd) = kernels::group_stats(xv, c, n, groups);
        let per_group = c / groups;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::ZERO; c * n];
        for ch in 0..c {
            let g = ch / per_group;
            for i in ch * n..(ch + 1) * n {
                out[i] = (xv[i] - mean[g]) * rstd[g] * gm[ch] + bt[ch];
            }
        }
        Ok(self.push(
            Tensor4::from_vec(s, out)?,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean,
                rstd,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor4::from_vec(xv.shape(), out).expect("shape preserved");
        self.push(t, Op::Silu(x.0))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<[usize; 4]> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::DimMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Tensor4::from_vec(s, out)?, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Tensor4::from_vec(s, out)?, Op::Mul(a.0, b.0)))
    }

    /// Adds `v[c]` to every voxel of channel `c`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if self.value(v).len() != s[0] {
            return Err(Error::DimMismatch(format!(
                "channel bias of length {} for {} channels",
                self.value(v).len(),
                s[0]
            )));
        }
        let n = s[1] * s[2] * s[3];
        let mut out = self.value(x).clone();
        let bias = self.value(v).data().to_vec();
        for (c, row) in out.data_mut().chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|e| *e += bias[c]);
        }
        Ok(self.push(out, Op::AddChannel { x: x.0, v: v.0 }))
    }

    /// `a * x + b` element-wise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| a * v + b).collect();
        let t = Tensor4::from_vec(xv.shape(), out).expect("shape preserved");
        self.push(t, Op::Affine { x: x.0, a })
    }

    /// 2x2 lateral average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, nx, ny, nz] = self.value(x).shape();
        if nx % 2 != 0 || ny % 2 != 0 {
            return Err(Error::InvalidDims(format!("lateral dims {nx}x{ny} not divisible by 2")));
        }
        let (hx, hy) = (nx / 2, ny / 2);
        let xv = self.value(x);
        let mut out = Tensor4::zeros([c, hx, hy, nz]);
        let quarter = T::from_f64(0.25);
        for ch in 0..c {
            for z in 0..nz {
                for y in 0..hy {
                    for xx in 0..hx {
                        let s = xv.get(ch, 2 * xx, 2 * y, z)
                            + xv.get(ch, 2 * xx + 1, 2 * y, z)
                            + xv.get(ch, 2 * xx, 2 * y + 1, z)
                            + xv.get(ch, 2 * xx + 1, 2 * y + 1, z);
                        out.set(ch, xx, y, z, s * quarter);
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x.0)))
    }

    /// 2x nearest-neighbour lateral upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [c, nx, ny, nz] = self.value(x).shape();
        let xv = self.value(x);
        let mut out = Tensor4::zeros([c, 2 * nx, 2 * ny, nz]);
        for ch in 0..c {
            for z in 0..nz {
                for y in 0..2 * ny {
                    for xx in 0..2 * nx {
                        out.set(ch, xx, y, z, xv.get(ch, xx / 2, y / 2, z));
                    }
                }
            }
        }
        self.push(out, Op::Upsample2(x.0))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape();
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.value(*p).shape();
            if s[1..] != first[1..] {
                return Err(Error::DimMismatch(format!("concat: {s:?} vs {first:?}")));
            }
            c += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor4::from_vec([c, first[1], first[2], first[3]], data)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|v| v.0).collect())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor4::scalar(s), Op::Sum(x.0))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor4<T>) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::DimMismatch(format!(
                "mse: {:?} vs {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let xv = self.value(x).data();
        let s = xv
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64();
                d * d
            })
            .sum::<f64>()
            / xv.len() as f64;
        Ok(self.push(
            Tensor4::scalar(T::from_f64(s)),
            Op::Mse {
                x: x.0,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Training SSIM of single-channel `x` against a constant target.
    pub fn ssim(&mut self, x: Var, target: &Tensor4<T>) -> Result<Var> {
        let s = self.value(x).shape();
        if s != target.shape() || s[0] != 1 {
            return Err(Error::DimMismatch(format!("ssim: {s:?} vs {:?}", target.shape())));
        }
        let (v, g) = kernels::ssim_train(self.value(x).data(), target.data(), dims_of(s), true);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(v)),
            Op::Ssim {
                x: x.0,
                grad: g.expect("gradient requested"),
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`. A graph can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphReuse);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::DimMismatch("backward needs a scalar loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.param_nodes.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let shape = node.value.shape();
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, taps, col } => {
                let xs = val(*x).shape();
                let cin = xs[0];
                let cout = shape[0];
                let k = taps.count();
                let n = xs[1] * xs[2] * xs[3];
                let src = col.as_deref().unwrap_or(val(*x).data());
                let mut dw = vec![T::ZERO; cout * cin * k];
                T::gemm(cout, n, cin * k, T::ONE, g, n as isize, 1, src, 1, n as isize, T::ZERO, &mut dw, (cin * k) as isize, 1);
                add_into(&mut grads[*w], &dw);
                if let Some(b) = b {
                    let db: Vec<T> = g.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    add_into(&mut grads[*b], &db);
                }
                let mut dcol = vec![T::ZERO; cin * k * n];
                T::gemm(cin * k, cout, n, T::ONE, val(*w).data(), 1, (cin * k) as isize, g, n as isize, 1, T::ZERO, &mut dcol, n as isize, 1);
                match taps {
                    Taps::Pointwise => add_into(&mut grads[*x], &dcol),
                    _ => {
                        let mut dx = vec![T::ZERO; cin * n];
                        kernels::col2im(&dcol, cin, dims_of(xs), *taps, &mut dx);
                        add_into(&mut grads[*x], &dx);
                    }
                }
            }
            Op::Attention { q, k, v, heads, axis, probs } => {
                let len = node.value.len();
                let (mut dq, mut dk, mut dv) = (vec![T::ZERO; len], vec![T::ZERO; len], vec![T::ZERO; len]);
                kernels::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    shape[0],
                    dims_of(shape),
                    *heads,
                    *axis,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                add_into(&mut grads[*q], &dq);
                add_into(&mut grads[*k], &dk);
                add_into(&mut grads[*v], &dv);
            }
            Op::GroupNorm { x, gamma, groups, mean, rstd, beta } => {
                let c = shape[0];
                let n = shape[1] * shape[2] * shape[3];
                let per = c / groups;
                let xv = val(*x).data();
                let gm = val(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; c * n];
                for grp in 0..*groups {
                    let (m, r) = (mean[grp], rstd[grp]);
                    let range = grp * per * n..(grp + 1) * per * n;
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for idx in range.clone() {
                        let ch = idx / n;
                        let h = (xv[idx] - m) * r;
                        let dh = g[idx] * gm[ch];
                        dgamma[ch] += g[idx] * h;
                        dbeta[ch] += g[idx];
                        sum_dh += dh.to_f64();
                        sum_dh_h += (dh * h).to_f64();
                    }
                    let cnt = (per * n) as f64;
                    let (mdh, mdhh) = (T::from_f64(sum_dh / cnt), T::from_f64(sum_dh_h / cnt));
                    for idx in range {
                        let ch = idx / n;
                        let h = (xv[idx] - m) * r;
                        dx[idx] = r * (g[idx] * gm[ch] - mdh - h * mdhh);
                    }
                }
                add_into(&mut grads[*x], &dx);
                add_into(&mut grads[*gamma], &dgamma);
                add_into(&mut grads[*beta], &dbeta);
            }
            Op::Silu(x) => {
                let dx: Vec<T> = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let s = sigmoid(v);
                        gi * s * (T::ONE + v * (T::ONE - s))
                    })
                    .collect();
                add_into(&mut grads[*x], &dx);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[*a], g);
                add_into(&mut grads[*b], g);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                add_into(&mut grads[*a], &da);
                add_into(&mut grads[*b], &db);
            }
            Op::AddChannel { x, v } => {
                let n = shape[1] * shape[2] * shape[3];
                add_into(&mut grads[*x], g);
                let dv: Vec<T> = g.chunks(n).map(|r| r.iter().copied().sum()).collect();
                add_into(&mut grads[*v], &dv);
            }
            Op::Affine { x, a } => {
                let dx: Vec<T> = g.iter().map(|&v| v * *a).collect();
                add_into(&mut grads[*x], &dx);
            }
            Op::AvgPool2(x) => {
                let xs = val(*x).shape();
                let mut dx = Tensor4::<T>::zeros(xs);
                let quarter = T::from_f64(0.25);
                let [c, hx, hy, nz] = shape;
                for ch in 0..c {
                    for z in 0..nz {
                        for y in 0..hy {
                            for xx in 0..hx {
                                let v = g[node.value.index(ch, xx, y, z)] * quarter;
                                for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                                    dx.set(ch, 2 * xx + ox, 2 * y + oy, z, v);
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[*x], dx.data());
            }
            Op::Upsample2(x) => {
                let xs = val(*x).shape();
                let mut dx = Tensor4::<T>::zeros(xs);
                let [c, nx, ny, nz] = shape;
                for ch in 0..c {
                    for z in 0..nz {
                        for y in 0..ny {
                            for xx in 0..nx {
                                let idx = dx.index(ch, xx / 2, y / 2, z);
                                dx.data_mut()[idx] += g[node.value.index(ch, xx, y, z)];
                            }
                        }
                    }
                }
                add_into(&mut grads[*x], dx.data());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    add_into(&mut grads[p], &g[off..off + len]);
                    off += len;
                }
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; val(*x).len()];
                add_into(&mut grads[*x], &dx);
            }
            Op::Mse { x, target } => {
                let xv = val(*x).data();
                let s = g[0] * T::from_f64(2.0 / xv.len() as f64);
                let dx: Vec<T> = xv.iter().zip(target).map(|(&a, &b)| s * (a - b)).collect();
                add_into(&mut grads[*x], &dx);
            }
            Op::Ssim { x, grad } => {
                let dx: Vec<T> = grad.iter().map(|&v| g[0] * T::from_f64(v)).collect();
                add_into(&mut grads[*x], &dx);
            }
        }
    }
}

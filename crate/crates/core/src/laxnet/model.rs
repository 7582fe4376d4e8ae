//! Lateral-axial factorized U-Net.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::RngStream;

use super::graph::{Graph, Var};
use super::kernels::{AttnAxis, Taps};
use super::params::{Init, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor4;

pub const GROUPS: usize = 4;
pub const TIME_FREQUENCIES: usize = 64;
pub const TIME_MAX_FREQUENCY: f64 = 1e4;

/// Sub-module counts of one block, applied in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockComposition {
    pub lat_conv: usize,
    pub ax_conv: usize,
    pub lat_attn: usize,
    pub ax_attn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub lateral_downsamples: usize,
    pub composition: BlockComposition,
    pub heads: usize,
    /// Number of deepest levels carrying attention.
    pub attention_depth: usize,
    pub time_embed_width: usize,
    /// Feed the measurement as a second input channel.
    pub condition_on_x0: bool,
}

impl ArchConfig {
    pub fn desk() -> Self {
        ArchConfig {
            base_channels: 16,
            multipliers: vec![1, 2, 4],
            lateral_downsamples: 2,
            composition: BlockComposition {
                lat_conv: 1,
                ax_conv: 1,
                lat_attn: 1,
                ax_attn: 1,
            },
            heads: 2,
            attention_depth: 2,
            time_embed_width: 64,
            condition_on_x0: true,
        }
    }

    pub fn paper() -> Self {
        ArchConfig {
            base_channels: 32,
            multipliers: vec![1, 2, 4, 8],
            lateral_downsamples: 3,
            composition: BlockComposition {
                lat_conv: 2,
                ax_conv: 4,
                lat_attn: 2,
                ax_attn: 2,
            },
            heads: 4,
            attention_depth: 2,
            time_embed_width: 128,
            condition_on_x0: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    pub fn in_channels(&self) -> usize {
        if self.condition_on_x0 {
            2
        } else {
            1
        }
    }

    pub fn has_attention(&self, level: usize) -> bool {
        level + self.attention_depth >= self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.base_channels == 0 || self.multipliers.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.lateral_downsamples + 1 != self.levels() {
            return Err(Error::Config(format!(
                "{} lateral downsamples need {} channel multipliers, got {}",
                self.lateral_downsamples,
                self.lateral_downsamples + 1,
                self.levels()
            )));
        }
        if self.attention_depth > self.levels() {
            return Err(Error::Config(format!(
                "attention depth {} exceeds {} levels",
                self.attention_depth,
                self.levels()
            )));
        }
        for l in 0..self.levels() {
            let c = self.channels(l);
            if c % GROUPS != 0 {
                return Err(Error::Config(format!("{c} channels not divisible into {GROUPS} groups")));
            }
            if self.has_attention(l) && (self.heads == 0 || c % self.heads != 0) {
                return Err(Error::HeadDivisibility {
                    heads: self.heads,
                    channels: c,
                });
            }
        }
        if self.time_embed_width == 0 {
            return Err(Error::Config("time embedding width must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map dims at the deepest level.
    pub fn bottleneck(&self, nx: usize, ny: usize, nz: usize) -> (usize, usize, usize) {
        (nx >> self.lateral_downsamples, ny >> self.lateral_downsamples, nz)
    }

    /// Lateral dims must survive every 2x downsample.
    pub fn check_input(&self, nx: usize, ny: usize) -> Result<()> {
        let f = 1usize << self.lateral_downsamples;
        if nx % f != 0 || ny % f != 0 || nx == 0 || ny == 0 {
            return Err(Error::InvalidDims(format!(
                "lateral dims {nx}x{ny} not divisible by {f} ({} downsamples)",
                self.lateral_downsamples
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t`: sines then cosines over a geometric
/// frequency table from 1 to 1e4.
pub fn time_features(t: f64) -> Vec<f64> {
    let n = TIME_FREQUENCIES;
    let freqs: Vec<f64> = (0..n)
        .map(|i| TIME_MAX_FREQUENCY.powf(i as f64 / (n - 1) as f64))
        .collect();
    freqs.iter().map(|f| (f * t).sin()).chain(freqs.iter().map(|f| (f * t).cos())).collect()
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl TimeEmbedding {
    fn register<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, width: usize, s: &RngStream) -> Self {
        let f = 2 * TIME_FREQUENCIES;
        TimeEmbedding {
            w1: p.register(&format!("{prefix}temb.w1"), &[width, f], Init::FanIn(f), s),
            b1: p.register(&format!("{prefix}temb.b1"), &[width], Init::Zeros, s),
            w2: p.register(&format!("{prefix}temb.w2"), &[width, width], Init::FanIn(width), s),
            b2: p.register(&format!("{prefix}temb.b2"), &[width], Init::Zeros, s),
        }
    }

    /// Embedding of `t` as a `(width, 1, 1, 1)` value.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, t: f64) -> Result<Var> {
        let feats: Vec<T> = time_features(t).into_iter().map(T::from_f64).collect();
        let x = g.input(Tensor4::from_vec([feats.len(), 1, 1, 1], feats)?);
        let (w1, b1) = (g.param(p, self.w1), g.param(p, self.b1));
        let h = g.conv(x, w1, Some(b1), Taps::Pointwise)?;
        let h = g.silu(h);
        let (w2, b2) = (g.param(p, self.w2), g.param(p, self.b2));
        g.conv(h, w2, Some(b2), Taps::Pointwise)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    fn register<T: Scalar>(p: &mut ParamStore<T>, name: &str, c: usize, s: &RngStream) -> Self {
        Norm {
            gamma: p.register(&format!("{name}.gn.gamma"), &[c], Init::Ones, s),
            beta: p.register(&format!("{name}.gn.beta"), &[c], Init::Zeros, s),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(p, self.gamma), g.param(p, self.beta));
        g.group_norm(x, gm, bt, GROUPS)
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    norm: Norm,
    taps: Taps,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct AttnUnit {
    norm: Norm,
    axis: AttnAxis,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

/// One lateral-axial block: lateral convs, axial convs, lateral attention,
/// axial attention, each a pre-normalized residual branch.
#[derive(Debug, Clone)]
pub struct LaxBlock {
    channels: usize,
    heads: usize,
    convs: Vec<ConvUnit>,
    attns: Vec<AttnUnit>,
    temb_w: usize,
    temb_b: usize,
}

impl LaxBlock {
    pub fn register<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        c: usize,
        comp: &BlockComposition,
        attention: bool,
        heads: usize,
        temb_width: usize,
        s: &RngStream,
    ) -> Self {
        let mut convs = Vec::new();
        let conv_plan = std::iter::repeat(Taps::Lateral3)
            .take(comp.lat_conv)
            .chain(std::iter::repeat(Taps::Axial3).take(comp.ax_conv));
        for (i, taps) in conv_plan.enumerate() {
            let (tag, k) = match taps {
                Taps::Lateral3 => ("lat", vec![3, 3]),
                _ => ("ax", vec![3]),
            };
            let un = format!("{name}.conv{i}");
            let norm = Norm::register(p, &un, c, s);
            let mut dims = vec![c, c];
            dims.extend(&k);
            let w = p.register(&format!("{un}.{tag}.w"), &dims, Init::FanIn(c * taps.count()), s);
            let b = p.register(&format!("{un}.{tag}.b"), &[c], Init::Zeros, s);
            convs.push(ConvUnit { norm, taps, w, b });
        }
        let mut attns = Vec::new();
        if attention {
            let attn_plan = std::iter::repeat(AttnAxis::Lateral)
                .take(comp.lat_attn)
                .chain(std::iter::repeat(AttnAxis::Axial).take(comp.ax_attn));
            for (i, axis) in attn_plan.enumerate() {
                let un = format!("{name}.attn{i}");
                let norm = Norm::register(p, &un, c, s);
                let mut proj = |suffix: &str| p.register(&format!("{un}.{suffix}"), &[c, c], Init::FanIn(c), s);
                let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
                let bo = p.register(&format!("{un}.bo"), &[c], Init::Zeros, s);
                attns.push(AttnUnit {
                    norm,
                    axis,
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                });
            }
        }
        LaxBlock {
            channels: c,
            heads,
            convs,
            attns,
            temb_w: p.register(&format!("{name}.temb.w"), &[c, temb_width], Init::FanIn(temb_width), s),
            temb_b: p.register(&format!("{name}.temb.b"), &[c], Init::Zeros, s),
        }
    }

    /// `temb` is the activated time embedding shared by all blocks.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, temb: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape[0] != self.channels {
            return Err(Error::DimMismatch(format!(
                "block expects {} channels, got {}",
                self.channels, shape[0]
            )));
        }
        let (tw, tb) = (g.param(p, self.temb_w), g.param(p, self.temb_b));
        let tproj = g.conv(temb, tw, Some(tb), Taps::Pointwise)?;
        let mut injected = false;
        let mut h = x;
        for u in &self.convs {
            let n = u.norm.forward(g, p, h)?;
            let a = g.silu(n);
            let (w, b) = (g.param(p, u.w), g.param(p, u.b));
            let mut r = g.conv(a, w, Some(b), u.taps)?;
            if !injected {
                r = g.add_channel(r, tproj)?;
                injected = true;
            }
            h = g.add(h, r)?;
        }
        for u in &self.attns {
            let n = u.norm.forward(g, p, h)?;
            let (wq, wk, wv) = (g.param(p, u.wq), g.param(p, u.wk), g.param(p, u.wv));
            let q = g.conv(n, wq, None, Taps::Pointwise)?;
            let k = g.conv(n, wk, None, Taps::Pointwise)?;
            let v = g.conv(n, wv, None, Taps::Pointwise)?;
            let a = g.attention(q, k, v, self.heads, u.axis)?;
            let (wo, bo) = (g.param(p, u.wo), g.param(p, u.bo));
            let mut r = g.conv(a, wo, Some(bo), Taps::Pointwise)?;
            if !injected {
                r = g.add_channel(r, tproj)?;
                injected = true;
            }
            h = g.add(h, r)?;
        }
        if !injected {
            h = g.add_channel(h, tproj)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: usize,
    b: usize,
    taps: Taps,
}

impl ConvLayer {
    fn register<T: Scalar>(p: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, taps: Taps, init: Init, s: &RngStream) -> Self {
        let mut dims = vec![cout, cin];
        match taps {
            Taps::Lateral3 => dims.extend([3, 3]),
            Taps::Axial3 => dims.push(3),
            Taps::Pointwise => {}
        }
        ConvLayer {
            w: p.register(&format!("{name}.w"), &dims, init, s),
            b: p.register(&format!("{name}.b"), &[cout], Init::Zeros, s),
            taps,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv(x, w, Some(b), self.taps)
    }
}

/// Encoder-decoder with lateral-only 2x resampling; the axial extent is
/// never changed.
#[derive(Debug, Clone)]
pub struct UNet {
    arch: ArchConfig,
    temb: TimeEmbedding,
    stem: ConvLayer,
    enc: Vec<LaxBlock>,
    down: Vec<ConvLayer>,
    mid: LaxBlock,
    up: Vec<ConvLayer>,
    merge: Vec<ConvLayer>,
    dec: Vec<LaxBlock>,
    head_norm: Norm,
    head: ConvLayer,
}

impl UNet {
    /// Registers all parameters under `prefix`. The output convolution is
    /// zero-initialized.
    pub fn register<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, arch: &ArchConfig, s: &RngStream) -> Result<Self> {
        arch.validate()?;
        let levels = arch.levels();
        let tw = arch.time_embed_width;
        let temb = TimeEmbedding::register(p, prefix, tw, s);
        let c0 = arch.channels(0);
        let stem = ConvLayer::register(
            p,
            &format!("{prefix}stem"),
            c0,
            arch.in_channels(),
            Taps::Lateral3,
            Init::FanIn(arch.in_channels() * 9),
            s,
        );
        let block = |p: &mut ParamStore<T>, name: String, l: usize| {
            LaxBlock::register(p, &name, arch.channels(l), &arch.composition, arch.has_attention(l), arch.heads, tw, s)
        };
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            enc.push(block(p, format!("{prefix}enc{l}"), l));
            if l + 1 < levels {
                let (ci, co) = (arch.channels(l), arch.channels(l + 1));
                down.push(ConvLayer::register(p, &format!("{prefix}down{l}"), co, ci, Taps::Lateral3, Init::FanIn(ci * 9), s));
            }
        }
        let mid = block(p, format!("{prefix}mid"), levels - 1);
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            let (ci, co) = (arch.channels(l + 1), arch.channels(l));
            up.push(ConvLayer::register(p, &format!("{prefix}up{l}"), co, ci, Taps::Lateral3, Init::FanIn(ci * 9), s));
            merge.push(ConvLayer::register(p, &format!("{prefix}merge{l}"), co, 2 * co, Taps::Pointwise, Init::FanIn(2 * co), s));
            dec.push(block(p, format!("{prefix}dec{l}"), l));
        }
        let head_norm = Norm::register(p, &format!("{prefix}head"), c0, s);
        let head = ConvLayer::register(p, &format!("{prefix}head.out"), 1, c0, Taps::Lateral3, Init::Zeros, s);
        Ok(UNet {
            arch: arch.clone(),
            temb,
            stem,
            enc,
            down,
            mid,
            up,
            merge,
            dec,
            head_norm,
            head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Parameter ids of the output convolution.
    pub fn head_params(&self) -> [usize; 2] {
        [self.head.w, self.head.b]
    }

    /// Raw single-channel output for an input of `in_channels` channels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, input: Var, t: f64) -> Result<Var> {
        let [c, nx, ny, _] = g.value(input).shape();
        if c != self.arch.in_channels() {
            return Err(Error::DimMismatch(format!(
                "network expects {} input channels, got {c}",
                self.arch.in_channels()
            )));
        }
        self.arch.check_input(nx, ny)?;
        let e = self.temb.forward(g, p, t)?;
        let temb = g.silu(e);
        let mut h = self.stem.forward(g, p, input)?;
        let levels = self.arch.levels();
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.enc[l].forward(g, p, h, temb)?;
            skips.push(h);
            if l + 1 < levels {
                let d = g.avg_pool2(h)?;
                h = self.down[l].forward(g, p, d)?;
            }
        }
        h = self.mid.forward(g, p, h, temb)?;
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let u = g.upsample2(h);
            let u = self.up[i].forward(g, p, u)?;
            let cat = g.concat(&[u, skips[l]])?;
            let m = self.merge[i].forward(g, p, cat)?;
            h = self.dec[i].forward(g, p, m, temb)?;
        }
        let n = self.head_norm.forward(g, p, h)?;
        let a = g.silu(n);
        self.head.forward(g, p, a)
    }
}

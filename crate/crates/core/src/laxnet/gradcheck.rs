//! Central-difference gradient checks in double precision.

use crate::error::Result;
use crate::voxgrid::RngStream;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor4;

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Scalar loss `sum(out * r)` with a fixed random `r`, so that every output
/// element contributes.
fn project(g: &mut Graph<f64>, out: Var, stream: &RngStream) -> Result<Var> {
    let shape = g.value(out).shape();
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut s = stream.child(u64::MAX);
    let r: Vec<f64> = (0..g.value(out).len()).map(|_| s.standard_normal()).collect();
    let rv = g.input(Tensor4::from_vec(shape, r)?);
    let m = g.mul(out, rv)?;
    Ok(g.sum(m))
}

/// Checks `d f / d inputs` at `per_input` random coordinates of each input.
pub fn check_inputs(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor4<f64>],
    per_input: usize,
    stream: &RngStream,
) -> Result<GradCheck> {
    let eval = |vals: &[Tensor4<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = project(&mut g, out, stream)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = project(&mut g, out, stream)?;
    let grads = g.backward(l)?;
    let mut pick = stream.child(0);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let an = grads.of(vars[i], t.len());
        for _ in 0..per_input.min(t.len()) {
            let j = pick.below(t.len() as u64) as usize;
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += GRADCHECK_STEP;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] -= 2.0 * GRADCHECK_STEP;
            let down = eval(&vals)?;
            worst = worst.max(rel_err(an[j], (up - down) / (2.0 * GRADCHECK_STEP)));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

/// Checks the parameter gradient of a scalar loss at `count` random
/// parameter coordinates drawn uniformly over all parameter scalars.
pub fn check_params(
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    store: &ParamStore<f64>,
    count: usize,
    stream: &RngStream,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    let grads = g.backward(l)?;
    let mut an = store.zero_grads();
    grads.accumulate(&mut an);
    let total = store.count();
    let mut pick = stream.child(1);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let mut flat = pick.below(total as u64) as usize;
        let mut pid = 0;
        while flat >= store.tensor(pid).len() {
            flat -= store.tensor(pid).len();
            pid += 1;
        }
        let orig = work.data_mut(pid)[flat];
        let loss_at = |v: f64, work: &mut ParamStore<f64>| -> Result<f64> {
            work.data_mut(pid)[flat] = v;
            let mut g = Graph::new();
            let l = f(&mut g, work)?;
            Ok(g.value(l).data()[0])
        };
        let up = loss_at(orig + GRADCHECK_STEP, &mut work)?;
        let down = loss_at(orig - GRADCHECK_STEP, &mut work)?;
        work.data_mut(pid)[flat] = orig;
        worst = worst.max(rel_err(an[pid][flat], (up - down) / (2.0 * GRADCHECK_STEP)));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked: count,
    })
}

/// Gradient checks of every graph primitive on small random inputs, each
/// with `per_input` probes per input tensor.
pub fn primitive_suite(per_input: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use super::kernels::{AttnAxis, Taps};
    let root = crate::voxgrid::derive_stream(seed, "gradcheck", 0);
    let rand = |shape: [usize; 4], id: u64, lo: f64, hi: f64| {
        let mut s = root.child(id);
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| s.uniform(lo, hi)).collect()).expect("sized")
    };
    let x = rand([4, 4, 4, 3], 1, -1.0, 1.0);
    let y = rand([4, 4, 4, 3], 2, -1.0, 1.0);
    let mut out = Vec::new();
    for (name, taps) in [
        ("lateral_conv", Taps::Lateral3),
        ("axial_conv", Taps::Axial3),
        ("pointwise_conv", Taps::Pointwise),
    ] {
        let w = rand([3, 4 * taps.count(), 1, 1], 3, -0.5, 0.5);
        let b = rand([3, 1, 1, 1], 4, -0.5, 0.5);
        let r = check_inputs(|g, v| g.conv(v[0], v[1], Some(v[2]), taps), &[x.clone(), w, b], per_input, &root)?;
        out.push((name, r));
    }
    for (name, axis) in [("lateral_attention", AttnAxis::Lateral), ("axial_attention", AttnAxis::Axial)] {
        let (q, k, v) = (rand([4, 3, 2, 3], 5, -1.0, 1.0), rand([4, 3, 2, 3], 6, -1.0, 1.0), rand([4, 3, 2, 3], 7, -1.0, 1.0));
        let r = check_inputs(|g, a| g.attention(a[0], a[1], a[2], 2, axis), &[q, k, v], per_input, &root)?;
        out.push((name, r));
    }
    let gamma = rand([4, 1, 1, 1], 8, 0.5, 1.5);
    let beta = rand([4, 1, 1, 1], 9, -0.5, 0.5);
    out.push((
        "group_norm",
        check_inputs(|g, v| g.group_norm(v[0], v[1], v[2], 2), &[x.clone(), gamma, beta], per_input, &root)?,
    ));
    out.push(("silu", check_inputs(|g, v| Ok(g.silu(v[0])), &[x.clone()], per_input, &root)?));
    out.push(("add", check_inputs(|g, v| g.add(v[0], v[1]), &[x.clone(), y.clone()], per_input, &root)?));
    out.push(("mul", check_inputs(|g, v| g.mul(v[0], v[1]), &[x.clone(), y.clone()], per_input, &root)?));
    let cb = rand([4, 1, 1, 1], 10, -1.0, 1.0);
    out.push(("add_channel", check_inputs(|g, v| g.add_channel(v[0], v[1]), &[x.clone(), cb], per_input, &root)?));
    out.push(("affine", check_inputs(|g, v| Ok(g.affine(v[0], -1.7, 0.3)), &[x.clone()], per_input, &root)?));
    out.push(("avg_pool2", check_inputs(|g, v| g.avg_pool2(v[0]), &[x.clone()], per_input, &root)?));
    out.push(("upsample2", check_inputs(|g, v| Ok(g.upsample2(v[0])), &[x.clone()], per_input, &root)?));
    let z = rand([2, 4, 4, 3], 11, -1.0, 1.0);
    out.push(("concat", check_inputs(|g, v| g.concat(&[v[0], v[1]]), &[x.clone(), z], per_input, &root)?));
    out.push(("sum", check_inputs(|g, v| Ok(g.sum(v[0])), &[x.clone()], per_input, &root)?));
    let target = rand([4, 4, 4, 3], 12, -1.0, 1.0);
    out.push(("mse", check_inputs(|g, v| g.mse(v[0], &target), &[x.clone()], per_input, &root)?));
    let img = rand([1, 9, 8, 2], 13, 0.0, 1.0);
    let ref_img = rand([1, 9, 8, 2], 14, 0.0, 1.0);
    out.push(("ssim", check_inputs(|g, v| g.ssim(v[0], &ref_img), &[img], per_input, &root)?));
    Ok(out)
}

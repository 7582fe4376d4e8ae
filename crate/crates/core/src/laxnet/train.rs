//! Training loop for the velocity and latent networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::{draw_interpolant, InterpolantDraw, Schedule, ScheduleMode, TRAIN_T_RANGE};
use crate::voxgrid::{derive_stream, load_volume, DatasetManifest, Split, Volume};

use super::checkpoint::{save_checkpoint, CheckpointHeader};
use super::graph::{Graph, Var};
use super::model::ArchConfig;
use super::nets::{LossMode, VoltModel};
use super::optim::{AdamW, AdamWConfig, Plateau};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub schedule: ScheduleMode,
    pub steps: usize,
    pub batch_size: usize,
    /// Batches accumulated per optimizer step.
    pub accumulation: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub eval_every: usize,
    /// Fixed `(t, z)` draws per validation volume.
    pub val_draws: usize,
    pub ssim_lambda: f64,
    pub t_range: (f64, f64),
    pub seed: u64,
    pub init_seed: u64,
    /// Gradient-norm clip applied to each network separately; `None`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    /// Worker threads for batch members; results do not depend on it.
    pub threads: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            loss_mode: LossMode::X1,
            schedule: ScheduleMode::Volt,
            steps: 3000,
            batch_size: 2,
            accumulation: 1,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            plateau_factor: 0.2,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            eval_every: 100,
            val_draws: 2,
            ssim_lambda: 1.0,
            t_range: TRAIN_T_RANGE,
            seed: 0,
            init_seed: 0,
            grad_clip: Some(1.0),
            threads: 1,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            steps: 20_000,
            lr: 5e-5,
            eval_every: 500,
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { mode: self.schedule }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 || self.eval_every == 0 || self.val_draws == 0 {
            return Err(Error::Config("batch_size, accumulation, eval_every and val_draws must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let (lo, hi) = self.t_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("t_range ({lo}, {hi}) must lie within [0, 1]")));
        }
        Ok(())
    }
}

/// `(x0, x1)` pairs normalized by the global clean maximum.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<(Volume, Volume)>,
    pub val: Vec<(Volume, Volume)>,
    pub clean_max: f64,
}

impl TrainingData {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let load = |split: Split| -> Result<Vec<(Volume, Volume)>> {
            m.split(split)
                .map(|r| {
                    let x0 = load_volume(&m.resolve(&r.degraded_path))?;
                    let x1 = load_volume(&m.resolve(&r.clean_path))?;
                    Ok((x0.scale(1.0 / m.clean_max), x1.scale(1.0 / m.clean_max)))
                })
                .collect()
        };
        Ok(TrainingData {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            clean_max: m.clean_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub b: f64,
    pub eta: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.b + self.eta
    }
}

/// Records the per-draw objective: `loss_x1` or `loss_velocity` for the
/// velocity network plus `loss_eta` for the latent network.
pub fn record_loss<T: Scalar>(
    model: &VoltModel<T>,
    g: &mut Graph<T>,
    x0: &Volume,
    x1: &Volume,
    draw: &InterpolantDraw,
    ssim_lambda: f64,
) -> Result<(Var, LossParts)> {
    let out = model.forward_b(g, &draw.xt, x0, draw.t)?;
    let lb = match model.loss_mode {
        LossMode::X1 => {
            let target = Tensor4::from_volume(x1);
            let mse = g.mse(out, &target)?;
            if ssim_lambda == 0.0 {
                mse
            } else {
                let s = g.ssim(out, &target)?;
                let penalty = g.affine(s, -ssim_lambda, ssim_lambda);
                g.add(mse, penalty)?
            }
        }
        LossMode::Velocity => g.mse(out, &Tensor4::from_volume(&draw.velocity_target))?,
    };
    let mut parts = LossParts {
        b: g.value(lb).data()[0].to_f64(),
        eta: 0.0,
    };
    let total = match model.forward_eta(g, &draw.xt, x0, draw.t)? {
        Some(e) => {
            let le = g.mse(e, &Tensor4::from_volume(&draw.z_target))?;
            parts.eta = g.value(le).data()[0].to_f64();
            g.add(lb, le)?
        }
        None => lb,
    };
    Ok((total, parts))
}

/// Gradients of one draw with respect to every parameter.
pub fn draw_gradients<T: Scalar>(
    model: &VoltModel<T>,
    x0: &Volume,
    x1: &Volume,
    draw: &InterpolantDraw,
    ssim_lambda: f64,
) -> Result<(Vec<Vec<T>>, LossParts)> {
    let mut g = Graph::new();
    let (loss, parts) = record_loss(model, &mut g, x0, x1, draw, ssim_lambda)?;
    let grads = g.backward(loss)?;
    let mut acc = model.params.zero_grads();
    grads.accumulate(&mut acc);
    Ok((acc, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_b: f64,
    pub val_eta: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub param_count: usize,
    pub history: Vec<EvalRecord>,
}

fn val_draws(data: &TrainingData, cfg: &TrainConfig, schedule: &Schedule) -> Result<Vec<(usize, InterpolantDraw)>> {
    let mut out = Vec::new();
    for (j, (x0, x1)) in data.val.iter().enumerate() {
        for k in 0..cfg.val_draws {
            let s = derive_stream(cfg.seed, "val", (j * cfg.val_draws + k) as u64);
            out.push((j, draw_interpolant(schedule, x0, x1, &s, cfg.t_range)?));
        }
    }
    Ok(out)
}

pub fn validation_loss<T: Scalar>(model: &VoltModel<T>, data: &TrainingData, draws: &[(usize, InterpolantDraw)], lambda: f64) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for (j, d) in draws {
        let (x0, x1) = &data.val[*j];
        let mut g = Graph::new();
        let (_, p) = record_loss(model, &mut g, x0, x1, d, lambda)?;
        acc.b += p.b;
        acc.eta += p.eta;
    }
    let n = draws.len() as f64;
    Ok(LossParts {
        b: acc.b / n,
        eta: acc.eta / n,
    })
}

/// Runs `f(i)` for `i in 0..n`, on up to `threads` workers, returning the
/// results in index order.
fn run_indexed<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let per = n.div_ceil(threads);
    std::thread::scope(|sc| {
        for (c, slots) in out.chunks_mut(per).enumerate() {
            let f = &f;
            sc.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(c * per + j));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("filled")).collect()
}

/// Clips each network's gradient to global norm `max_norm` separately, so
/// one network's gradient never rescales the other's.
fn clip(grads: &mut [Vec<f32>], names: &[&str], max_norm: f64) {
    let net = |n: &str| n.split('.').next().unwrap_or("").to_string();
    let mut nets: Vec<String> = names.iter().map(|n| net(n)).collect();
    nets.dedup();
    for which in nets {
        let members: Vec<usize> = (0..grads.len()).filter(|&i| net(names[i]) == which).collect();
        let norm = members
            .iter()
            .flat_map(|&i| grads[i].iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = (max_norm / norm) as f32;
            for &i in &members {
                grads[i].iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Trains in place and leaves the best-validation parameters in `model`.
/// `on_best` runs whenever the validation loss improves.
pub fn train(
    model: &mut VoltModel<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord, &VoltModel<f32>, bool) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let schedule = cfg.schedule();
    let vdraws = val_draws(data, cfg, &schedule)?;
    let mut opt = AdamW::new(cfg.adamw, &model.params);
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut lr = cfg.lr;
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut history = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let members = cfg.batch_size * cfg.accumulation;
    for step in 0..cfg.steps {
        let pick = derive_stream(cfg.seed, "batch", step as u64);
        let draws: Vec<(usize, InterpolantDraw)> = (0..members)
            .map(|m| {
                let idx = pick.child(m as u64).below(data.train.len() as u64) as usize;
                let (x0, x1) = &data.train[idx];
                let s = derive_stream(cfg.seed, "draw", step as u64).child(m as u64);
                draw_interpolant(&schedule, x0, x1, &s, cfg.t_range).map(|d| (idx, d))
            })
            .collect::<Result<_>>()?;
        let m: &VoltModel<f32> = model;
        let results = run_indexed(members, cfg.threads, |i| {
            let (idx, d) = &draws[i];
            let (x0, x1) = &data.train[*idx];
            draw_gradients(m, x0, x1, d, cfg.ssim_lambda)
        });
        let mut grads = model.params.zero_grads();
        let mut loss = 0.0;
        for r in results {
            let (g, parts) = r?;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            loss += parts.total();
        }
        loss /= members as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let inv = 1.0 / members as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= inv);
        if let Some(c) = cfg.grad_clip {
            let names: Vec<&str> = model.params.entries().iter().map(|e| e.name.as_str()).collect();
            clip(&mut grads, &names, c);
        }
        opt.step(&mut model.params, &grads, lr)?;
        running += loss;
        running_n += 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let v = validation_loss(model, data, &vdraws, cfg.ssim_lambda)?;
            let val = v.total();
            if !val.is_finite() {
                return Err(Error::Diverged { step, loss: val });
            }
            let rec = EvalRecord {
                step: step + 1,
                train_loss: running / running_n as f64,
                val_loss: val,
                val_b: v.b,
                val_eta: v.eta,
                lr,
            };
            running = 0.0;
            running_n = 0;
            let improved = best.as_ref().map_or(true, |(_, b, _)| val < *b);
            if improved {
                best = Some((step + 1, val, model.params.clone()));
            }
            on_eval(&rec, model, improved)?;
            history.push(rec);
            lr = plateau.observe(val);
        }
    }
    let (best_step, best_val_loss, params) = best.expect("at least one evaluation");
    model.params = params;
    Ok(TrainReport {
        steps: cfg.steps,
        best_step,
        best_val_loss,
        param_count: model.param_count(),
        history,
    })
}

/// Trains from a dataset manifest, writing the checkpoint to `out` each
/// time the validation loss improves.
pub fn train_to_checkpoint(
    manifest: &DatasetManifest,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    out: &Path,
    mut log: impl FnMut(&EvalRecord),
) -> Result<(VoltModel<f32>, TrainReport)> {
    let data = TrainingData::from_manifest(manifest)?;
    let mut model = VoltModel::<f32>::new(arch, cfg.loss_mode, cfg.schedule(), cfg.init_seed)?;
    let echo = serde_json::to_value(cfg)?;
    let clean_max = data.clean_max;
    let report = train(&mut model, &data, cfg, |rec, m, improved| {
        log(rec);
        if improved {
            let header = CheckpointHeader {
                arch: m.arch.clone(),
                loss_mode: m.loss_mode,
                schedule: m.schedule,
                param_count: m.param_count(),
                clean_max,
                step: rec.step,
                val_loss: rec.val_loss,
                train_config: echo.clone(),
            };
            save_checkpoint(out, m, &header)?;
        }
        Ok(())
    })?;
    Ok((model, report))
}

//! Stochastic interpolant between a degraded volume `x0` and a clean volume
//! `x1`: `x_t = alpha(t) x0 + beta(t) x1 + gamma(t) z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laxnet::kernels::ssim_train;
use crate::voxgrid::{RngStream, Volume};

pub const GAMMA_SCALE: f64 = 0.1;
pub const GAMMA_FLOOR: f64 = 1e-8;
pub const TRAIN_T_RANGE: (f64, f64) = (0.001, 0.999);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `gamma = epsilon = 0.1 sin^2(pi t)`.
    Volt,
    /// `gamma = epsilon = 0`.
    FlowMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    pub gamma_dot: f64,
}

impl Schedule {
    pub fn volt() -> Self {
        Schedule { mode: ScheduleMode::Volt }
    }

    pub fn flow_matching() -> Self {
        Schedule {
            mode: ScheduleMode::FlowMatching,
        }
    }

    pub fn has_latent(&self) -> bool {
        self.mode == ScheduleMode::Volt
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let (gamma, gamma_dot) = match self.mode {
            ScheduleMode::Volt => {
                let s = (std::f64::consts::PI * t).sin();
                (
                    GAMMA_SCALE * s * s,
                    GAMMA_SCALE * std::f64::consts::PI * (2.0 * std::f64::consts::PI * t).sin(),
                )
            }
            ScheduleMode::FlowMatching => (0.0, 0.0),
        };
        Ok(ScheduleValues {
            alpha: 1.0 - t,
            beta: t,
            gamma,
            epsilon: gamma,
            alpha_dot: -1.0,
            beta_dot: 1.0,
            gamma_dot,
        })
    }
}

pub fn schedule_eval(s: &Schedule, t: f64) -> Result<ScheduleValues> {
    s.eval(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantDraw {
    pub t: f64,
    pub z: Volume,
    pub xt: Volume,
    pub velocity_target: Volume,
    pub z_target: Volume,
}

/// Draws `t ~ U(t_range)` from `stream.child(0)` and `z` from
/// `stream.child(1)`.
pub fn draw_interpolant(s: &Schedule, x0: &Volume, x1: &Volume, stream: &RngStream, t_range: (f64, f64)) -> Result<InterpolantDraw> {
    let (lo, hi) = t_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("t_range ({lo}, {hi}) must lie within [0, 1]")));
    }
    let t = stream.child(0).uniform(lo, hi);
    let mut zs = stream.child(1);
    let z = Volume::from_fn(*x0.grid(), |_, _, _| zs.standard_normal());
    draw_interpolant_at(s, x0, x1, t, z)
}

/// Deterministic variant with a given time and latent.
pub fn draw_interpolant_at(s: &Schedule, x0: &Volume, x1: &Volume, t: f64, z: Volume) -> Result<InterpolantDraw> {
    x0.check_same_dims(x1, "interpolant endpoints")?;
    z.check_same_dims(x0, "interpolant latent")?;
    let v = s.eval(t)?;
    let n = x0.len();
    let (a, b, c) = (x0.data(), x1.data(), z.data());
    let mut xt = Vec::with_capacity(n);
    let mut vt = Vec::with_capacity(n);
    for i in 0..n {
        xt.push(if t == 0.0 {
            a[i]
        } else if t == 1.0 {
            b[i]
        } else {
            v.alpha * a[i] + v.beta * b[i] + v.gamma * c[i]
        });
        vt.push(v.alpha_dot * a[i] + v.beta_dot * b[i] + v.gamma_dot * c[i]);
    }
    let g = *x0.grid();
    Ok(InterpolantDraw {
        t,
        z_target: z.map(|x| -x),
        z,
        xt: Volume::from_vec(g, xt)?,
        velocity_target: Volume::from_vec(g, vt)?,
    })
}

/// Velocity implied by a clean-volume prediction:
/// `alpha' x0 + beta' x1_hat + (gamma'/gamma)(xt - alpha x0 - beta x1_hat)`.
pub fn velocity_from_x1(s: &Schedule, t: f64, x0: &Volume, xt: &Volume, x1_hat: &Volume) -> Result<Volume> {
    x0.check_same_dims(xt, "velocity x0/xt")?;
    x0.check_same_dims(x1_hat, "velocity x0/x1_hat")?;
    let v = s.eval(t)?;
    let ratio = match s.mode {
        ScheduleMode::FlowMatching => 0.0,
        ScheduleMode::Volt => {
            if v.gamma <= GAMMA_FLOOR {
                return Err(Error::EndpointSingularity { t, gamma: v.gamma });
            }
            v.gamma_dot / v.gamma
        }
    };
    let data = x0
        .data()
        .iter()
        .zip(xt.data())
        .zip(x1_hat.data())
        .map(|((&a, &x), &b)| v.alpha_dot * a + v.beta_dot * b + ratio * (x - v.alpha * a - v.beta * b))
        .collect();
    Volume::from_vec(*x0.grid(), data)
}

fn mean_sq(a: &Volume, b: &Volume) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Training SSIM (uniform 7x7 window, slice-wise) of two volumes.
pub fn train_ssim(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_dims(b, "training ssim")?;
    Ok(ssim_train(a.data(), b.data(), a.grid().dims(), false).0)
}

/// `MSE + lambda (1 - SSIM_train)`.
pub fn loss_x1(x1_hat: &Volume, x1: &Volume, lambda: f64) -> Result<f64> {
    x1_hat.check_same_dims(x1, "loss_x1")?;
    let mse = mean_sq(x1_hat, x1);
    if lambda == 0.0 {
        return Ok(mse);
    }
    Ok(mse + lambda * (1.0 - train_ssim(x1_hat, x1)?))
}

pub fn loss_velocity(b_pred: &Volume, draw: &InterpolantDraw) -> Result<f64> {
    b_pred.check_same_dims(&draw.velocity_target, "loss_velocity")?;
    Ok(mean_sq(b_pred, &draw.velocity_target))
}

pub fn loss_eta(eta_pred: &Volume, draw: &InterpolantDraw) -> Result<f64> {
    eta_pred.check_same_dims(&draw.z_target, "loss_eta")?;
    Ok(mean_sq(eta_pred, &draw.z_target))
}

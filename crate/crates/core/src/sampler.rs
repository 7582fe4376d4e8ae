//! Heun integration of the transport from the measurement (t = 0) towards
//! the clean volume (t = 1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::{velocity_from_x1, Schedule};
use crate::voxgrid::{derive_stream, RngStream, Volume};

pub const DEFAULT_T_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Sde,
    Ode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    pub t_clamp: f64,
    pub seed: u64,
    pub final_predict: bool,
    pub ensemble_size: usize,
}

impl SamplerConfig {
    pub fn sde() -> Self {
        SamplerConfig {
            mode: SamplerMode::Sde,
            steps: 100,
            t_clamp: DEFAULT_T_CLAMP,
            seed: 0,
            final_predict: false,
            ensemble_size: 10,
        }
    }

    pub fn ode() -> Self {
        SamplerConfig {
            mode: SamplerMode::Ode,
            steps: 20,
            ensemble_size: 1,
            ..Self::sde()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.5) {
            return Err(Error::Config(format!("t_clamp must lie in (0, 0.5), got {}", self.t_clamp)));
        }
        Ok(())
    }
}

/// What the velocity network emits.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityOutput {
    /// A clean-volume prediction, converted to a velocity analytically.
    X1Hat(Volume),
    Velocity(Volume),
}

/// The pair of networks driving the transport.
pub trait TransportModel: Sync {
    fn velocity(&self, xt: &Volume, x0: &Volume, t: f64) -> Result<VelocityOutput>;

    /// Latent prediction `eta ~ -E[z | x_t]`; `None` when absent.
    fn eta(&self, xt: &Volume, x0: &Volume, t: f64) -> Result<Option<Volume>>;
}

/// Drift at `(xt, t)` together with the clean-volume prediction, if any.
pub struct DriftEval {
    pub drift: Volume,
    pub x1_hat: Option<Volume>,
}

/// `b + epsilon(t) eta / gamma(t)` in SDE mode, `b` in ODE mode.
pub fn drift(xt: &Volume, t: f64, x0: &Volume, model: &dyn TransportModel, schedule: &Schedule, mode: SamplerMode) -> Result<DriftEval> {
    let (b, x1_hat) = match model.velocity(xt, x0, t)? {
        VelocityOutput::X1Hat(x1) => (velocity_from_x1(schedule, t, x0, xt, &x1)?, Some(x1)),
        VelocityOutput::Velocity(b) => (b, None),
    };
    let v = schedule.eval(t)?;
    let drift = match mode {
        SamplerMode::Sde if v.epsilon > 0.0 => match model.eta(xt, x0, t)? {
            Some(eta) => {
                let w = v.epsilon / v.gamma;
                b.zip_map(&eta, |bi, ei| bi + w * ei)?
            }
            None => b,
        },
        _ => b,
    };
    Ok(DriftEval { drift, x1_hat })
}

/// One stochastic Heun step with frozen noise: the increment
/// `sqrt(2 eps(t)) sqrt(dt) zeta` enters both predictor and corrector.
#[allow(clippy::too_many_arguments)]
pub fn heun_step(
    xt: &Volume,
    t: f64,
    dt: f64,
    x0: &Volume,
    model: &dyn TransportModel,
    schedule: &Schedule,
    mode: SamplerMode,
    noise: &RngStream,
) -> Result<(Volume, Option<Volume>)> {
    let d1 = drift(xt, t, x0, model, schedule, mode)?.drift;
    let sigma = match mode {
        SamplerMode::Sde => (2.0 * schedule.eval(t)?.epsilon).sqrt() * dt.sqrt(),
        SamplerMode::Ode => 0.0,
    };
    let inc = if sigma > 0.0 {
        let mut s = noise.clone();
        Some(Volume::from_fn(*xt.grid(), |_, _, _| sigma * s.standard_normal()))
    } else {
        None
    };
    let mut pred = xt.zip_map(&d1.clone(), |x, d| x + dt * d)?;
    if let Some(inc) = &inc {
        pred = pred.zip_map(inc, |x, n| x + n)?;
    }
    let e2 = drift(&pred, t + dt, x0, model, schedule, mode)?;
    let half = 0.5 * dt;
    let mut next = Volume::from_vec(
        *xt.grid(),
        xt.data()
            .iter()
            .zip(d1.data())
            .zip(e2.drift.data())
            .map(|((&x, &a), &b)| x + half * (a + b))
            .collect(),
    )?;
    if let Some(inc) = &inc {
        next = next.zip_map(inc, |x, n| x + n)?;
    }
    Ok((next, e2.x1_hat))
}

/// Integrates from `x = y` at `t = delta` to `t = 1 - delta` in
/// `cfg.steps` uniform steps; step `n` draws its noise from
/// `stream.child(n)`.
pub fn sample(y: &Volume, model: &dyn TransportModel, schedule: &Schedule, cfg: &SamplerConfig, stream: &RngStream) -> Result<Volume> {
    cfg.validate()?;
    let (t0, t1) = (cfg.t_clamp, 1.0 - cfg.t_clamp);
    let dt = (t1 - t0) / cfg.steps as f64;
    let mut x = y.clone();
    let mut last_x1 = None;
    for n in 0..cfg.steps {
        let t = t0 + n as f64 * dt;
        let (next, x1) = heun_step(&x, t, dt, y, model, schedule, cfg.mode, &stream.child(n as u64))?;
        if next.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n, t: t + dt });
        }
        x = next;
        last_x1 = x1;
    }
    match (cfg.final_predict, last_x1) {
        (true, Some(x1)) => Ok(x1),
        _ => Ok(x),
    }
}

/// Per-voxel ensemble statistics with the unbiased (K - 1) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    pub samples: Vec<Volume>,
    pub mean: Volume,
    pub sd: Volume,
    pub config: Option<SamplerConfig>,
}

impl SampleEnsemble {
    pub fn from_samples(samples: Vec<Volume>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let g = *samples[0].grid();
        for s in &samples {
            s.check_same_dims(&samples[0], "ensemble member")?;
        }
        let k = samples.len() as f64;
        let n = g.len();
        let mut mean = vec![0.0; n];
        for s in &samples {
            mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0; n];
        for s in &samples {
            var.iter_mut()
                .zip(s.data())
                .zip(&mean)
                .for_each(|((acc, v), m)| *acc += (v - m).powi(2));
        }
        let sd = var.into_iter().map(|v| (v / (k - 1.0)).sqrt()).collect();
        Ok(SampleEnsemble {
            mean: Volume::from_vec(g, mean)?,
            sd: Volume::from_vec(g, sd)?,
            samples,
            config: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stream of ensemble member `k`.
pub fn sample_stream(seed: u64, k: u64) -> RngStream {
    derive_stream(seed, "sample", k)
}

/// `cfg.ensemble_size` samples, integrated on up to `threads` workers.
/// Results do not depend on the thread count.
pub fn sample_ensemble(y: &Volume, model: &dyn TransportModel, schedule: &Schedule, cfg: &SamplerConfig, threads: usize) -> Result<SampleEnsemble> {
    if cfg.ensemble_size < 2 {
        return Err(Error::Config(format!(
            "ensemble statistics need at least 2 samples, got {}",
            cfg.ensemble_size
        )));
    }
    let k = cfg.ensemble_size;
    let run = |i: usize| sample(y, model, schedule, cfg, &sample_stream(cfg.seed, i as u64));
    let samples: Vec<Volume> = if threads <= 1 {
        (0..k).map(run).collect::<Result<_>>()?
    } else {
        let mut out: Vec<Option<Result<Volume>>> = (0..k).map(|_| None).collect();
        std::thread::scope(|sc| {
            for chunk in out.chunks_mut(k.div_ceil(threads)).enumerate().map(|(c, s)| (c * k.div_ceil(threads), s)) {
                let (start, slots) = chunk;
                let run = &run;
                sc.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(run(start + j));
                    }
                });
            }
        });
        out.into_iter().map(|r| r.expect("every slot filled")).collect::<Result<_>>()?
    };
    let mut e = SampleEnsemble::from_samples(samples)?;
    e.config = Some(cfg.clone());
    Ok(e)
}

//! The velocity (`b.`) and latent (`eta.`) networks as one transport model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::interpolant::Schedule;
use crate::sampler::{TransportModel, VelocityOutput};
use crate::voxgrid::{derive_stream, Volume};

use super::graph::{Graph, Var};
use super::model::{ArchConfig, UNet};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// The velocity network predicts the clean volume.
    X1,
    /// The velocity network regresses the velocity directly.
    Velocity,
}

#[derive(Debug, Clone)]
pub struct VoltModel<T> {
    pub arch: ArchConfig,
    pub loss_mode: LossMode,
    pub schedule: Schedule,
    pub params: ParamStore<T>,
    b_net: UNet,
    eta_net: Option<UNet>,
}

impl<T: Scalar> VoltModel<T> {
    /// The latent network exists only when the schedule carries a latent.
    pub fn new(arch: &ArchConfig, loss_mode: LossMode, schedule: Schedule, seed: u64) -> Result<Self> {
        let stream = derive_stream(seed, "init", 0);
        let mut params = ParamStore::new();
        let b_net = UNet::register(&mut params, "b.", arch, &stream)?;
        let eta_net = if schedule.has_latent() {
            Some(UNet::register(&mut params, "eta.", arch, &stream)?)
        } else {
            None
        };
        Ok(VoltModel {
            arch: arch.clone(),
            loss_mode,
            schedule,
            params,
            b_net,
            eta_net,
        })
    }

    pub fn has_eta(&self) -> bool {
        self.eta_net.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Re-draws the zero-initialized output layers (used by gradient checks,
    /// where a zero head would hide every upstream gradient).
    pub fn randomize_heads(&mut self, seed: u64) {
        let s = derive_stream(seed, "head", 0);
        let nets: Vec<&UNet> = std::iter::once(&self.b_net).chain(self.eta_net.as_ref()).collect();
        let ids: Vec<usize> = nets.iter().flat_map(|n| n.head_params()).collect();
        for (j, pid) in ids.into_iter().enumerate() {
            let mut r = s.child(j as u64);
            for v in self.params.data_mut(pid) {
                *v = T::from_f64(r.uniform(-0.1, 0.1));
            }
        }
    }

    fn input(&self, g: &mut Graph<T>, xt: &Volume, x0: &Volume) -> Result<Var> {
        let t = if self.arch.condition_on_x0 {
            Tensor4::stack(&[xt, x0])?
        } else {
            Tensor4::from_volume(xt)
        };
        Ok(g.input(t))
    }

    /// Velocity-network output: `x0 + head` in x1 mode, `head` otherwise.
    pub fn forward_b(&self, g: &mut Graph<T>, xt: &Volume, x0: &Volume, t: f64) -> Result<Var> {
        xt.check_same_dims(x0, "network input")?;
        let inp = self.input(g, xt, x0)?;
        let head = self.b_net.forward(g, &self.params, inp, t)?;
        match self.loss_mode {
            LossMode::X1 => {
                let c = g.input(Tensor4::from_volume(x0));
                g.add(head, c)
            }
            LossMode::Velocity => Ok(head),
        }
    }

    pub fn forward_eta(&self, g: &mut Graph<T>, xt: &Volume, x0: &Volume, t: f64) -> Result<Option<Var>> {
        let Some(net) = &self.eta_net else { return Ok(None) };
        xt.check_same_dims(x0, "network input")?;
        let inp = self.input(g, xt, x0)?;
        Ok(Some(net.forward(g, &self.params, inp, t)?))
    }

    fn to_volume(g: &Graph<T>, v: Var, like: &Volume) -> Result<Volume> {
        g.value(v).channel_volume(0, *like.grid())
    }
}

impl<T: Scalar> TransportModel for VoltModel<T> {
    fn velocity(&self, xt: &Volume, x0: &Volume, t: f64) -> Result<VelocityOutput> {
        let mut g = Graph::new();
        let v = self.forward_b(&mut g, xt, x0, t)?;
        let out = Self::to_volume(&g, v, xt)?;
        Ok(match self.loss_mode {
            LossMode::X1 => VelocityOutput::X1Hat(out),
            LossMode::Velocity => VelocityOutput::Velocity(out),
        })
    }

    fn eta(&self, xt: &Volume, x0: &Volume, t: f64) -> Result<Option<Volume>> {
        let mut g = Graph::new();
        match self.forward_eta(&mut g, xt, x0, t)? {
            Some(v) => Ok(Some(Self::to_volume(&g, v, xt)?)),
            None => Ok(None),
        }
    }
}

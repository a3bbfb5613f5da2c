//! Time-conditioned MLP denoiser, its optimizer, and checkpoint persistence.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, ForwardCache, Mlp, MlpConfig, LOG_SNR_CLAMP};
pub use optim::{anneal_lr, global_norm, step, OptState, OptimizerSettings};

use ndarray::{Array2, ArrayView2};

use crate::diffusion::Parameterization;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::samplers::Denoiser;
use crate::schedule::{LogSnr, ScheduleKind, SchedulePoint};

/// Which parameter set to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    #[default]
    Ema,
    Raw,
}

/// A trainable denoising model: network, output parameterization, raw
/// parameters and optimizer state (which holds the EMA shadow).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    net: Mlp,
    pub parameterization: Parameterization,
    pub schedule: ScheduleKind,
    pub params: Vec<f64>,
    pub opt: OptState,
}

impl Model {
    pub fn new(
        config: MlpConfig,
        parameterization: Parameterization,
        settings: OptimizerSettings,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if config.output_channels != parameterization.channels() {
            return Err(Error::Config(format!(
                "{} parameterization needs {} output channels, config has {}",
                parameterization.name(),
                parameterization.channels(),
                config.output_channels
            )));
        }
        settings.validate()?;
        let net = Mlp::new(config)?;
        let params = net.init(rng);
        let opt = OptState::new(settings, &params);
        Ok(Self {
            net,
            parameterization,
            schedule: ScheduleKind::Cosine,
            params,
            opt,
        })
    }

    pub(crate) fn from_parts(
        config: MlpConfig,
        parameterization: Parameterization,
        schedule: ScheduleKind,
        params: Vec<f64>,
        opt: OptState,
    ) -> Result<Self> {
        let net = Mlp::new(config)?;
        let n = net.n_params();
        if params.len() != n || opt.ema.len() != n || opt.m.len() != n || opt.v.len() != n {
            return Err(Error::shape(format!("{n} parameters"), params.len()));
        }
        Ok(Self {
            net,
            parameterization,
            schedule,
            params,
            opt,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn config(&self) -> &MlpConfig {
        self.net.config()
    }

    pub fn dim(&self) -> usize {
        self.config().input_dim
    }

    pub fn ema(&self) -> &[f64] {
        &self.opt.ema
    }

    pub fn weights(&self, which: Weights) -> &[f64] {
        match which {
            Weights::Ema => &self.opt.ema,
            Weights::Raw => &self.params,
        }
    }

    /// A fresh copy for further training: parameters taken from `which`,
    /// new optimizer state with `settings`.
    pub fn fork(&self, which: Weights, settings: OptimizerSettings) -> Result<Self> {
        settings.validate()?;
        let params = self.weights(which).to_vec();
        let opt = OptState::new(settings, &params);
        Ok(Self {
            net: self.net.clone(),
            parameterization: self.parameterization,
            schedule: self.schedule,
            params,
            opt,
        })
    }

    pub fn predict_raw(
        &self,
        which: Weights,
        z: ArrayView2<f64>,
        points: &[SchedulePoint],
    ) -> Result<Array2<f64>> {
        let cond: Vec<LogSnr> = points.iter().map(|p| p.log_snr).collect();
        self.net.forward(self.weights(which), z, &cond)
    }

    /// `x_hat` rows, one schedule point per row.
    pub fn predict_x(
        &self,
        which: Weights,
        z: ArrayView2<f64>,
        points: &[SchedulePoint],
    ) -> Result<Array2<f64>> {
        let raw = self.predict_raw(which, z, points)?;
        raw_to_x_hat(self.parameterization, z, raw.view(), points)
    }

    pub fn denoiser(&self, which: Weights) -> ModelDenoiser<'_> {
        ModelDenoiser { model: self, which }
    }
}

/// Apply the parameterization's affine map row by row.
pub fn raw_to_x_hat(
    param: Parameterization,
    z: ArrayView2<f64>,
    raw: ArrayView2<f64>,
    points: &[SchedulePoint],
) -> Result<Array2<f64>> {
    let d = z.ncols();
    let mut out = Array2::zeros(z.dim());
    for (i, p) in points.iter().enumerate() {
        let map = param.x_hat_map(p)?;
        for j in 0..d {
            let mut x = map.z_coef * z[[i, j]];
            for c in 0..param.channels() {
                x += map.raw_coefs[c] * raw[[i, c * d + j]];
            }
            out[[i, j]] = x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ModelDenoiser<'a> {
    model: &'a Model,
    which: Weights,
}

impl Denoiser for ModelDenoiser<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn defined_at_zero_snr(&self) -> bool {
        self.model.parameterization.defined_at_zero_snr()
    }

    fn predict_x(&self, z: ArrayView2<f64>, points: &[SchedulePoint]) -> Result<Array2<f64>> {
        self.model.predict_x(self.which, z, points)
    }
}

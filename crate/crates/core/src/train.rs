//! Original (non-distilled) diffusion training.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::diffusion::{loss_weight, LossWeighting, Parameterization};
use crate::error::{Error, Result};
use crate::net::{self, Activation, MlpConfig, Model, OptimizerSettings};
use crate::rng::{fill_standard_normal, Streams};
use crate::schedule::{alpha_sigma, SchedulePoint, TimePoint};

/// Continuous training draws `t ~ U(T_MARGIN, 1 - T_MARGIN)`.
pub const T_MARGIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub parameterization: Parameterization,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = MlpConfig::new(1, 1);
        Self {
            parameterization: Parameterization::V,
            hidden_dims: m.hidden_dims,
            activation: m.activation,
            time_embed_dim: m.time_embed_dim,
        }
    }
}

impl ModelConfig {
    pub fn mlp(&self, dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim: dim,
            hidden_dims: self.hidden_dims.clone(),
            output_channels: self.parameterization.channels(),
            time_embed_dim: self.time_embed_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_weighting: LossWeighting,
    pub batch_size: usize,
    pub updates: u64,
    pub lr: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Train on `t = i/N`, `i in 1..=N` instead of continuous time.
    pub discrete_grid: Option<usize>,
    /// Evaluate the EMA weights on a held-out batch every this many updates (0: never).
    pub eval_every: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weighting: LossWeighting::SnrPlusOne,
            batch_size: 256,
            updates: 20_000,
            lr: 3e-4,
            ema_decay: 0.999,
            weight_decay: 0.001,
            clip_norm: 1.0,
            discrete_grid: None,
            eval_every: 500,
            eval_batch: 1024,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            base_lr: self.lr,
            ema_decay: self.ema_decay,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..OptimizerSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.discrete_grid == Some(0) {
            return Err(Error::Config("discrete_grid must be at least 1".into()));
        }
        self.optimizer().validate()
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub update: u64,
    pub raw_loss: f64,
    /// Weighted loss of the EMA weights on a fixed held-out batch.
    pub ema_eval_metric: Option<f64>,
}

pub struct TrainOutput {
    pub model: Model,
    pub curve: Vec<LossRow>,
}

/// A batch of regression pairs: noisy inputs, their schedule points, and
/// the `x` targets.
pub struct Batch {
    pub z: Array2<f64>,
    pub points: Vec<SchedulePoint>,
    pub target: Array2<f64>,
}

/// Mean over rows of `w(lambda) ||target - x_hat||^2` for raw network
/// output `raw`, and its gradient with respect to `raw`.
pub fn regression_loss(
    param: Parameterization,
    weighting: LossWeighting,
    z: ArrayView2<f64>,
    raw: ArrayView2<f64>,
    points: &[SchedulePoint],
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let (b, d) = z.dim();
    let ch = param.channels();
    if raw.dim() != (b, d * ch) || target.dim() != (b, d) || points.len() != b {
        return Err(Error::shape(
            format!("batch of {b} x {d}"),
            format!("{:?} / {:?}", raw.dim(), target.dim()),
        ));
    }
    let mut total = 0.0;
    let mut d_raw = Array2::zeros(raw.dim());
    let inv_b = 1.0 / b as f64;
    for (i, p) in points.iter().enumerate() {
        let map = param.x_hat_map(p)?;
        let w = loss_weight(p.log_snr, weighting);
        for j in 0..d {
            let mut x_hat = map.z_coef * z[[i, j]];
            for c in 0..ch {
                x_hat += map.raw_coefs[c] * raw[[i, c * d + j]];
            }
            let r = x_hat - target[[i, j]];
            total += w * r * r;
            for c in 0..ch {
                d_raw[[i, c * d + j]] = 2.0 * w * r * map.raw_coefs[c] * inv_b;
            }
        }
    }
    Ok((total * inv_b, d_raw))
}

/// One optimizer update on `batch`; returns the pre-update loss.
pub fn update(model: &mut Model, weighting: LossWeighting, batch: &Batch) -> Result<f64> {
    let cond: Vec<_> = batch.points.iter().map(|p| p.log_snr).collect();
    let param = model.parameterization;
    let (loss, grad) = model
        .net()
        .loss_and_grad(&model.params, batch.z.view(), &cond, |raw| {
            regression_loss(
                param,
                weighting,
                batch.z.view(),
                raw,
                &batch.points,
                batch.target.view(),
            )
        })?;
    net::step(&mut model.params, &grad, &mut model.opt)?;
    if model.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite parameters after update {}",
            model.opt.step
        )));
    }
    Ok(loss)
}

/// Weighted loss of the chosen weights without updating.
pub fn eval_loss(
    model: &Model,
    which: net::Weights,
    weighting: LossWeighting,
    batch: &Batch,
) -> Result<f64> {
    let raw = model.predict_raw(which, batch.z.view(), &batch.points)?;
    Ok(regression_loss(
        model.parameterization,
        weighting,
        batch.z.view(),
        raw.view(),
        &batch.points,
        batch.target.view(),
    )?
    .0)
}

/// Training pairs `z_t = alpha_t x + sigma_t eps` with target `x`.
pub fn noisy_batch(
    dataset: &ToyDataset,
    cfg: &TrainConfig,
    streams: &Streams,
    stream: &str,
    index: u64,
    size: usize,
) -> Batch {
    let d = dataset.dim();
    let mut rng = streams.stream(stream, index);
    let x = dataset.sample(&mut rng, size);
    let mut eps = vec![0.0; size * d];
    fill_standard_normal(&mut rng, &mut eps);
    let mut z = Array2::zeros((size, d));
    let mut points = Vec::with_capacity(size);
    for i in 0..size {
        let t = match cfg.discrete_grid {
            Some(n) => rng.gen_range(1..=n) as f64 / n as f64,
            None => rng.gen_range(T_MARGIN..1.0 - T_MARGIN),
        };
        let p = alpha_sigma(TimePoint::new(t).expect("t in range"));
        for j in 0..d {
            z[[i, j]] = p.alpha * x[[i, j]] + p.sigma * eps[i * d + j];
        }
        points.push(p);
    }
    Batch {
        z,
        points,
        target: x,
    }
}

/// Fresh model for `dataset`, initialized from the `init` stream.
pub fn init_model(
    dataset: &ToyDataset,
    model_cfg: &ModelConfig,
    settings: OptimizerSettings,
    streams: &Streams,
) -> Result<Model> {
    Model::new(
        model_cfg.mlp(dataset.dim()),
        model_cfg.parameterization,
        settings,
        &mut streams.stream("init", 0),
    )
}

/// Train from scratch; the returned model carries raw weights and the EMA.
pub fn train_original(
    dataset: &ToyDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    streams: &Streams,
) -> Result<TrainOutput> {
    dataset.validate()?;
    cfg.validate()?;
    if cfg.discrete_grid.is_some() && !model_cfg.parameterization.defined_at_zero_snr() {
        return Err(Error::Config(format!(
            "discrete-grid training visits t=1, where the {} parameterization is undefined",
            model_cfg.parameterization.name()
        )));
    }
    let mut model = init_model(dataset, model_cfg, cfg.optimizer(), streams)?;
    let held_out = noisy_batch(dataset, cfg, streams, "train_eval", 0, cfg.eval_batch);
    let mut curve = Vec::with_capacity(cfg.updates as usize);
    for u in 0..cfg.updates {
        let batch = noisy_batch(dataset, cfg, streams, "train", u, cfg.batch_size);
        let loss =
            update(&mut model, cfg.loss_weighting, &batch).map_err(|e| divergence_context(e, u))?;
        let done = u + 1;
        let ema_eval_metric =
            if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.updates) {
                Some(eval_loss(
                    &model,
                    net::Weights::Ema,
                    cfg.loss_weighting,
                    &held_out,
                )?)
            } else {
                None
            };
        curve.push(LossRow {
            update: done,
            raw_loss: loss,
            ema_eval_metric,
        });
    }
    Ok(TrainOutput { model, curve })
}

pub(crate) fn divergence_context(e: Error, update: u64) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("update {}: {msg}", update + 1)),
        other => other,
    }
}

/// CSV with columns `update,raw_loss,ema_eval_metric`.
pub fn loss_curve_csv(rows: &[LossRow]) -> Result<String> {
    crate::csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_dims: vec![16, 16],
            time_embed_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn regression_loss_matches_direct_formula() {
        let p = alpha_sigma(TimePoint::new(0.3).unwrap());
        let z = ndarray::array![[0.4, -0.2]];
        let raw = ndarray::array![[0.1, 0.5, -0.3, 0.2]];
        let target = ndarray::array![[1.0, 0.0]];
        let param = Parameterization::XEpsCombined;
        let (l, g) = regression_loss(
            param,
            LossWeighting::SnrPlusOne,
            z.view(),
            raw.view(),
            &[p],
            target.view(),
        )
        .unwrap();
        let map = param.x_hat_map(&p).unwrap();
        let xh = map.apply(&[0.4, -0.2], &[0.1, 0.5, -0.3, 0.2]);
        let w = 1.0 + p.log_snr.as_f64().exp();
        let want = w * ((xh[0] - 1.0).powi(2) + xh[1].powi(2));
        assert!((l - want).abs() < 1e-12 * want);
        // finite-difference check of d loss / d raw
        for k in 0..4 {
            let h = 1e-6;
            let mut rp = raw.clone();
            rp[[0, k]] += h;
            let mut rm = raw.clone();
            rm[[0, k]] -= h;
            let lp = regression_loss(
                param,
                LossWeighting::SnrPlusOne,
                z.view(),
                rp.view(),
                &[p],
                target.view(),
            )
            .unwrap()
            .0;
            let lm = regression_loss(
                param,
                LossWeighting::SnrPlusOne,
                z.view(),
                rm.view(),
                &[p],
                target.view(),
            )
            .unwrap()
            .0;
            assert!(((lp - lm) / (2.0 * h) - g[[0, k]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_updates_returns_init() {
        let ds = ToyDataset::Gauss1d {
            mean: 0.0,
            var: 1.0,
        };
        let cfg = TrainConfig {
            updates: 0,
            ..TrainConfig::default()
        };
        let streams = Streams::new(1);
        let out = train_original(&ds, &small_model(), &cfg, &streams).unwrap();
        let init = init_model(&ds, &small_model(), cfg.optimizer(), &streams).unwrap();
        assert_eq!(out.model, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn deterministic_curve() {
        let ds = ToyDataset::default();
        let cfg = TrainConfig {
            updates: 30,
            batch_size: 32,
            eval_every: 10,
            eval_batch: 64,
            ..TrainConfig::default()
        };
        let a = train_original(&ds, &small_model(), &cfg, &Streams::new(2)).unwrap();
        let b = train_original(&ds, &small_model(), &cfg, &Streams::new(2)).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert_eq!(
            a.curve
                .iter()
                .filter(|r| r.ema_eval_metric.is_some())
                .count(),
            3
        );
    }

    #[test]
    fn discrete_grid_times_on_grid() {
        let cfg = TrainConfig {
            discrete_grid: Some(8),
            ..TrainConfig::default()
        };
        let b = noisy_batch(
            &ToyDataset::default(),
            &cfg,
            &Streams::new(3),
            "train",
            0,
            500,
        );
        for p in &b.points {
            let k = p.t.get() * 8.0;
            assert_eq!(k, k.round());
            assert!(k >= 1.0);
        }
        assert!(b.points.iter().any(|p| p.is_zero_snr()));
    }

    #[test]
    fn eps_rejects_discrete_grid() {
        let cfg = TrainConfig {
            discrete_grid: Some(4),
            updates: 1,
            ..TrainConfig::default()
        };
        let m = ModelConfig {
            parameterization: Parameterization::Eps,
            ..small_model()
        };
        assert!(matches!(
            train_original(&ToyDataset::default(), &m, &cfg, &Streams::new(1)),
            Err(Error::Config(_))
        ));
    }
}

//! Experiment pipelines behind the `ablate`, `sweep` and `fast-schedule`
//! commands. Each returns plain rows; callers write them as CSV.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{LossWeighting, Parameterization};
use crate::distill::{progressive_distill, DistillConfig, DistillLadder, Evaluator};
use crate::error::{Error, Result};
use crate::net::Model;
use crate::rng::Streams;
use crate::samplers::SamplerKind;
use crate::train::{train_original, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameterization: Parameterization,
    pub loss_weighting: LossWeighting,
    /// `ok`, or `N/A` when training or sampling diverged.
    pub status: String,
    pub final_loss: Option<f64>,
    pub stochastic_energy: Option<f64>,
    pub ddim_energy: Option<f64>,
    pub note: String,
}

impl AblationRow {
    pub fn diverged(&self) -> bool {
        self.status != "ok"
    }
}

/// Train and evaluate every parameterization x loss weighting pair.
/// Divergence in a cell is recorded in its row; other errors abort.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let eval = Evaluator::new(&cfg.dataset, &cfg.eval, &streams)?;
    let mut rows = Vec::with_capacity(12);
    for param in Parameterization::ALL {
        for weighting in LossWeighting::ALL {
            let model_cfg = ModelConfig {
                parameterization: param,
                ..cfg.model.clone()
            };
            let train_cfg = TrainConfig {
                loss_weighting: weighting,
                ..cfg.train.clone()
            };
            let row = match ablation_cell(cfg, &model_cfg, &train_cfg, &eval, &streams) {
                Ok((loss, stoch, ddim)) => AblationRow {
                    parameterization: param,
                    loss_weighting: weighting,
                    status: "ok".into(),
                    final_loss: loss,
                    stochastic_energy: Some(stoch),
                    ddim_energy: Some(ddim),
                    note: String::new(),
                },
                Err(Error::Divergence(msg)) => AblationRow {
                    parameterization: param,
                    loss_weighting: weighting,
                    status: "N/A".into(),
                    final_loss: None,
                    stochastic_energy: None,
                    ddim_energy: None,
                    note: msg,
                },
                Err(e) => return Err(e),
            };
            log::info!(
                "ablate {} x {}: {}",
                param.name(),
                weighting.name(),
                row.status
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

fn ablation_cell(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &Evaluator,
    streams: &Streams,
) -> Result<(Option<f64>, f64, f64)> {
    let out = train_original(&cfg.dataset, model_cfg, train_cfg, streams)?;
    let den = out.model.denoiser(cfg.eval.weights);
    let stoch = eval.energy(
        &den,
        SamplerKind::StochInterp {
            coef: cfg.eval.stochastic_coef,
        },
        cfg.eval.steps,
    )?;
    let ddim = eval.energy(&den, SamplerKind::Ddim, cfg.eval.steps)?;
    for v in [stoch, ddim] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("metric is {v}")));
        }
    }
    Ok((out.curve.last().map(|r| r.raw_loss), stoch, ddim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurveRow {
    pub curve: String,
    pub n_steps: usize,
    pub energy_distance: f64,
    /// Best coefficient for the stochastic curves.
    pub coef: Option<f64>,
}

pub const SWEEP_CURVES: [&str; 4] = [
    "distilled_ddim",
    "undistilled_ddim",
    "undistilled_stochastic",
    "distilled_stochastic",
];

/// Metric-vs-steps curves for a ladder given as `(steps, model)` rungs;
/// `base` is the undistilled model.
pub fn sweep(
    base: &Model,
    rungs: &[(usize, Model)],
    eval: &Evaluator,
) -> Result<Vec<SweepCurveRow>> {
    let which = eval.cfg.weights;
    let base_den = base.denoiser(which);
    let mut rows = Vec::with_capacity(4 * rungs.len());
    for curve in SWEEP_CURVES {
        for (n, model) in rungs {
            let den = model.denoiser(which);
            let (energy, coef) = match curve {
                "distilled_ddim" => (eval.energy(&den, SamplerKind::Ddim, *n)?, None),
                "undistilled_ddim" => (eval.energy(&base_den, SamplerKind::Ddim, *n)?, None),
                "undistilled_stochastic" => {
                    let (c, e) = eval.best_stochastic(&base_den, *n)?;
                    (e, Some(c))
                }
                _ => {
                    let (c, e) = eval.best_stochastic(&den, *n)?;
                    (e, Some(c))
                }
            };
            log::info!("sweep {curve} N={n}: {energy:.5}");
            rows.push(SweepCurveRow {
                curve: curve.into(),
                n_steps: *n,
                energy_distance: energy,
                coef,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastScheduleRow {
    pub schedule: String,
    pub budget: f64,
    pub step_divisor: usize,
    pub n_steps: usize,
    pub updates: u64,
    pub energy_distance: f64,
    pub agreement: Option<f64>,
    pub base_hash: String,
}

/// Update-budget fractions compared by [`fast_schedule`].
pub const BUDGETS: [(u64, u64); 4] = [(1, 1), (1, 2), (1, 5), (1, 10)];

/// Ladders at reduced update budgets and with divisor 2 and 4, all from the
/// same base model.
pub fn fast_schedule(base: &Model, cfg: &RunConfig) -> Result<Vec<FastScheduleRow>> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let eval = Evaluator::new(&cfg.dataset, &cfg.eval, &streams)?;
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    for divisor in [2usize, 4] {
        for (num, den) in BUDGETS {
            let dcfg = DistillConfig {
                step_divisor: divisor,
                updates_per_iteration: (cfg.distill.updates_per_iteration * num / den).max(1),
                updates_small: (cfg.distill.updates_small * num / den).max(1),
                ..cfg.distill.clone()
            };
            if dcfg.validate().is_err() {
                log::warn!(
                    "skipping divisor {divisor}: {} steps cannot be divided down",
                    dcfg.start_steps
                );
                continue;
            }
            let label = format!("div{divisor}_x{num}/{den}");
            let ladder = progressive_distill(base, &cfg.dataset, &dcfg, &eval, &streams)?;
            let budget = num as f64 / den as f64;
            finals.push((
                divisor,
                budget,
                ladder.rungs.last().map(|r| r.info.energy_distance),
            ));
            rows.extend(ladder_rows(&ladder, &label, budget));
        }
    }
    // Quartering runs half as many iterations, so divisor 4 at budget b
    // matches divisor 2 at b/2 in compute; it is expected to be no better.
    for &(d4, b4, e4) in finals.iter().filter(|f| f.0 == 4) {
        for &(_, b2, e2) in finals
            .iter()
            .filter(|f| f.0 == 2 && (f.1 - 0.5 * b4).abs() < 1e-12)
        {
            if let (Some(e4), Some(e2)) = (e4, e2) {
                if e4 < e2 {
                    log::warn!("divisor {d4} at budget {b4} beat divisor 2 at budget {b2} ({e4:.5} < {e2:.5})");
                }
            }
        }
    }
    Ok(rows)
}

fn ladder_rows(ladder: &DistillLadder, label: &str, budget: f64) -> Vec<FastScheduleRow> {
    ladder
        .rungs
        .iter()
        .map(|r| FastScheduleRow {
            schedule: label.to_string(),
            budget,
            step_divisor: ladder.step_divisor,
            n_steps: r.info.n_steps,
            updates: r.info.updates,
            energy_distance: r.info.energy_distance,
            agreement: r.info.agreement,
            base_hash: ladder.base_hash.clone(),
        })
        .collect()
}

//! Progressive distillation: train a student whose single DDIM step matches
//! several teacher DDIM steps, then repeat with the student as teacher.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::diffusion::LossWeighting;
use crate::error::{Error, Result};
use crate::metrics::{agreement, energy_distance};
use crate::net::{self, CheckpointMeta, Model, OptimizerSettings, Weights};
use crate::rng::{fill_standard_normal, Streams};
use crate::samplers::{ddim_update, sample_final, Denoiser, SamplerKind};
use crate::schedule::{alpha_sigma, SchedulePoint, StepGrid, TimePoint};
use crate::train::{divergence_context, update, Batch};

/// Smallest allowed `|alpha_t'' - (sigma_t'' / sigma_t) alpha_t|`.
pub const MIN_TARGET_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub start_steps: usize,
    pub end_steps: usize,
    pub updates_per_iteration: u64,
    /// Updates for students taking one or two steps.
    pub updates_small: u64,
    /// 2 halves the step count per iteration, 4 quarters it.
    pub step_divisor: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss_weighting: LossWeighting,
    /// Weights of the teacher used both for targets and to initialize the student.
    pub teacher_weights: Weights,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            start_steps: 64,
            end_steps: 1,
            updates_per_iteration: 2000,
            updates_small: 4000,
            step_divisor: 2,
            lr: 1e-4,
            batch_size: 256,
            ema_decay: 0.995,
            weight_decay: 0.001,
            clip_norm: 1.0,
            loss_weighting: LossWeighting::SnrPlusOne,
            teacher_weights: Weights::Ema,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.step_divisor, 2 | 4) {
            return Err(Error::Config(format!(
                "step_divisor must be 2 or 4, got {}",
                self.step_divisor
            )));
        }
        if self.end_steps == 0 || self.start_steps < self.end_steps {
            return Err(Error::Config(format!(
                "need start_steps >= end_steps >= 1, got {} and {}",
                self.start_steps, self.end_steps
            )));
        }
        let mut n = self.start_steps;
        while n > self.end_steps {
            if !n.is_multiple_of(self.step_divisor) {
                return Err(Error::Config(format!(
                    "{} steps cannot be divided by {} down to {}",
                    self.start_steps, self.step_divisor, self.end_steps
                )));
            }
            n /= self.step_divisor;
        }
        if n != self.end_steps {
            return Err(Error::Config(format!(
                "dividing {} by {} never reaches {}",
                self.start_steps, self.step_divisor, self.end_steps
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "distillation needs batch_size > 0 and lr > 0".into(),
            ));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            base_lr: self.lr,
            ema_decay: self.ema_decay,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..OptimizerSettings::default()
        }
    }

    pub fn updates_for(&self, student_steps: usize) -> u64 {
        if student_steps <= 2 {
            self.updates_small
        } else {
            self.updates_per_iteration
        }
    }

    /// Student step counts, in order.
    pub fn rungs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut n = self.start_steps;
        while n > self.end_steps {
            n /= self.step_divisor;
            out.push(n);
        }
        out
    }
}

fn grid_index(t: TimePoint, n: usize) -> Result<usize> {
    let x = t.get() * n as f64;
    let i = x.round();
    if (x - i).abs() > 1e-9 || i < 1.0 {
        return Err(Error::domain(format!(
            "t={} is not a grid point i/{n} with i >= 1",
            t.get()
        )));
    }
    Ok(i as usize)
}

fn time_ratio(num: usize, den: usize) -> TimePoint {
    TimePoint::new(num as f64 / den as f64).expect("ratio in [0, 1]")
}

/// Regression target for a student taking `n` steps: run `divisor` teacher
/// DDIM steps from `t` to `t - 1/n`, then solve one student DDIM step for the
/// `x` prediction that lands on the same point.
pub fn distill_target(
    teacher: &dyn Denoiser,
    z: ArrayView2<f64>,
    times: &[TimePoint],
    n: usize,
    divisor: usize,
) -> Result<Array2<f64>> {
    if z.nrows() != times.len() {
        return Err(Error::shape(format!("{} times", z.nrows()), times.len()));
    }
    if divisor < 2 {
        return Err(Error::domain(
            "teacher must take at least two steps per student step",
        ));
    }
    let idx: Vec<usize> = times
        .iter()
        .map(|&t| grid_index(t, n))
        .collect::<Result<_>>()?;
    let fine = n * divisor;
    let mut cur = z.to_owned();
    for k in 0..divisor {
        let points: Vec<SchedulePoint> = idx
            .iter()
            .map(|&i| alpha_sigma(time_ratio(i * divisor - k, fine)))
            .collect();
        let x_hat = teacher.predict_x(cur.view(), &points)?;
        for (r, &i) in idx.iter().enumerate() {
            let (t, s) = (
                time_ratio(i * divisor - k, fine),
                time_ratio(i * divisor - k - 1, fine),
            );
            let next = ddim_update(&cur.row(r).to_vec(), t, s, &x_hat.row(r).to_vec())?;
            cur.row_mut(r).assign(&ndarray::ArrayView1::from(&next));
        }
    }
    let mut target = Array2::zeros(z.dim());
    for (r, &i) in idx.iter().enumerate() {
        let pt = alpha_sigma(time_ratio(i, n));
        let ps = alpha_sigma(time_ratio(i - 1, n));
        let ratio = ps.sigma / pt.sigma;
        let den = ps.alpha - ratio * pt.alpha;
        if den.abs() < MIN_TARGET_DENOMINATOR {
            return Err(Error::DegenerateDenominator {
                context: "distillation target",
                value: den,
            });
        }
        for j in 0..z.ncols() {
            target[[r, j]] = (cur[[r, j]] - ratio * z[[r, j]]) / den;
        }
    }
    Ok(target)
}

/// Student training pairs on the grid `{i/n}`: the `x` drawn from data only
/// serves to build `z_t`; the target comes from the teacher.
pub fn distill_batch(
    teacher: &dyn Denoiser,
    dataset: &ToyDataset,
    n: usize,
    divisor: usize,
    streams: &Streams,
    index: u64,
    size: usize,
) -> Result<Batch> {
    let d = dataset.dim();
    let mut rng = streams.stream("distill", index);
    let x = dataset.sample(&mut rng, size);
    let mut eps = vec![0.0; size * d];
    fill_standard_normal(&mut rng, &mut eps);
    let mut z = Array2::zeros((size, d));
    let mut times = Vec::with_capacity(size);
    for i in 0..size {
        let t = time_ratio(rng.gen_range(1..=n), n);
        let p = alpha_sigma(t);
        for j in 0..d {
            z[[i, j]] = p.alpha * x[[i, j]] + p.sigma * eps[i * d + j];
        }
        times.push(t);
    }
    let target = distill_target(teacher, z.view(), &times, n, divisor)?;
    let points = times.into_iter().map(alpha_sigma).collect();
    Ok(Batch { z, points, target })
}

/// Train one student for `teacher_steps / divisor` sampling steps.
pub fn distill_iteration(
    teacher: &Model,
    teacher_steps: usize,
    dataset: &ToyDataset,
    cfg: &DistillConfig,
    streams: &Streams,
) -> Result<Model> {
    let div = cfg.step_divisor;
    if teacher_steps < 2 || !teacher_steps.is_multiple_of(div) {
        return Err(Error::domain(format!(
            "cannot distill {teacher_steps} teacher steps with divisor {div}"
        )));
    }
    let n = teacher_steps / div;
    let mut student = teacher.fork(cfg.teacher_weights, cfg.optimizer())?;
    let teacher_den = teacher.denoiser(cfg.teacher_weights);
    let updates = cfg.updates_for(n);
    let rung_streams = streams.derive("distill_rung", n as u64);
    for u in 0..updates {
        net::anneal_lr(&mut student.opt, u as f64 / updates as f64)?;
        let batch = distill_batch(
            &teacher_den,
            dataset,
            n,
            div,
            &rung_streams,
            u,
            cfg.batch_size,
        )?;
        update(&mut student, cfg.loss_weighting, &batch).map_err(|e| divergence_context(e, u))?;
    }
    Ok(student)
}

/// Evaluation settings shared by ladders, sweeps and the eval command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated and reference sample count for energy distance.
    pub count: usize,
    /// Seeds used for the teacher/student agreement metric.
    pub agreement_count: usize,
    pub weights: Weights,
    /// Step count for single-point evaluations (ablation, `eval` default).
    pub steps: usize,
    /// Noise coefficient of the stochastic sampler in the ablation grid.
    pub stochastic_coef: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            agreement_count: 2_000,
            weights: Weights::Ema,
            steps: 64,
            stochastic_coef: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.agreement_count == 0 || self.steps == 0 {
            return Err(Error::Config(
                "eval.count must be >= 2, eval.agreement_count and eval.steps >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.stochastic_coef) {
            return Err(Error::Config(format!(
                "eval.stochastic_coef {} outside [0, 1]",
                self.stochastic_coef
            )));
        }
        Ok(())
    }
}

/// Reference data and sampling noise for evaluation, both drawn from the
/// `eval` sub-streams so every model is scored on the same seeds.
pub struct Evaluator {
    pub reference: Array2<f64>,
    pub streams: Streams,
    pub cfg: EvalConfig,
}

impl Evaluator {
    pub fn new(dataset: &ToyDataset, cfg: &EvalConfig, root: &Streams) -> Result<Self> {
        cfg.validate()?;
        let streams = root.derive("eval", 0);
        let reference = dataset.sample(&mut streams.stream("reference", 0), cfg.count);
        Ok(Self {
            reference,
            streams,
            cfg: cfg.clone(),
        })
    }

    pub fn energy(&self, den: &dyn Denoiser, kind: SamplerKind, n_steps: usize) -> Result<f64> {
        let samples = sample_final(
            den,
            kind,
            &StepGrid::new(n_steps)?,
            &self.streams,
            self.cfg.count,
        )?;
        if samples
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGED_MAGNITUDE)
        {
            return Err(Error::Divergence(format!(
                "{kind} with {n_steps} steps produced non-finite or exploding samples"
            )));
        }
        energy_distance(samples.view(), self.reference.view())
    }

    /// Best stochastic energy over [`STOCHASTIC_GRID`]; returns `(coef, energy)`.
    /// Coefficients whose samples diverge are skipped.
    pub fn best_stochastic(&self, den: &dyn Denoiser, n_steps: usize) -> Result<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for coef in STOCHASTIC_GRID {
            match self.energy(den, SamplerKind::StochInterp { coef }, n_steps) {
                Ok(e) if best.is_none_or(|(_, b)| e < b) => best = Some((coef, e)),
                Ok(_) | Err(Error::Divergence(_)) => {}
                Err(e) => return Err(e),
            }
        }
        best.ok_or_else(|| {
            Error::Divergence(format!(
                "every stochastic coefficient diverged at {n_steps} steps"
            ))
        })
    }

    pub fn agreement(
        &self,
        teacher: &dyn Denoiser,
        teacher_steps: usize,
        student: &dyn Denoiser,
        student_steps: usize,
    ) -> Result<f64> {
        agreement(
            teacher,
            teacher_steps,
            student,
            student_steps,
            &self.streams,
            self.cfg.agreement_count,
        )
    }
}

/// Eleven noise coefficients `k / 10`. The sampler variance is
/// `lower^(1-c) * upper^c`, so these are log-uniformly spaced variances.
pub const STOCHASTIC_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Samples beyond this magnitude count as divergence.
pub const DIVERGED_MAGNITUDE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungInfo {
    pub n_steps: usize,
    pub checkpoint_hash: String,
    pub teacher_hash: Option<String>,
    pub updates: u64,
    /// DDIM energy distance at `n_steps`.
    pub energy_distance: f64,
    /// Mean L2 to the parent teacher's samples at `divisor * n_steps`.
    pub agreement: Option<f64>,
}

pub struct Rung {
    pub model: Model,
    pub info: RungInfo,
}

/// Base model followed by successively distilled students.
pub struct DistillLadder {
    pub base_hash: String,
    pub step_divisor: usize,
    pub rungs: Vec<Rung>,
}

/// Distill from `cfg.start_steps` down to `cfg.end_steps`, evaluating every rung.
pub fn progressive_distill(
    base: &Model,
    dataset: &ToyDataset,
    cfg: &DistillConfig,
    eval: &Evaluator,
    streams: &Streams,
) -> Result<DistillLadder> {
    cfg.validate()?;
    let which = eval.cfg.weights;
    let base_hash = base.hash();
    let mut rungs = vec![Rung {
        info: RungInfo {
            n_steps: cfg.start_steps,
            checkpoint_hash: base_hash.clone(),
            teacher_hash: None,
            updates: 0,
            energy_distance: eval.energy(
                &base.denoiser(which),
                SamplerKind::Ddim,
                cfg.start_steps,
            )?,
            agreement: None,
        },
        model: base.clone(),
    }];
    log::info!(
        "rung {}: energy {:.5}",
        cfg.start_steps,
        rungs[0].info.energy_distance
    );
    let mut teacher_steps = cfg.start_steps;
    for n in cfg.rungs() {
        let teacher = &rungs.last().expect("base rung").model;
        let student = distill_iteration(teacher, teacher_steps, dataset, cfg, streams)?;
        let info = RungInfo {
            n_steps: n,
            checkpoint_hash: student.hash(),
            teacher_hash: Some(teacher.hash()),
            updates: cfg.updates_for(n),
            energy_distance: eval.energy(&student.denoiser(which), SamplerKind::Ddim, n)?,
            agreement: Some(eval.agreement(
                &teacher.denoiser(which),
                teacher_steps,
                &student.denoiser(which),
                n,
            )?),
        };
        log::info!(
            "rung {n}: energy {:.5}, agreement {:.5}",
            info.energy_distance,
            info.agreement.unwrap_or(f64::NAN)
        );
        rungs.push(Rung {
            model: student,
            info,
        });
        teacher_steps = n;
    }
    Ok(DistillLadder {
        base_hash,
        step_divisor: cfg.step_divisor,
        rungs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_steps: usize,
    pub energy_distance: f64,
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderManifest {
    pub base_hash: String,
    pub step_divisor: usize,
    pub rungs: Vec<RungManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungManifest {
    pub file: String,
    #[serde(flatten)]
    pub info: RungInfo,
}

pub fn rung_file_name(n_steps: usize) -> String {
    format!("rung_{n_steps:05}.ckpt")
}

impl DistillLadder {
    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        self.rungs
            .iter()
            .map(|r| SweepRow {
                n_steps: r.info.n_steps,
                energy_distance: r.info.energy_distance,
                agreement: r.info.agreement,
            })
            .collect()
    }

    pub fn manifest(&self) -> LadderManifest {
        LadderManifest {
            base_hash: self.base_hash.clone(),
            step_divisor: self.step_divisor,
            rungs: self
                .rungs
                .iter()
                .map(|r| RungManifest {
                    file: rung_file_name(r.info.n_steps),
                    info: r.info.clone(),
                })
                .collect(),
        }
    }

    /// One checkpoint per rung, `ladder.json` and `sweep.csv`.
    pub fn save(&self, dir: &Path, seed: u64, dataset: &ToyDataset) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for r in &self.rungs {
            let meta = CheckpointMeta {
                kind: if r.info.teacher_hash.is_some() {
                    "distilled"
                } else {
                    "base"
                }
                .into(),
                parameterization: Some(r.model.parameterization),
                dataset: Some(serde_json::to_value(dataset)?),
                n_steps: Some(r.info.n_steps),
                teacher_hash: r.info.teacher_hash.clone(),
                base_hash: Some(self.base_hash.clone()),
                updates: r.info.updates,
                seed,
                ..Default::default()
            };
            r.model
                .save(&dir.join(rung_file_name(r.info.n_steps)), Some(&meta))?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest())?;
        json.push('\n');
        std::fs::write(dir.join("ladder.json"), json)?;
        std::fs::write(
            dir.join("sweep.csv"),
            crate::csv_string(&self.sweep_rows())?,
        )?;
        Ok(())
    }
}

/// Load `ladder.json` and the rung checkpoints it lists.
pub fn load_ladder(dir: &Path) -> Result<(LadderManifest, Vec<Model>)> {
    let path = dir.join("ladder.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: LadderManifest = serde_json::from_str(&text)?;
    let models = manifest
        .rungs
        .iter()
        .map(|r| Model::load(&dir.join(&r.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, models))
}

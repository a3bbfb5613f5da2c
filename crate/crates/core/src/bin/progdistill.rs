use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use progdistill::config::RunConfig;
use progdistill::data::ToyDataset;
use progdistill::diffusion::{weight_curve, weight_curve_csv};
use progdistill::distill::{load_ladder, progressive_distill, Evaluator};
use progdistill::experiments::{ablate, fast_schedule, sweep};
use progdistill::metrics::{evaluate, MetricRow};
use progdistill::net::{CheckpointMeta, Model, Weights};
use progdistill::rng::Streams;
use progdistill::samplers::{sample_final, SamplerKind};
use progdistill::schedule::StepGrid;
use progdistill::train::{loss_curve_csv, train_original};
use progdistill::{csv_string, Error, Result};

#[derive(Parser)]
#[command(
    name = "progdistill",
    version,
    about = "Diffusion samplers and progressive distillation on toy data"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.updates=5000`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let mut all = self.set.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV (default: `<out>.loss.csv`).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Train on the grid `t = i/N` instead of continuous time.
        #[arg(long, value_name = "N")]
        discrete_grid: Option<usize>,
    },
    /// Progressively distill a trained model.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ddim")]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ema")]
        weights: WeightsArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against fresh data; appends a row to `--out`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ddim")]
        sampler: SamplerKind,
        #[arg(long)]
        steps: Option<usize>,
        /// Dataset spec such as `ring8:2,0.05`; defaults to the config's.
        #[arg(long)]
        dataset: Option<ToyDataset>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric-vs-steps curves for a distillation ladder.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `distill`.
        #[arg(long)]
        ladder: PathBuf,
        /// Undistilled model (default: the ladder's first rung).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameterization x loss-weighting grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distillation at reduced update budgets and with step divisor 4.
    FastSchedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss weights as functions of log-SNR, with and without the schedule density.
    Weights {
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        lambda_min: f64,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        lambda_max: f64,
        #[arg(long, default_value_t = 201)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WeightsArg {
    Ema,
    Raw,
}

impl From<WeightsArg> for Weights {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Ema => Weights::Ema,
            WeightsArg::Raw => Weights::Raw,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dataset_of(path: &Path, fallback: &ToyDataset) -> Result<ToyDataset> {
    match Model::load_meta(path)?.and_then(|m| m.dataset) {
        Some(v) => Ok(serde_json::from_value(v)?),
        None => Ok(fallback.clone()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            cfg,
            out,
            curve,
            discrete_grid,
        } => {
            let extra: Vec<String> = discrete_grid
                .map(|n| format!("train.discrete_grid={n}"))
                .into_iter()
                .collect();
            let cfg = cfg.load(&extra)?;
            let result = train_original(
                &cfg.dataset,
                &cfg.model,
                &cfg.train,
                &Streams::new(cfg.seed),
            )?;
            let meta = CheckpointMeta {
                kind: "base".into(),
                parameterization: Some(cfg.model.parameterization),
                loss_weighting: Some(cfg.train.loss_weighting),
                dataset: Some(serde_json::to_value(&cfg.dataset)?),
                updates: cfg.train.updates,
                seed: cfg.seed,
                final_loss: result.curve.last().map(|r| r.raw_loss),
                extra: Some(serde_json::to_value(&cfg)?),
                ..Default::default()
            };
            result.model.save(&out, Some(&meta))?;
            write(
                &curve.unwrap_or_else(|| with_suffix(&out, ".loss.csv")),
                &loss_curve_csv(&result.curve)?,
            )?;
        }
        Cmd::Distill {
            cfg,
            teacher,
            out_dir,
        } => {
            let cfg = cfg.load(&[])?;
            let base = Model::load(&teacher)?;
            let dataset = dataset_of(&teacher, &cfg.dataset)?;
            let streams = Streams::new(cfg.seed);
            let eval = Evaluator::new(&dataset, &cfg.eval, &streams)?;
            let ladder = progressive_distill(&base, &dataset, &cfg.distill, &eval, &streams)?;
            ladder.save(&out_dir, cfg.seed, &dataset)?;
        }
        Cmd::Sample {
            checkpoint,
            sampler,
            steps,
            count,
            seed,
            weights,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let x = sample_final(
                &model.denoiser(weights.into()),
                sampler,
                &StepGrid::new(steps)?,
                &Streams::new(seed),
                count,
            )?;
            let mut text = String::from("sample_index");
            for j in 0..x.ncols() {
                text.push_str(&format!(",dim_{j}"));
            }
            text.push('\n');
            for (i, row) in x.rows().into_iter().enumerate() {
                text.push_str(&i.to_string());
                for v in row {
                    text.push_str(&format!(",{v}"));
                }
                text.push('\n');
            }
            write(&out, &text)?;
        }
        Cmd::Eval {
            cfg,
            checkpoint,
            sampler,
            steps,
            dataset,
            out,
        } => {
            let cfg = cfg.load(&[])?;
            let model = Model::load(&checkpoint)?;
            let dataset = match dataset {
                Some(d) => d,
                None => dataset_of(&checkpoint, &cfg.dataset)?,
            };
            if dataset.dim() != model.dim() {
                return Err(Error::Config(format!(
                    "dataset has d={}, model has d={}",
                    dataset.dim(),
                    model.dim()
                )));
            }
            let eval = Evaluator::new(&dataset, &cfg.eval, &Streams::new(cfg.seed))?;
            let steps = steps.unwrap_or(cfg.eval.steps);
            let (row, _) = evaluate(
                &model.denoiser(cfg.eval.weights),
                sampler,
                steps,
                eval.reference.view(),
                &eval.streams,
            )?;
            append_rows(&out, &[row])?;
        }
        Cmd::Sweep {
            cfg,
            ladder,
            base,
            out,
        } => {
            let cfg = cfg.load(&[])?;
            let (manifest, models) = load_ladder(&ladder)?;
            let first = models
                .first()
                .ok_or_else(|| Error::Config("ladder has no rungs".into()))?;
            let base_model = match base {
                Some(p) => Model::load(&p)?,
                None => first.clone(),
            };
            if base_model.hash() != manifest.base_hash {
                log::warn!("base checkpoint differs from the ladder's recorded base");
            }
            let dataset = dataset_of(&ladder.join(&manifest.rungs[0].file), &cfg.dataset)?;
            let eval = Evaluator::new(&dataset, &cfg.eval, &Streams::new(cfg.seed))?;
            let rungs: Vec<(usize, Model)> = manifest
                .rungs
                .iter()
                .map(|r| r.info.n_steps)
                .zip(models)
                .collect();
            write(&out, &csv_string(&sweep(&base_model, &rungs, &eval)?)?)?;
        }
        Cmd::Ablate { cfg, out } => {
            let cfg = cfg.load(&[])?;
            write(&out, &csv_string(&ablate(&cfg)?)?)?;
        }
        Cmd::FastSchedule { cfg, base, out } => {
            let mut cfg = cfg.load(&[])?;
            cfg.dataset = dataset_of(&base, &cfg.dataset)?;
            let model = Model::load(&base)?;
            write(&out, &csv_string(&fast_schedule(&model, &cfg)?)?)?;
        }
        Cmd::Weights {
            lambda_min,
            lambda_max,
            points,
            out,
        } => {
            if points < 2 || !(lambda_max > lambda_min) {
                return Err(Error::Config(
                    "need points >= 2 and lambda_max > lambda_min".into(),
                ));
            }
            let step = (lambda_max - lambda_min) / (points - 1) as f64;
            let rows = weight_curve((0..points).map(|i| lambda_min + step * i as f64));
            write(&out, &weight_curve_csv(&rows))?;
        }
        Cmd::Config { cfg } => {
            let cfg = cfg.load(&[])?;
            std::io::stdout().write_all(cfg.to_json().as_bytes())?;
        }
    }
    Ok(())
}

fn append_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let text = csv_string(rows)?;
    if path.exists() && fs::metadata(path)?.len() > 0 {
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::OpenOptions::new()
            .append(true)
            .open(path)?
            .write_all(body.as_bytes())?;
        Ok(())
    } else {
        write(path, &text)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}

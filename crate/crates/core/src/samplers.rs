//! Deterministic and stochastic samplers.
//!
//! The single-step functions are pure: they take the current latent, the
//! denoiser output and (for the stochastic kinds) pre-drawn unit noise. The
//! [`sample_final`] / [`sample_trajectory`] drivers run a whole grid against a
//! [`Denoiser`], one independent random stream per sample index.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::diffusion::GaussianOracle;
use crate::error::{Error, Result};
use crate::net::LOG_SNR_CLAMP;
use crate::rng::{fill_standard_normal, StreamRng, Streams};
use crate::schedule::{alpha_sigma, log_snr_to_alpha_sigma, SchedulePoint, StepGrid, TimePoint};

/// Anything that produces `x_hat(z_t)`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// False when `x_hat` cannot be formed at alpha = 0 (eps-prediction).
    fn defined_at_zero_snr(&self) -> bool {
        true
    }

    /// One schedule point per row of `z`.
    fn predict_x(&self, z: ArrayView2<f64>, points: &[SchedulePoint]) -> Result<Array2<f64>>;
}

impl Denoiser for GaussianOracle {
    fn dim(&self) -> usize {
        GaussianOracle::dim(self)
    }

    fn predict_x(&self, z: ArrayView2<f64>, points: &[SchedulePoint]) -> Result<Array2<f64>> {
        check_rows(z, points)?;
        let mut out = Array2::zeros(z.dim());
        for (i, p) in points.iter().enumerate() {
            let row = self.x_hat(z.row(i).as_slice().unwrap_or(&z.row(i).to_vec()), p);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(out)
    }
}

/// Row-wise closure denoiser, mostly for tests and oracles.
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], &SchedulePoint) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], &SchedulePoint) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_x(&self, z: ArrayView2<f64>, points: &[SchedulePoint]) -> Result<Array2<f64>> {
        check_rows(z, points)?;
        let mut out = Array2::zeros(z.dim());
        for (i, p) in points.iter().enumerate() {
            let row = (self.f)(&z.row(i).to_vec(), p);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(out)
    }
}

fn check_rows(z: ArrayView2<f64>, points: &[SchedulePoint]) -> Result<()> {
    if z.nrows() != points.len() {
        return Err(Error::shape(
            format!("{} schedule points", z.nrows()),
            points.len(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    /// `z_s = alpha_s x_hat + sigma_s (z_t - alpha_t x_hat) / sigma_t`
    Ddim,
    /// The same update written with `exp((lambda_t - lambda_s) / 2)`.
    DdimLogSnr,
    /// Rotation in the `(z, v_hat)` plane by the angle decrement.
    DdimAngular,
    /// Ancestral sampling with variance `post^(1-gamma) * trans^gamma`.
    Ancestral {
        gamma: f64,
    },
    /// Log-scale interpolation between the two variance bounds.
    StochInterp {
        coef: f64,
    },
    Euler,
    Rk4,
}

impl SamplerKind {
    pub fn is_deterministic(self) -> bool {
        !matches!(
            self,
            SamplerKind::Ancestral { .. } | SamplerKind::StochInterp { .. }
        )
    }

    pub fn validate(self) -> Result<()> {
        match self {
            SamplerKind::Ancestral { gamma: c } | SamplerKind::StochInterp { coef: c }
                if !(0.0..=1.0).contains(&c) =>
            {
                Err(Error::domain(format!(
                    "noise coefficient {c} outside [0, 1]"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerKind::Ddim => write!(f, "ddim"),
            SamplerKind::DdimLogSnr => write!(f, "ddim_logsnr"),
            SamplerKind::DdimAngular => write!(f, "ddim_angular"),
            SamplerKind::Ancestral { gamma } => write!(f, "ancestral:{gamma}"),
            SamplerKind::StochInterp { coef } => write!(f, "stoch_interp:{coef}"),
            SamplerKind::Euler => write!(f, "euler"),
            SamplerKind::Rk4 => write!(f, "rk4"),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    /// `ddim`, `ddim_logsnr`, `ddim_angular`, `euler`, `rk4`,
    /// `ancestral:<gamma>`, `stoch_interp:<coef>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let coef = || -> Result<f64> {
            arg.ok_or_else(|| {
                Error::Config(format!(
                    "sampler `{name}` needs a coefficient, e.g. `{name}:0.5`"
                ))
            })?
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad sampler coefficient in `{s}`: {e}")))
        };
        let kind = match name {
            "ddim" => SamplerKind::Ddim,
            "ddim_logsnr" => SamplerKind::DdimLogSnr,
            "ddim_angular" => SamplerKind::DdimAngular,
            "euler" => SamplerKind::Euler,
            "rk4" => SamplerKind::Rk4,
            "ancestral" => SamplerKind::Ancestral { gamma: coef()? },
            "stoch_interp" => SamplerKind::StochInterp { coef: coef()? },
            _ => return Err(Error::Config(format!("unknown sampler `{s}`"))),
        };
        if kind.is_deterministic() && arg.is_some() {
            return Err(Error::Config(format!(
                "sampler `{name}` takes no coefficient"
            )));
        }
        kind.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(kind)
    }
}

impl serde::Serialize for SamplerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for SamplerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `(c_z, c_x)` with `z_s = c_z z_t + c_x x_hat` for the DDIM update.
pub fn ddim_coefficients(t: TimePoint, s: TimePoint) -> Result<(f64, f64)> {
    if s >= t {
        return Err(Error::domain(format!(
            "DDIM step needs s < t, got s={} t={}",
            s.get(),
            t.get()
        )));
    }
    let (pt, ps) = (alpha_sigma(t), alpha_sigma(s));
    if pt.sigma == 0.0 {
        return Err(Error::domain("DDIM step from sigma_t = 0"));
    }
    let r = ps.sigma / pt.sigma;
    Ok((r, ps.alpha - r * pt.alpha))
}

/// Log-SNR form of the DDIM coefficients. Needs finite `lambda_t`; the
/// target may be the clean endpoint, where the exponential vanishes.
pub fn ddim_logsnr_coefficients(t: TimePoint, s: TimePoint) -> Result<(f64, f64)> {
    if s >= t {
        return Err(Error::domain(format!(
            "DDIM step needs s < t, got s={} t={}",
            s.get(),
            t.get()
        )));
    }
    let (pt, ps) = (alpha_sigma(t), alpha_sigma(s));
    let lt = pt
        .log_snr
        .finite()
        .ok_or_else(|| Error::domain("log-SNR DDIM form needs 0 < alpha_t, sigma_t"))?;
    let e = match ps.log_snr.finite() {
        Some(ls) => (0.5 * (lt - ls)).exp(),
        None => 0.0,
    };
    Ok((e * ps.alpha / pt.alpha, (1.0 - e) * ps.alpha))
}

fn combine(z: &[f64], other: &[f64], cz: f64, co: f64) -> Result<Vec<f64>> {
    if z.len() != other.len() {
        return Err(Error::shape(
            format!("length {}", z.len()),
            format!("length {}", other.len()),
        ));
    }
    Ok(z.iter()
        .zip(other)
        .map(|(&a, &b)| cz * a + co * b)
        .collect())
}

pub fn ddim_step(z: &[f64], t: TimePoint, s: TimePoint, x_hat: &[f64]) -> Result<Vec<f64>> {
    let (cz, cx) = ddim_coefficients(t, s)?;
    combine(z, x_hat, cz, cx)
}

pub fn ddim_step_logsnr(z: &[f64], t: TimePoint, s: TimePoint, x_hat: &[f64]) -> Result<Vec<f64>> {
    let (cz, cx) = ddim_logsnr_coefficients(t, s)?;
    combine(z, x_hat, cz, cx)
}

/// `z_{phi_t - delta} = cos(delta) z - sin(delta) v_hat`.
pub fn ddim_step_angular(z: &[f64], phi_t: f64, delta: f64, v_hat: &[f64]) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta <= phi_t * (1.0 + 1e-15)) {
        return Err(Error::domain(format!(
            "angle decrement {delta} outside (0, {phi_t}]"
        )));
    }
    let (sd, cd) = delta.sin_cos();
    combine(z, v_hat, cd, -sd)
}

/// DDIM step under the endpoint policy: the angular form when leaving
/// t = 1, the `x_hat` form otherwise.
pub fn ddim_update(z: &[f64], t: TimePoint, s: TimePoint, x_hat: &[f64]) -> Result<Vec<f64>> {
    if t == TimePoint::ONE {
        let pt = alpha_sigma(t);
        let v = v_from_x(z, x_hat, &pt)?;
        ddim_step_angular(z, pt.phi, pt.phi - alpha_sigma(s).phi, &v)
    } else {
        ddim_step(z, t, s, x_hat)
    }
}

/// `v_hat = (cos(phi) z - x_hat) / sin(phi)`, the velocity implied by `x_hat`.
pub fn v_from_x(z: &[f64], x_hat: &[f64], p: &SchedulePoint) -> Result<Vec<f64>> {
    if p.sigma == 0.0 {
        return Err(Error::domain("velocity from x_hat needs sigma > 0"));
    }
    let s = p.sigma;
    combine(z, x_hat, p.alpha / s, -1.0 / s)
}

/// Noise standard deviation of the ancestral step:
/// `sqrt(post_var^(1 - gamma) * trans_var^gamma)`.
pub fn ancestral_std(t: TimePoint, s: TimePoint, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let trans = crate::diffusion::transition_variance(s, t)?;
    let (pt, ps) = (alpha_sigma(t), alpha_sigma(s));
    let post = if pt.alpha == 0.0 {
        ps.sigma * ps.sigma
    } else {
        let r = (pt.alpha * pt.alpha * ps.sigma * ps.sigma)
            / (pt.sigma * pt.sigma * ps.alpha * ps.alpha);
        (1.0 - r) * ps.sigma * ps.sigma
    };
    Ok((post.powf(1.0 - gamma) * trans.powf(gamma)).sqrt())
}

/// Ancestral step: posterior mean at `x_hat` plus scaled unit `noise`.
pub fn ancestral_step(
    z: &[f64],
    t: TimePoint,
    s: TimePoint,
    x_hat: &[f64],
    gamma: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let latent = crate::diffusion::Latent { z: z.to_vec(), t };
    if s >= t {
        return Err(Error::domain(format!(
            "ancestral step needs s < t, got s={} t={}",
            s.get(),
            t.get()
        )));
    }
    let mean = crate::diffusion::posterior(&latent, x_hat, s)?.mean;
    let std = ancestral_std(t, s, gamma)?;
    combine(&mean, noise, 1.0, std)
}

/// Stochastic step with log-scale interpolation `coef` between the
/// posterior (lower) and transition (upper) variances.
pub fn stoch_interp_step(
    z: &[f64],
    t: TimePoint,
    s: TimePoint,
    x_hat: &[f64],
    coef: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    ancestral_step(z, t, s, x_hat, coef, noise)
}

/// Probability-flow ODE in log-SNR: `dz/dlambda = (alpha x_hat - alpha^2 z) / 2`.
pub fn prob_flow_rhs(z: &[f64], lambda: f64, x_hat: &[f64]) -> Result<Vec<f64>> {
    if !lambda.is_finite() {
        return Err(Error::domain(
            "probability-flow right-hand side needs finite log-SNR",
        ));
    }
    let a = log_snr_to_alpha_sigma(lambda)?.alpha;
    combine(x_hat, z, 0.5 * a, -0.5 * a * a)
}

fn rhs_batch(z: ArrayView2<f64>, x_hat: ArrayView2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = x_hat.to_owned() * (0.5 * alpha);
    out.scaled_add(-0.5 * alpha * alpha, &z);
    out
}

/// `x_hat` at a batch of latents sharing one log-SNR.
pub trait XHatFn {
    fn x_hat(&mut self, z: ArrayView2<f64>, p: &SchedulePoint) -> Result<Array2<f64>>;
}

impl<F> XHatFn for F
where
    F: FnMut(ArrayView2<f64>, &SchedulePoint) -> Result<Array2<f64>>,
{
    fn x_hat(&mut self, z: ArrayView2<f64>, p: &SchedulePoint) -> Result<Array2<f64>> {
        self(z, p)
    }
}

fn check_lambdas(lt: f64, ls: f64) -> Result<()> {
    if !lt.is_finite() || !ls.is_finite() {
        return Err(Error::domain(format!(
            "integrator needs finite log-SNR, got {lt} -> {ls}"
        )));
    }
    Ok(())
}

fn rhs_at(f: &mut impl XHatFn, z: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let p = log_snr_to_alpha_sigma(lambda)?;
    let xh = f.x_hat(z, &p)?;
    Ok(rhs_batch(z, xh.view(), p.alpha))
}

/// Explicit Euler over `lambda_t -> lambda_s`.
pub fn euler_step(
    z: ArrayView2<f64>,
    lambda_t: f64,
    lambda_s: f64,
    mut f: impl XHatFn,
) -> Result<Array2<f64>> {
    check_lambdas(lambda_t, lambda_s)?;
    let h = lambda_s - lambda_t;
    if h == 0.0 {
        return Ok(z.to_owned());
    }
    let k1 = rhs_at(&mut f, z, lambda_t)?;
    let mut out = z.to_owned();
    out.scaled_add(h, &k1);
    Ok(out)
}

/// Classic fourth-order Runge-Kutta over `lambda_t -> lambda_s`.
pub fn rk4_step(
    z: ArrayView2<f64>,
    lambda_t: f64,
    lambda_s: f64,
    mut f: impl XHatFn,
) -> Result<Array2<f64>> {
    check_lambdas(lambda_t, lambda_s)?;
    let h = lambda_s - lambda_t;
    if h == 0.0 {
        return Ok(z.to_owned());
    }
    let k1 = rhs_at(&mut f, z, lambda_t)?;
    let mut y = z.to_owned();
    y.scaled_add(0.5 * h, &k1);
    let k2 = rhs_at(&mut f, y.view(), lambda_t + 0.5 * h)?;
    let mut y = z.to_owned();
    y.scaled_add(0.5 * h, &k2);
    let k3 = rhs_at(&mut f, y.view(), lambda_t + 0.5 * h)?;
    let mut y = z.to_owned();
    y.scaled_add(h, &k3);
    let k4 = rhs_at(&mut f, y.view(), lambda_s)?;
    let mut out = z.to_owned();
    out.scaled_add(h / 6.0, &k1);
    out.scaled_add(h / 3.0, &k2);
    out.scaled_add(h / 3.0, &k3);
    out.scaled_add(h / 6.0, &k4);
    Ok(out)
}

/// Sampled path from t = 1 to t = 0; the first entry is the seed noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<(TimePoint, Vec<f64>)>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        &self.points.last().expect("non-empty trajectory").1
    }
}

/// Rows per network batch inside the sampler. Fixed so results do not
/// depend on how work is split across threads.
const CHUNK: usize = 256;

/// Stream family for per-sample noise.
pub const SAMPLE_STREAM: &str = "sample";

/// Time used in place of t = 1 when the first prediction cannot be made at
/// zero SNR, and as the start of log-SNR integration.
pub fn zero_snr_substitute(n_steps: usize) -> TimePoint {
    TimePoint::new(1.0 - 0.5 / n_steps as f64).expect("in range")
}

/// Draw `count` final samples. Sample `i` uses `streams.stream("sample", i)`
/// for its initial noise and all subsequent step noise.
pub fn sample_final(
    den: &dyn Denoiser,
    kind: SamplerKind,
    grid: &StepGrid,
    streams: &Streams,
    count: usize,
) -> Result<Array2<f64>> {
    kind.validate()?;
    let d = den.dim();
    let chunks: Vec<(usize, usize)> = (0..count)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(count)))
        .collect();
    let parts: Vec<Result<Array2<f64>>> = chunks
        .par_iter()
        .map(|&(start, end)| run_chunk(den, kind, grid, streams, start..end, None))
        .collect();
    let mut out = Array2::zeros((count, d));
    for (&(start, end), part) in chunks.iter().zip(parts) {
        out.slice_mut(ndarray::s![start..end, ..]).assign(&part?);
    }
    Ok(out)
}

/// Full path for one sample index.
pub fn sample_trajectory(
    den: &dyn Denoiser,
    kind: SamplerKind,
    grid: &StepGrid,
    streams: &Streams,
    index: usize,
) -> Result<Trajectory> {
    kind.validate()?;
    let mut points = Vec::with_capacity(grid.n_steps() + 1);
    run_chunk(
        den,
        kind,
        grid,
        streams,
        index..index + 1,
        Some(&mut points),
    )?;
    Ok(Trajectory { points })
}

/// Initial noise `z_1` of sample `index`.
pub fn seed_noise(streams: &Streams, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = streams.stream(SAMPLE_STREAM, index as u64);
    let mut z = vec![0.0; dim];
    fill_standard_normal(&mut rng, &mut z);
    z
}

fn run_chunk(
    den: &dyn Denoiser,
    kind: SamplerKind,
    grid: &StepGrid,
    streams: &Streams,
    rows: std::ops::Range<usize>,
    mut record: Option<&mut Vec<(TimePoint, Vec<f64>)>>,
) -> Result<Array2<f64>> {
    let d = den.dim();
    let n = rows.len();
    let mut rngs: Vec<StreamRng> = rows
        .clone()
        .map(|i| streams.stream(SAMPLE_STREAM, i as u64))
        .collect();
    let mut z = Array2::zeros((n, d));
    for (mut row, rng) in z.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
        fill_standard_normal(rng, row.as_slice_mut().expect("row-major"));
    }
    if let Some(rec) = record.as_deref_mut() {
        rec.push((TimePoint::ONE, z.row(0).to_vec()));
    }

    let predict = |z: ArrayView2<f64>, p: &SchedulePoint| -> Result<Array2<f64>> {
        den.predict_x(z, &vec![*p; z.nrows()])
    };

    match kind {
        SamplerKind::Euler | SamplerKind::Rk4 => {
            let lambdas = integration_log_snrs(grid);
            for (k, w) in lambdas.windows(2).enumerate() {
                z = match kind {
                    SamplerKind::Euler => euler_step(z.view(), w[0], w[1], predict)?,
                    _ => rk4_step(z.view(), w[0], w[1], predict)?,
                };
                if let Some(rec) = record.as_deref_mut() {
                    rec.push((grid.times()[k + 1], z.row(0).to_vec()));
                }
            }
        }
        _ => {
            let mut noise = vec![0.0; d];
            for (t, s) in grid.steps() {
                let from = if t == TimePoint::ONE && !den.defined_at_zero_snr() {
                    zero_snr_substitute(grid.n_steps())
                } else {
                    t
                };
                let pt = alpha_sigma(from);
                let x_hat = predict(z.view(), &pt)?;
                let mut next = Array2::zeros((n, d));
                for i in 0..n {
                    let zi = z.row(i).to_vec();
                    let xi = x_hat.row(i).to_vec();
                    let out = match kind {
                        SamplerKind::Ancestral { gamma: c }
                        | SamplerKind::StochInterp { coef: c } => {
                            fill_standard_normal(&mut rngs[i], &mut noise);
                            if from == TimePoint::ONE {
                                zero_snr_ancestral_step(&xi, s, c, &noise)
                            } else {
                                ancestral_step(&zi, from, s, &xi, c, &noise)?
                            }
                        }
                        _ if from == TimePoint::ONE => ddim_update(&zi, from, s, &xi)?,
                        SamplerKind::Ddim => ddim_step(&zi, from, s, &xi)?,
                        SamplerKind::DdimLogSnr => ddim_step_logsnr(&zi, from, s, &xi)?,
                        SamplerKind::DdimAngular => {
                            let v = v_from_x(&zi, &xi, &pt)?;
                            ddim_step_angular(&zi, pt.phi, pt.phi - alpha_sigma(s).phi, &v)?
                        }
                        SamplerKind::Euler | SamplerKind::Rk4 => unreachable!(),
                    };
                    next.row_mut(i).assign(&ndarray::ArrayView1::from(&out));
                }
                z = next;
                if let Some(rec) = record.as_deref_mut() {
                    rec.push((s, z.row(0).to_vec()));
                }
            }
        }
    }
    Ok(z)
}

/// Limit of the ancestral step as alpha_t -> 0: mean `alpha_s x_hat`, the
/// posterior variance tends to `sigma_s^2` and the transition variance to 1.
fn zero_snr_ancestral_step(x_hat: &[f64], s: TimePoint, coef: f64, noise: &[f64]) -> Vec<f64> {
    let ps = alpha_sigma(s);
    let std = (ps.sigma * ps.sigma).powf(1.0 - coef).sqrt();
    x_hat
        .iter()
        .zip(noise)
        .map(|(&x, &e)| ps.alpha * x + std * e)
        .collect()
}

/// Log-SNR knots for Euler/RK4: the grid mapped to lambda, with t = 1
/// replaced by `1 - 1/(2N)` and t = 0 by the conditioning clamp.
pub fn integration_log_snrs(grid: &StepGrid) -> Vec<f64> {
    let n = grid.n_steps();
    grid.times()
        .iter()
        .map(|&t| {
            let t = if t == TimePoint::ONE {
                zero_snr_substitute(n)
            } else {
                t
            };
            alpha_sigma(t).log_snr.clamped(LOG_SNR_CLAMP)
        })
        .collect()
}

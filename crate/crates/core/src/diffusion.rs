//! Forward process, reverse-time posterior, output parameterizations and
//! reconstruction loss weightings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{alpha_sigma, log_snr_density, LogSnr, SchedulePoint, TimePoint};

/// A noisy latent `z_t` together with its time.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z: Vec<f64>,
    pub t: TimePoint,
}

/// `z_t = alpha_t x + sigma_t eps`.
pub fn forward_sample(x: &[f64], t: TimePoint, eps: &[f64]) -> Result<Latent> {
    check_len(x.len(), eps.len())?;
    let p = alpha_sigma(t);
    let z = x
        .iter()
        .zip(eps)
        .map(|(&xi, &ei)| p.alpha * xi + p.sigma * ei)
        .collect();
    Ok(Latent { z, t })
}

/// `exp(lambda_t - lambda_s)` for `s <= t`, computed from alpha/sigma so the
/// `s = 0` endpoint gives exactly 0.
fn snr_ratio(ps: &SchedulePoint, pt: &SchedulePoint) -> Result<f64> {
    if pt.alpha == 0.0 {
        return Err(Error::ZeroSnr("snr ratio with alpha_t = 0"));
    }
    if ps.t == pt.t {
        return Ok(1.0);
    }
    Ok((pt.alpha * pt.alpha * ps.sigma * ps.sigma) / (pt.sigma * pt.sigma * ps.alpha * ps.alpha))
}

/// Variance of `q(z_t | z_s)`: `(1 - e^{lambda_t - lambda_s}) sigma_t^2`.
pub fn transition_variance(s: TimePoint, t: TimePoint) -> Result<f64> {
    if s >= t {
        return Err(Error::domain(format!(
            "transition needs s < t, got s={} t={}",
            s.get(),
            t.get()
        )));
    }
    let (ps, pt) = (alpha_sigma(s), alpha_sigma(t));
    if pt.alpha == 0.0 {
        // e^{lambda_t - lambda_s} -> 0 at lambda_t = -inf
        return Ok(pt.sigma * pt.sigma);
    }
    let r = snr_ratio(&ps, &pt)?;
    Ok((1.0 - r) * pt.sigma * pt.sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// `q(z_s | z_t, x)` for `s <= t`.
pub fn posterior(z: &Latent, x: &[f64], s: TimePoint) -> Result<PosteriorParams> {
    check_len(z.z.len(), x.len())?;
    if s > z.t {
        return Err(Error::domain(format!(
            "posterior needs s <= t, got s={} t={}",
            s.get(),
            z.t.get()
        )));
    }
    let (ps, pt) = (alpha_sigma(s), alpha_sigma(z.t));
    if pt.alpha == 0.0 {
        return Err(Error::ZeroSnr("posterior divides by alpha_t"));
    }
    if s == z.t {
        return Ok(PosteriorParams {
            mean: z.z.clone(),
            variance: 0.0,
        });
    }
    let r = snr_ratio(&ps, &pt)?;
    let (cz, cx) = (r * ps.alpha / pt.alpha, (1.0 - r) * ps.alpha);
    Ok(PosteriorParams {
        mean: z
            .z
            .iter()
            .zip(x)
            .map(|(&zi, &xi)| cz * zi + cx * xi)
            .collect(),
        variance: (1.0 - r) * ps.sigma * ps.sigma,
    })
}

/// What the network output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    X,
    Eps,
    XEpsCombined,
    V,
}

impl Parameterization {
    pub const ALL: [Parameterization; 4] = [
        Parameterization::X,
        Parameterization::Eps,
        Parameterization::XEpsCombined,
        Parameterization::V,
    ];

    /// Raw output channels per data dimension.
    pub fn channels(self) -> usize {
        match self {
            Parameterization::XEpsCombined => 2,
            _ => 1,
        }
    }

    /// Whether `x_hat` can be formed at alpha = 0.
    pub fn defined_at_zero_snr(self) -> bool {
        !matches!(self, Parameterization::Eps)
    }

    pub fn name(self) -> &'static str {
        match self {
            Parameterization::X => "x",
            Parameterization::Eps => "eps",
            Parameterization::XEpsCombined => "x_eps_combined",
            Parameterization::V => "v",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Parameterization::X => 0,
            Parameterization::Eps => 1,
            Parameterization::XEpsCombined => 2,
            Parameterization::V => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.tag() == tag)
    }

    /// Coefficients of the affine map from raw output to `x_hat` at `point`.
    pub fn x_hat_map(self, point: &SchedulePoint) -> Result<XHatMap> {
        let (a, s) = (point.alpha, point.sigma);
        Ok(match self {
            Parameterization::X => XHatMap {
                z_coef: 0.0,
                raw_coefs: [1.0, 0.0],
            },
            Parameterization::Eps => {
                if a == 0.0 {
                    return Err(Error::ZeroSnr(
                        "eps-prediction carries no information about x at alpha = 0",
                    ));
                }
                XHatMap {
                    z_coef: 1.0 / a,
                    raw_coefs: [-s / a, 0.0],
                }
            }
            Parameterization::XEpsCombined => XHatMap {
                z_coef: a,
                raw_coefs: [s * s, -a * s],
            },
            Parameterization::V => XHatMap {
                z_coef: a,
                raw_coefs: [-s, 0.0],
            },
        })
    }
}

impl std::str::FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameterization `{s}`")))
    }
}

/// `x_hat[j] = z_coef * z[j] + sum_c raw_coefs[c] * raw[c * d + j]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XHatMap {
    pub z_coef: f64,
    pub raw_coefs: [f64; 2],
}

impl XHatMap {
    pub fn apply(&self, z: &[f64], raw: &[f64]) -> Vec<f64> {
        let d = z.len();
        let channels = raw.len() / d;
        (0..d)
            .map(|j| {
                let mut x = self.z_coef * z[j];
                for c in 0..channels {
                    x += self.raw_coefs[c] * raw[c * d + j];
                }
                x
            })
            .collect()
    }
}

/// Mutually consistent x / eps / v predictions at one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

/// Interpret raw network output under `param`.
///
/// At `sigma = 0` the X parameterization says nothing about the noise; the
/// eps and v fields are then reported as zero.
pub fn to_prediction(raw: &[f64], z: &Latent, param: Parameterization) -> Result<Prediction> {
    let d = z.z.len();
    check_len(d * param.channels(), raw.len())?;
    let p = alpha_sigma(z.t);
    let (a, s) = (p.alpha, p.sigma);
    let x_hat = param.x_hat_map(&p)?.apply(&z.z, raw);
    let eps_hat: Vec<f64> = match param {
        Parameterization::Eps => raw.to_vec(),
        // eps = sin(phi) z + cos(phi) v
        Parameterization::V => (0..d).map(|j| s * z.z[j] + a * raw[j]).collect(),
        // closed form of (z - a x_hat) / s that stays defined at s = 0
        Parameterization::XEpsCombined => (0..d)
            .map(|j| s * (z.z[j] - a * raw[j]) + a * a * raw[d + j])
            .collect(),
        Parameterization::X => {
            if s == 0.0 {
                vec![0.0; d]
            } else {
                (0..d).map(|j| (z.z[j] - a * x_hat[j]) / s).collect()
            }
        }
    };
    let v_hat = match param {
        Parameterization::V => raw.to_vec(),
        Parameterization::X if s == 0.0 => vec![0.0; d],
        _ => (0..d).map(|j| a * eps_hat[j] - s * x_hat[j]).collect(),
    };
    Ok(Prediction {
        x_hat,
        eps_hat,
        v_hat,
    })
}

/// A raw output that reproduces `pred` under `param`. For the combined
/// parameterization the preimage is not unique; `(x_hat, eps_hat)` is used.
pub fn raw_from_prediction(pred: &Prediction, param: Parameterization) -> Vec<f64> {
    match param {
        Parameterization::X => pred.x_hat.clone(),
        Parameterization::Eps => pred.eps_hat.clone(),
        Parameterization::V => pred.v_hat.clone(),
        Parameterization::XEpsCombined => {
            let mut raw = pred.x_hat.clone();
            raw.extend_from_slice(&pred.eps_hat);
            raw
        }
    }
}

/// `v = alpha_t eps - sigma_t x`, the angular velocity `dz/dphi`.
pub fn v_of(x: &[f64], eps: &[f64], t: TimePoint) -> Result<Vec<f64>> {
    check_len(x.len(), eps.len())?;
    let p = alpha_sigma(t);
    Ok(x.iter()
        .zip(eps)
        .map(|(&xi, &ei)| p.alpha * ei - p.sigma * xi)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Snr,
    TruncatedSnr,
    SnrPlusOne,
}

impl LossWeighting {
    pub const ALL: [LossWeighting; 3] = [
        LossWeighting::Snr,
        LossWeighting::TruncatedSnr,
        LossWeighting::SnrPlusOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossWeighting::Snr => "snr",
            LossWeighting::TruncatedSnr => "truncated_snr",
            LossWeighting::SnrPlusOne => "snr_plus_one",
        }
    }
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss weighting `{s}`")))
    }
}

/// Weight on `||x - x_hat||^2`. Zero SNR takes the limiting values; the
/// noise-free endpoint is +infinity for the SNR-based weights.
pub fn loss_weight(log_snr: LogSnr, w: LossWeighting) -> f64 {
    match log_snr {
        LogSnr::Finite(l) => {
            let snr = l.exp();
            match w {
                LossWeighting::Snr => snr,
                LossWeighting::TruncatedSnr => snr.max(1.0),
                LossWeighting::SnrPlusOne => 1.0 + snr,
            }
        }
        LogSnr::ZeroSnr => match w {
            LossWeighting::Snr => 0.0,
            LossWeighting::TruncatedSnr | LossWeighting::SnrPlusOne => 1.0,
        },
        LogSnr::Clean => f64::INFINITY,
    }
}

/// `w(lambda) ||target - x_hat||^2`, summed over dimensions.
pub fn training_loss(
    target: &[f64],
    x_hat: &[f64],
    log_snr: LogSnr,
    w: LossWeighting,
) -> Result<f64> {
    check_len(target.len(), x_hat.len())?;
    let sq: f64 = target
        .iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(loss_weight(log_snr, w) * sq)
}

/// Mean of [`training_loss`] over a batch.
pub fn batch_training_loss(
    targets: &[Vec<f64>],
    x_hats: &[Vec<f64>],
    log_snrs: &[LogSnr],
    w: LossWeighting,
) -> Result<f64> {
    if targets.len() != x_hats.len() || targets.len() != log_snrs.len() {
        return Err(Error::shape(
            targets.len(),
            x_hats.len().min(log_snrs.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut total = 0.0;
    for ((t, x), l) in targets.iter().zip(x_hats).zip(log_snrs) {
        total += training_loss(t, x, *l, w)?;
    }
    Ok(total / targets.len() as f64)
}

/// Bayes-optimal denoiser `E[x | z_t]` for `x ~ N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), var.len())?;
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("oracle variance must be positive"));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(alpha s2 z + sigma^2 m) / (alpha^2 s2 + sigma^2)` per coordinate.
    pub fn x_hat(&self, z: &[f64], p: &SchedulePoint) -> Vec<f64> {
        let (a, s) = (p.alpha, p.sigma);
        z.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&zi, (&m, &v))| (a * v * zi + s * s * m) / (a * a * v + s * s))
            .collect()
    }

    /// Exact probability-flow map from `z_t` at `from` to time `to`.
    pub fn flow(&self, z: &[f64], from: &SchedulePoint, to: &SchedulePoint) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&zi, (&m, &v))| {
                let sd_from = (from.alpha * from.alpha * v + from.sigma * from.sigma).sqrt();
                let sd_to = (to.alpha * to.alpha * v + to.sigma * to.sigma).sqrt();
                to.alpha * m + sd_to / sd_from * (zi - from.alpha * m)
            })
            .collect()
    }
}

/// Prediction of the oracle at a latent.
pub fn oracle_gaussian_denoiser(z: &Latent, oracle: &GaussianOracle) -> Result<Prediction> {
    check_len(oracle.dim(), z.z.len())?;
    let p = alpha_sigma(z.t);
    let x_hat = oracle.x_hat(&z.z, &p);
    to_prediction(&x_hat, z, Parameterization::X)
}

/// One row of the loss-weight curve export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCurveRow {
    pub lambda: f64,
    /// `w(lambda)` for SNR, truncated SNR, SNR+1.
    pub excluding_schedule: [f64; 3],
    /// The same weights multiplied by the density of lambda under `t ~ U[0,1]`.
    pub including_schedule: [f64; 3],
}

pub fn weight_curve(lambdas: impl IntoIterator<Item = f64>) -> Vec<WeightCurveRow> {
    lambdas
        .into_iter()
        .map(|l| {
            let w = LossWeighting::ALL.map(|k| loss_weight(LogSnr::Finite(l), k));
            let density = log_snr_density(l);
            WeightCurveRow {
                lambda: l,
                excluding_schedule: w,
                including_schedule: w.map(|x| x * density),
            }
        })
        .collect()
}

pub fn weight_curve_csv(rows: &[WeightCurveRow]) -> String {
    let mut out = String::from(
        "lambda,w_snr,w_truncated_snr,w_snr_plus_one,w_snr_incl_schedule,w_truncated_snr_incl_schedule,w_snr_plus_one_incl_schedule\n",
    );
    for r in rows {
        let [a, b, c] = r.excluding_schedule;
        let [d, e, f] = r.including_schedule;
        out.push_str(&format!("{},{a},{b},{c},{d},{e},{f}\n", r.lambda));
    }
    out
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(
            format!("length {expected}"),
            format!("length {got}"),
        ));
    }
    Ok(())
}

//! Variance-preserving cosine noise schedule.
//!
//! `alpha_t = cos(pi t / 2)`, `sigma_t = sin(pi t / 2)`, so the angle
//! `phi_t = atan(sigma_t / alpha_t)` is exactly `pi t / 2`. The two endpoints
//! have infinite log-SNR; they are carried as [`LogSnr::Clean`] (t = 0) and
//! [`LogSnr::ZeroSnr`] (t = 1) instead of non-finite floats.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TimePoint(f64);

impl TimePoint {
    pub const ZERO: TimePoint = TimePoint(0.0);
    pub const ONE: TimePoint = TimePoint(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(TimePoint(t))
        } else {
            Err(Error::domain(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TimePoint {
    type Error = Error;
    fn try_from(t: f64) -> Result<Self> {
        TimePoint::new(t)
    }
}

impl From<TimePoint> for f64 {
    fn from(t: TimePoint) -> f64 {
        t.0
    }
}

/// Log signal-to-noise ratio `log(alpha^2 / sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogSnr {
    Finite(f64),
    /// `sigma = 0` (t = 0): +infinity.
    Clean,
    /// `alpha = 0` (t = 1): -infinity.
    ZeroSnr,
}

impl LogSnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            LogSnr::Finite(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_zero_snr(self) -> bool {
        matches!(self, LogSnr::ZeroSnr)
    }

    /// Extended-real value, for plotting and comparisons.
    pub fn as_f64(self) -> f64 {
        match self {
            LogSnr::Finite(l) => l,
            LogSnr::Clean => f64::INFINITY,
            LogSnr::ZeroSnr => f64::NEG_INFINITY,
        }
    }

    /// Value clamped to `[-bound, bound]`; the endpoints map to the bounds.
    pub fn clamped(self, bound: f64) -> f64 {
        match self {
            LogSnr::Finite(l) => l.clamp(-bound, bound),
            LogSnr::Clean => bound,
            LogSnr::ZeroSnr => -bound,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

impl ScheduleKind {
    pub fn tag(self) -> u8 {
        match self {
            ScheduleKind::Cosine => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub t: TimePoint,
    pub alpha: f64,
    pub sigma: f64,
    pub log_snr: LogSnr,
    /// `atan(sigma / alpha)` in radians.
    pub phi: f64,
}

impl SchedulePoint {
    pub fn is_zero_snr(&self) -> bool {
        self.log_snr.is_zero_snr()
    }
}

/// Schedule quantities at time `t`.
pub fn alpha_sigma(t: TimePoint) -> SchedulePoint {
    let tv = t.get();
    let phi = FRAC_PI_2 * tv;
    // cos(pi/2) is not exactly zero in floating point; pin the endpoints.
    let (alpha, sigma, log_snr) = if tv == 0.0 {
        (1.0, 0.0, LogSnr::Clean)
    } else if tv == 1.0 {
        (0.0, 1.0, LogSnr::ZeroSnr)
    } else {
        let (s, c) = phi.sin_cos();
        (c, s, LogSnr::Finite(2.0 * (c / s).ln()))
    };
    SchedulePoint {
        t,
        alpha,
        sigma,
        log_snr,
        phi,
    }
}

/// Same as [`alpha_sigma`] for a raw float, with range checking.
pub fn at(t: f64) -> Result<SchedulePoint> {
    Ok(alpha_sigma(TimePoint::new(t)?))
}

/// Schedule quantities at a given log-SNR. `alpha^2 = sigmoid(lambda)`.
/// Infinite inputs map to the endpoints; NaN is rejected.
pub fn log_snr_to_alpha_sigma(lambda: f64) -> Result<SchedulePoint> {
    if lambda.is_nan() {
        return Err(Error::domain("log-SNR is NaN"));
    }
    if lambda == f64::INFINITY {
        return Ok(alpha_sigma(TimePoint::ZERO));
    }
    if lambda == f64::NEG_INFINITY {
        return Ok(alpha_sigma(TimePoint::ONE));
    }
    let alpha = sigmoid(lambda).sqrt();
    let sigma = sigmoid(-lambda).sqrt();
    let phi = sigma.atan2(alpha);
    let t = (phi / FRAC_PI_2).clamp(0.0, 1.0);
    Ok(SchedulePoint {
        t: TimePoint(t),
        alpha,
        sigma,
        log_snr: LogSnr::Finite(lambda),
        phi,
    })
}

/// Density of `lambda` when `t ~ U[0, 1]`: `|dt/dlambda| = 1 / (2 pi cosh(lambda / 2))`.
pub fn log_snr_density(lambda: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * (0.5 * lambda).cosh())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform time grid `t_i = (N - i) / N`, descending from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    n_steps: usize,
    times: Vec<TimePoint>,
}

impl StepGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::domain("step grid needs at least one step"));
        }
        let n = n_steps as f64;
        let times = (0..=n_steps)
            .map(|i| TimePoint(((n_steps - i) as f64) / n))
            .collect();
        Ok(StepGrid { n_steps, times })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn times(&self) -> &[TimePoint] {
        &self.times
    }

    /// `(t, s)` pairs for each step, `s < t`.
    pub fn steps(&self) -> impl Iterator<Item = (TimePoint, TimePoint)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }

    /// Grid with `N / divisor` steps that keeps every `divisor`-th point.
    pub fn coarsen(&self, divisor: usize) -> Result<Self> {
        if divisor == 0 || !self.n_steps.is_multiple_of(divisor) {
            return Err(Error::domain(format!(
                "cannot divide {} steps by {divisor}",
                self.n_steps
            )));
        }
        StepGrid::new(self.n_steps / divisor)
    }

    pub fn halve(&self) -> Result<Self> {
        self.coarsen(2)
    }
}

/// Shorthand for [`StepGrid::new`].
pub fn make_grid(n_steps: usize) -> Result<StepGrid> {
    StepGrid::new(n_steps)
}

//! Toy datasets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::GaussianOracle;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamRng, Streams};

pub const DATA_STREAM: &str = "data";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyDataset {
    Gauss1d {
        mean: f64,
        var: f64,
    },
    /// Eight Gaussian modes equally spaced on a circle.
    Ring8 {
        radius: f64,
        mode_std: f64,
    },
    SwissRoll {
        noise: f64,
    },
    /// Uniform on alternating unit squares of a 4x4 board over [-2, 2]^2.
    Checkerboard,
}

impl Default for ToyDataset {
    fn default() -> Self {
        ToyDataset::Ring8 {
            radius: 2.0,
            mode_std: 0.05,
        }
    }
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        match self {
            ToyDataset::Gauss1d { .. } => 1,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ToyDataset::Gauss1d { mean, var } => mean.is_finite() && var.is_finite() && var > 0.0,
            ToyDataset::Ring8 { radius, mode_std } => {
                radius > 0.0 && mode_std >= 0.0 && radius.is_finite() && mode_std.is_finite()
            }
            ToyDataset::SwissRoll { noise } => noise >= 0.0 && noise.is_finite(),
            ToyDataset::Checkerboard => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid dataset parameters {self:?}"
            )))
        }
    }

    /// Analytic denoiser, when the data law is Gaussian.
    pub fn oracle(&self) -> Option<GaussianOracle> {
        match *self {
            ToyDataset::Gauss1d { mean, var } => GaussianOracle::new(vec![mean], vec![var]).ok(),
            _ => None,
        }
    }

    /// Ring mode centers; empty for the other datasets.
    pub fn mode_centers(&self) -> Vec<[f64; 2]> {
        match *self {
            ToyDataset::Ring8 { radius, .. } => (0..8)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / 8.0;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match *self {
            ToyDataset::Gauss1d { mean, var } => out[0] = mean + var.sqrt() * standard_normal(rng),
            ToyDataset::Ring8 { radius, mode_std } => {
                let a = 2.0 * PI * rng.gen_range(0..8) as f64 / 8.0;
                out[0] = radius * a.cos() + mode_std * standard_normal(rng);
                out[1] = radius * a.sin() + mode_std * standard_normal(rng);
            }
            ToyDataset::SwissRoll { noise } => {
                // Arc parameter in [1.5 pi, 4.5 pi], scaled to roughly unit spread.
                let t = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
                out[0] = t * t.cos() / 5.0 + noise * standard_normal(rng);
                out[1] = t * t.sin() / 5.0 + noise * standard_normal(rng);
            }
            ToyDataset::Checkerboard => {
                let x = rng.gen::<f64>() * 4.0 - 2.0;
                let y = rng.gen::<f64>() - 2.0 * rng.gen_range(0..2) as f64;
                out[0] = x;
                out[1] = y + (x.floor().rem_euclid(2.0));
            }
        }
    }

    /// `count` i.i.d. rows drawn from one stream.
    pub fn sample(&self, rng: &mut StreamRng, count: usize) -> Array2<f64> {
        let mut out = Array2::zeros((count, self.dim()));
        for mut row in out.rows_mut() {
            self.sample_into(rng, row.as_slice_mut().expect("row-major"));
        }
        out
    }
}

/// `count` samples, deterministic in `seed`.
pub fn generate(dataset: &ToyDataset, count: usize, seed: u64) -> Result<Array2<f64>> {
    if count == 0 {
        return Err(Error::domain("generate needs count >= 1"));
    }
    dataset.validate()?;
    Ok(dataset.sample(&mut Streams::new(seed).stream(DATA_STREAM, 0), count))
}

impl fmt::Display for ToyDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyDataset::Gauss1d { mean, var } => write!(f, "gauss1d:{mean},{var}"),
            ToyDataset::Ring8 { radius, mode_std } => write!(f, "ring8:{radius},{mode_std}"),
            ToyDataset::SwissRoll { noise } => write!(f, "swiss_roll:{noise}"),
            ToyDataset::Checkerboard => write!(f, "checkerboard"),
        }
    }
}

impl FromStr for ToyDataset {
    type Err = Error;

    /// `gauss1d[:mean,var]`, `ring8[:radius,std]`, `swiss_roll[:noise]`,
    /// `checkerboard`. Omitted parameters take defaults.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad dataset `{s}`: {e}")))
                })
                .collect::<Result<_>>()?
        };
        let arg = |i: usize, default: f64| nums.get(i).copied().unwrap_or(default);
        let (ds, max_args) = match name {
            "gauss1d" => (
                ToyDataset::Gauss1d {
                    mean: arg(0, 0.0),
                    var: arg(1, 1.0),
                },
                2,
            ),
            "ring8" => (
                ToyDataset::Ring8 {
                    radius: arg(0, 2.0),
                    mode_std: arg(1, 0.05),
                },
                2,
            ),
            "swiss_roll" => (
                ToyDataset::SwissRoll {
                    noise: arg(0, 0.05),
                },
                1,
            ),
            "checkerboard" => (ToyDataset::Checkerboard, 0),
            _ => return Err(Error::Config(format!("unknown dataset `{s}`"))),
        };
        if nums.len() > max_args {
            return Err(Error::Config(format!(
                "too many parameters in dataset `{s}`"
            )));
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_moments() {
        let x = generate(
            &ToyDataset::Gauss1d {
                mean: 0.0,
                var: 1.0,
            },
            1_000_000,
            3,
        )
        .unwrap();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.004, "{mean}");
        assert!((var - 1.0).abs() < 0.006, "{var}");
    }

    #[test]
    fn ring_samples_near_modes() {
        let ds = ToyDataset::Ring8 {
            radius: 2.0,
            mode_std: 0.05,
        };
        let centers = ds.mode_centers();
        let x = generate(&ds, 100_000, 5).unwrap();
        let near = x
            .rows()
            .into_iter()
            .filter(|r| {
                centers
                    .iter()
                    .any(|c| ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sqrt() < 0.5)
            })
            .count();
        assert!(near as f64 / 100_000.0 >= 0.999);
        // all eight modes used roughly equally
        let mut counts = [0usize; 8];
        for r in x.rows() {
            let k = (0..8)
                .min_by(|&a, &b| {
                    let da = (r[0] - centers[a][0]).hypot(r[1] - centers[a][1]);
                    let db = (r[0] - centers[b][0]).hypot(r[1] - centers[b][1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            counts[k] += 1;
        }
        assert!(
            counts.iter().all(|&c| (c as f64 - 12_500.0).abs() < 600.0),
            "{counts:?}"
        );
    }

    #[test]
    fn checkerboard_cells() {
        let x = generate(&ToyDataset::Checkerboard, 10_000, 1).unwrap();
        for r in x.rows() {
            assert!((-2.0..2.0).contains(&r[0]) && (-2.0..2.0).contains(&r[1]));
            let parity = (r[0].floor() + r[1].floor()).rem_euclid(2.0);
            assert_eq!(parity, 0.0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        for ds in [
            ToyDataset::default(),
            ToyDataset::SwissRoll { noise: 0.1 },
            ToyDataset::Checkerboard,
        ] {
            assert_eq!(
                generate(&ds, 100, 9).unwrap(),
                generate(&ds, 100, 9).unwrap()
            );
            assert_ne!(
                generate(&ds, 100, 9).unwrap(),
                generate(&ds, 100, 10).unwrap()
            );
        }
        assert!(generate(&ToyDataset::default(), 0, 1).is_err());
    }

    #[test]
    fn parse_and_display() {
        for s in [
            "gauss1d:0.5,2",
            "ring8:2,0.05",
            "swiss_roll:0.1",
            "checkerboard",
        ] {
            let d: ToyDataset = s.parse().unwrap();
            assert_eq!(d.to_string().parse::<ToyDataset>().unwrap(), d);
        }
        assert_eq!(
            "ring8".parse::<ToyDataset>().unwrap(),
            ToyDataset::default()
        );
        assert!("gauss1d:0,-1".parse::<ToyDataset>().is_err());
        assert!("moons".parse::<ToyDataset>().is_err());
        let json = serde_json::to_string(&ToyDataset::default()).unwrap();
        assert_eq!(json, r#"{"kind":"ring8","radius":2.0,"mode_std":0.05}"#);
    }
}

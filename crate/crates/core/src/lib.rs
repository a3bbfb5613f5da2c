//! Continuous-time Gaussian diffusion on toy data: schedule, forward process,
//! prediction parameterizations and loss weightings, DDIM / ODE / ancestral
//! samplers, a small time-conditioned MLP, and progressive distillation.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};

/// Serialize rows as CSV with a header line.
pub fn csv_string<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

//! Two-sample metrics used in place of FID.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::samplers::{sample_final, Denoiser, SamplerKind};
use crate::schedule::StepGrid;

/// Largest sample count used as-is by [`energy_distance`].
pub const ENERGY_MAX_POINTS: usize = 10_000;
const SUBSAMPLE_SEED: u64 = 0x5eed_0e0d;
const BLOCK: usize = 64;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean of `||a_i - b_j||` over all pairs. Rows of `a` are split into fixed
/// blocks; partial sums are added in block order.
fn mean_pairwise(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let a_rows: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    let b_rows: Vec<Vec<f64>> = b.rows().into_iter().map(|r| r.to_vec()).collect();
    let partial: Vec<f64> = a_rows
        .par_chunks(BLOCK)
        .map(|chunk| {
            let mut s = 0.0;
            for x in chunk {
                for y in &b_rows {
                    s += dist(x, y);
                }
            }
            s
        })
        .collect();
    partial.iter().sum::<f64>() / (a.nrows() as f64 * b.nrows() as f64)
}

fn lexicographic(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn subsample(x: ArrayView2<f64>, tag: u64) -> Array2<f64> {
    if x.nrows() <= ENERGY_MAX_POINTS {
        return x.to_owned();
    }
    let mut rng = Streams::new(SUBSAMPLE_SEED).stream("energy_subsample", tag);
    let mut idx = index::sample(&mut rng, x.nrows(), ENERGY_MAX_POINTS).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// `2 E||a-b|| - E||a-a'|| - E||b-b'||` with full pairwise sums (V-statistic).
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::domain(
            "energy distance needs at least two samples per side",
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("dimension {}", a.ncols()), b.ncols()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::domain("energy distance of non-finite samples"));
    }
    let (a, b) = (subsample(a, 0), subsample(b, 1));
    let (a, b) = match lexicographic(a.view(), b.view()) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let ab = mean_pairwise(a.view(), b.view());
    let aa = mean_pairwise(a.view(), a.view());
    let bb = mean_pairwise(b.view(), b.view());
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Exact empirical W1 in one dimension (equal sample sizes).
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} samples", a.len()), b.len()));
    }
    if a.is_empty() {
        return Err(Error::domain("empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// [`wasserstein1`] for single-column sample matrices.
pub fn wasserstein1_rows(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != 1 || b.ncols() != 1 {
        return Err(Error::domain(format!(
            "W1 is implemented for d=1, got d={}",
            a.ncols().max(b.ncols())
        )));
    }
    wasserstein1(&a.column(0).to_vec(), &b.column(0).to_vec())
}

/// Mean row-wise L2 distance.
pub fn mean_l2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            dist(
                x.as_slice().unwrap_or(&x.to_vec()),
                y.as_slice().unwrap_or(&y.to_vec()),
            )
        })
        .sum();
    Ok(total / a.nrows() as f64)
}

/// Mean L2 between student `student_steps`-step DDIM samples and teacher
/// `teacher_steps`-step DDIM samples from identical seed noise.
pub fn agreement(
    teacher: &dyn Denoiser,
    teacher_steps: usize,
    student: &dyn Denoiser,
    student_steps: usize,
    streams: &Streams,
    count: usize,
) -> Result<f64> {
    if teacher.dim() != student.dim() {
        return Err(Error::shape(
            format!("dimension {}", teacher.dim()),
            student.dim(),
        ));
    }
    let ts = sample_final(
        teacher,
        SamplerKind::Ddim,
        &StepGrid::new(teacher_steps)?,
        streams,
        count,
    )?;
    let ss = sample_final(
        student,
        SamplerKind::Ddim,
        &StepGrid::new(student_steps)?,
        streams,
        count,
    )?;
    mean_l2(ts.view(), ss.view())
}

/// One evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sampler: String,
    pub n_steps: usize,
    pub energy_distance: f64,
    /// Only for one-dimensional data.
    pub w1: Option<f64>,
    pub agreement: Option<f64>,
}

/// Sample with `kind` on an `n_steps` grid and compare against `reference`.
pub fn evaluate(
    den: &dyn Denoiser,
    kind: SamplerKind,
    n_steps: usize,
    reference: ArrayView2<f64>,
    streams: &Streams,
) -> Result<(MetricRow, Array2<f64>)> {
    let samples = sample_final(
        den,
        kind,
        &StepGrid::new(n_steps)?,
        streams,
        reference.nrows(),
    )?;
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!(
            "{kind} with {n_steps} steps produced non-finite samples"
        )));
    }
    let energy = energy_distance(samples.view(), reference)?;
    let w1 = if reference.ncols() == 1 {
        Some(wasserstein1_rows(samples.view(), reference)?)
    } else {
        None
    };
    let row = MetricRow {
        sampler: kind.to_string(),
        n_steps,
        energy_distance: energy,
        w1,
        agreement: None,
    };
    Ok((row, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::fill_standard_normal;
    use ndarray::array;

    fn normal(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = Streams::new(seed).stream("t", 0);
        let mut v = vec![0.0; n * d];
        fill_standard_normal(&mut rng, &mut v);
        Array2::from_shape_vec((n, d), v).unwrap() + shift
    }

    #[test]
    fn energy_zero_on_identical_and_symmetric() {
        let a = normal(300, 2, 0.0, 1);
        let b = normal(200, 2, 0.5, 2);
        assert_eq!(energy_distance(a.view(), a.view()).unwrap(), 0.0);
        let ab = energy_distance(a.view(), b.view()).unwrap();
        let ba = energy_distance(b.view(), a.view()).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab > 0.0);
    }

    #[test]
    fn energy_detects_shift() {
        let a = normal(10_000, 1, 0.0, 1);
        let b = normal(10_000, 1, 1.0, 2);
        let c = normal(10_000, 1, 0.0, 3);
        let shifted = energy_distance(a.view(), b.view()).unwrap();
        let same = energy_distance(a.view(), c.view()).unwrap();
        assert!(shifted > same && same >= 0.0);
        // mixing halfway towards A reduces the distance
        let mut mix = a.clone();
        for i in (0..10_000).step_by(2) {
            mix[[i, 0]] = b[[i, 0]];
        }
        assert!(energy_distance(a.view(), mix.view()).unwrap() <= shifted);
    }

    #[test]
    fn energy_rejects_bad_input() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(energy_distance(a.view(), array![[0.0, 1.0]].view()).is_err());
        assert!(energy_distance(a.view(), array![[0.0], [1.0]].view()).is_err());
        assert!(energy_distance(a.view(), array![[0.0, f64::NAN], [1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1(&[0.3, -1.0], &[-1.0, 0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(wasserstein1(&[0.0], &[1.0, 1.0]).is_err());
        assert!(wasserstein1_rows(array![[0.0, 1.0]].view(), array![[0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn w1_translation() {
        let a: Vec<f64> = normal(500, 1, 0.0, 4).into_raw_vec_and_offset().0;
        let b: Vec<f64> = normal(500, 1, 0.2, 5).into_raw_vec_and_offset().0;
        let base = wasserstein1(&a, &b).unwrap();
        for c in [-0.7, 0.1, 2.0] {
            let shifted: Vec<f64> = b.iter().map(|v| v + c).collect();
            assert!((wasserstein1(&a, &shifted).unwrap() - base).abs() <= c.abs() + 1e-12);
            let self_shift: Vec<f64> = a.iter().map(|v| v + c).collect();
            assert!((wasserstein1(&a, &self_shift).unwrap() - c.abs()).abs() < 1e-12);
        }
    }
}

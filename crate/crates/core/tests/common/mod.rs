#![allow(dead_code)]

use ndarray::Array2;
use progdistill::diffusion::Parameterization;
use progdistill::net::{Activation, MlpConfig, Model, OptimizerSettings};
use progdistill::rng::{fill_standard_normal, Streams};
use rand::Rng;

/// Small network whose output is far from zero everywhere (init zeroes the
/// output layer, so every parameter gets a random kick).
pub fn random_model(
    dim: usize,
    param: Parameterization,
    activation: Activation,
    seed: u64,
) -> Model {
    let mut cfg = MlpConfig::new(dim, param.channels());
    cfg.hidden_dims = vec![16, 16];
    cfg.time_embed_dim = 6;
    cfg.activation = activation;
    let streams = Streams::new(seed);
    let mut m = Model::new(
        cfg,
        param,
        OptimizerSettings::default(),
        &mut streams.stream("init", 0),
    )
    .unwrap();
    let mut rng = streams.stream("kick", 0);
    for p in m.params.iter_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    m.opt.ema = m.params.clone();
    m
}

pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut v = vec![0.0; rows * cols];
    fill_standard_normal(&mut Streams::new(seed).stream("matrix", 0), &mut v);
    Array2::from_shape_vec((rows, cols), v).unwrap()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

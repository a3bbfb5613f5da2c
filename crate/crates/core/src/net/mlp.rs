use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamRng};
use crate::schedule::LogSnr;

/// Conditioning log-SNR is clamped to this magnitude; zero SNR maps to `-LOG_SNR_CLAMP`.
pub const LOG_SNR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Silu, Activation::Tanh, Activation::Relu];

    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sg = 1.0 / (1.0 + (-x).exp());
                sg * (1.0 + x * (1.0 - sg))
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Data dimension `d`.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Raw output channels per data dimension (1, or 2 for the combined head).
    pub output_channels: usize,
    /// Width of the sinusoidal log-SNR embedding (even).
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(input_dim: usize, output_channels: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![128, 128, 128],
            output_channels,
            time_embed_dim: 16,
            activation: Activation::Silu,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim * self.output_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.input_dim == 0
            || self.output_channels == 0
            || self.time_embed_dim == 0
            || !self.time_embed_dim.is_multiple_of(2)
            || self.hidden_dims.contains(&0);
        if bad {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Fully connected network `[z, embed(lambda)] -> hidden... -> raw output`.
///
/// Parameters live in one flat vector; each layer stores its weight as a
/// row-major `fan_in x fan_out` block followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
    n_params: usize,
}

pub struct ForwardCache {
    /// Layer inputs (post-activation of the previous layer).
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim + config.time_embed_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.output_dim());
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                w_off: off,
                b_off: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            config,
            layers,
            n_params: off,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn shape_table(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.fan_in, l.fan_out)).collect()
    }

    /// LeCun-normal hidden weights, zero biases, zero output layer.
    pub fn init(&self, rng: &mut StreamRng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let scale = (1.0 / layer.fan_in as f64).sqrt();
            for w in &mut p[layer.w_off..layer.b_off] {
                *w = scale * standard_normal(rng);
            }
        }
        p
    }

    fn weight<'a>(&self, params: &'a [f64], l: &Layer) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.fan_in, l.fan_out), &params[l.w_off..l.b_off])
            .expect("layer shape")
    }

    fn bias<'a>(&self, params: &'a [f64], l: &Layer) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[l.b_off..l.b_off + l.fan_out])
    }

    /// Sinusoidal features of `clamp(lambda) / 4` at frequencies `2^(k-2)`.
    pub fn embed_into(&self, log_snr: LogSnr, out: &mut [f64]) {
        let u = log_snr.clamped(LOG_SNR_CLAMP) / 4.0;
        let half = self.config.time_embed_dim / 2;
        for k in 0..half {
            let f = 2f64.powi(k as i32 - 2);
            let (s, c) = (f * u).sin_cos();
            out[k] = s;
            out[half + k] = c;
        }
    }

    fn input_matrix(&self, z: ArrayView2<f64>, cond: &[LogSnr]) -> Result<Array2<f64>> {
        let d = self.config.input_dim;
        if z.ncols() != d {
            return Err(Error::shape(
                format!("{d} columns"),
                format!("{} columns", z.ncols()),
            ));
        }
        if z.nrows() != cond.len() {
            return Err(Error::shape(
                format!("{} conditioning values", z.nrows()),
                cond.len(),
            ));
        }
        let width = d + self.config.time_embed_dim;
        let mut x = Array2::zeros((z.nrows(), width));
        for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            row.slice_mut(s![..d]).assign(&z.row(i));
            let slice = row.as_slice_mut().expect("row-major input");
            self.embed_into(cond[i], &mut slice[d..]);
        }
        Ok(x)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::shape(
                format!("{} parameters", self.n_params),
                params.len(),
            ));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &[f64],
        z: ArrayView2<f64>,
        cond: &[LogSnr],
    ) -> Result<Array2<f64>> {
        Ok(self.forward_cached(params, z, cond)?.output)
    }

    pub fn forward_cached(
        &self,
        params: &[f64],
        z: ArrayView2<f64>,
        cond: &[LogSnr],
    ) -> Result<ForwardCache> {
        self.check_params(params)?;
        let mut h = self.input_matrix(z, cond)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&self.weight(params, layer));
            a += &self.bias(params, layer);
            inputs.push(h);
            if i == last {
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    output: a,
                });
            }
            let act = self.config.activation;
            h = a.mapv(|v| act.apply(v));
            pre.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of `sum(d_out * output)` with respect to the parameters.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_out: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if d_out.dim() != cache.output.dim() {
            return Err(Error::shape(
                format!("{:?}", cache.output.dim()),
                format!("{:?}", d_out.dim()),
            ));
        }
        let mut grad = vec![0.0; self.n_params];
        let mut delta = d_out.to_owned();
        let act = self.config.activation;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let gw = cache.inputs[i].t().dot(&delta);
            grad[layer.w_off..layer.b_off]
                .copy_from_slice(gw.as_standard_layout().as_slice().expect("contiguous"));
            // column sums in fixed row order
            let gb = &mut grad[layer.b_off..layer.b_off + layer.fan_out];
            for row in delta.rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            if i == 0 {
                break;
            }
            let mut back = delta.dot(&self.weight(params, layer).t());
            back.zip_mut_with(&cache.pre[i - 1], |d, &a| *d *= act.derivative(a));
            delta = back;
        }
        Ok(grad)
    }

    /// Loss and gradient. `loss` maps the raw output to `(value, dloss/doutput)`.
    pub fn loss_and_grad<F>(
        &self,
        params: &[f64],
        z: ArrayView2<f64>,
        cond: &[LogSnr],
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let cache = self.forward_cached(params, z, cond)?;
        let (value, d_out) = loss(cache.output.view())?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value}")));
        }
        let grad = self.backward(params, &cache, d_out.view())?;
        Ok((value, grad))
    }
}

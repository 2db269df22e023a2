//! Parameterised layers and the parameter-visiting trait shared by every block.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{batch_norm_normalize, conv3d, conv_transpose3d, layer_norm_last, ConvSpec, Tensor};

/// Anything that owns learnable tensors.
pub trait Module {
    /// Visits every learnable tensor with a dotted path name.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));

    /// Visits persistent non-learnable state (normalisation running statistics).
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor)) {}

    fn set_training(&self, _training: bool) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, t| out.push((n, t.clone())));
    out
}

pub fn named_buffers(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit_buffers("", &mut |n, t| out.push((n, t.clone())));
    out
}

/// Number of learnable scalars.
pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, t| n += t.numel());
    n
}

/// Overwrites every learnable scalar with `value`.
pub fn fill_params(m: &dyn Module, value: f64) {
    m.visit_params("", &mut |_, t| t.data_mut().fill(value));
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-bound..=bound)).collect(), shape).into_param()
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec((0..n).map(|_| dist.sample(rng)).collect(), shape).into_param()
}

fn channel_shape(c: usize) -> [usize; 4] {
    [c, 1, 1, 1]
}

#[derive(Debug)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv3d {
    /// Uniform(±1/√fan_in) initialisation for weights and bias.
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin / spec.groups * spec.kernel_volume();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let [kh, kw, kd] = spec.kernel;
        Conv3d {
            weight: uniform(&[cout, cin / spec.groups, kh, kw, kd], bound, rng),
            bias: bias.then(|| uniform(&channel_shape(cout), bound, rng)),
            spec,
        }
    }

    pub fn pointwise(cin: usize, cout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::new(cin, cout, ConvSpec::pointwise(), bias, rng)
    }

    /// Per-channel `k`³ convolution preserving spatial size.
    pub fn depthwise(channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(channels, channels, ConvSpec::same(k).with_groups(channels), false, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv3d(x, &self.weight, &self.spec)?;
        Ok(match &self.bias {
            Some(b) => y.add(b),
            None => y,
        })
    }
}

impl Module for Conv3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug)]
pub struct ConvTranspose3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl ConvTranspose3d {
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cout * spec.kernel_volume();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let [kh, kw, kd] = spec.kernel;
        ConvTranspose3d {
            weight: uniform(&[cin, cout, kh, kw, kd], bound, rng),
            bias: uniform(&channel_shape(cout), bound, rng),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv_transpose3d(x, &self.weight, &self.spec)?.add(&self.bias))
    }
}

impl Module for ConvTranspose3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Per-channel normalisation over spatial positions with learnable affine and
/// running statistics used in evaluation mode.
#[derive(Debug)]
pub struct BatchNorm3d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    training: Cell<bool>,
}

impl BatchNorm3d {
    pub fn new(c: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::ones(&channel_shape(c)).into_param(),
            beta: Tensor::zeros(&channel_shape(c)).into_param(),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
            momentum: 0.1,
            eps: 1e-5,
            training: Cell::new(true),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.shape()[0];
        if x.rank() != 4 || x.shape()[0] != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got {:?}",
                x.shape()
            )));
        }
        let xhat = if self.training.get() {
            let (xhat, mean, var) = batch_norm_normalize(x, self.eps)?;
            let n = (x.numel() / c) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let mut rm = self.running_mean.data_mut();
            let mut rv = self.running_var.data_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - m) * rm[ch] + m * mean[ch];
                rv[ch] = (1.0 - m) * rv[ch] + m * var[ch] * unbias;
            }
            xhat
        } else {
            let mean = Tensor::from_vec(self.running_mean.to_vec(), &channel_shape(c));
            let inv_std: Vec<f64> = self
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            x.sub(&mean).mul(&Tensor::from_vec(inv_std, &channel_shape(c)))
        };
        Ok(xhat.mul(&self.gamma).add(&self.beta))
    }
}

impl Module for BatchNorm3d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn set_training(&self, training: bool) {
        self.training.set(training);
    }
}

/// Normalisation over the trailing (channel) axis of `[N, C]` with learnable affine.
#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[1, c]).into_param(),
            beta: Tensor::zeros(&[1, c]).into_param(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm_last(x, self.eps)?.mul(&self.gamma).add(&self.beta))
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

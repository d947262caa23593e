//! A small fully connected ReLU classifier with hand-written backprop.
//!
//! It produces logits and penultimate-layer features for synthetic
//! experiments and supplies the input gradients ODIN needs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::rng;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::scorers::{softmax, DifferentiableClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Affine + ReLU stack ending in raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

/// Which scalar the input gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientTarget {
    /// `−log S_MSP(x)` at the given temperature.
    NegLogMsp { temperature: f64 },
}

struct Trace {
    /// Layer inputs; `inputs[0]` is `x`, `inputs[l]` the ReLU output of layer `l-1`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one is the logits.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights `U(−a, a)`, `a = √(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = rng(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..a)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("network needs at least one layer"))?;
        let mut dims = vec![first.weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != *dims.last().unwrap() || l.bias.len() != l.weight.rows() {
                return Err(Error::shape(format!("layer {i} shape is inconsistent")));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
            dims.push(l.weight.rows());
        }
        check_dims(&dims)?;
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::shape(format!(
                "network expects input of length {}, got {}",
                self.dims[0],
                x.len()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = inputs.last().unwrap();
            let z: Vec<f64> = layer
                .weight
                .row_iter()
                .zip(&layer.bias)
                .map(|(w, b)| dot(w, h) + b)
                .collect();
            if l < last {
                inputs.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x).pre.pop().unwrap())
    }

    /// `(penultimate activations, logits)`. With no hidden layer the
    /// penultimate representation is the input itself.
    pub fn forward_with_features(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut t = self.run(x);
        Ok((t.inputs.pop().unwrap(), t.pre.pop().unwrap()))
    }

    /// Backpropagates `grad_logits` to every parameter and to the input.
    /// Returns the input gradient; parameter gradients are accumulated
    /// into `acc` when given.
    fn backward(
        &self,
        t: &Trace,
        grad_logits: Vec<f64>,
        mut acc: Option<&mut [Layer]>,
    ) -> Vec<f64> {
        let mut delta = grad_logits;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(acc) = acc.as_deref_mut() {
                let g = &mut acc[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &t.inputs[l], g.weight.row_mut(o));
                    }
                    g.bias[o] += d;
                }
            }
            let mut prev = layer
                .weight
                .t_matvec(&delta)
                .expect("consistent layer shapes");
            if l > 0 {
                // ReLU subgradient is 0 at exactly 0.
                for (p, z) in prev.iter_mut().zip(&t.pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Exact input gradient of the target, predicted class held fixed.
    pub fn input_gradient(&self, x: &[f64], target: GradientTarget) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let GradientTarget::NegLogMsp { temperature } = target;
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let t = self.run(x);
        let logits = t.pre.last().unwrap();
        let top = argmax(logits);
        // d/df [logsumexp(f/T) − f_top/T] = (softmax(f/T) − e_top) / T
        let mut g = softmax(logits, temperature);
        g[top] -= 1.0;
        g.iter_mut().for_each(|v| *v /= temperature);
        Ok(self.backward(&t, g, None))
    }

    /// Minibatch SGD on mean cross-entropy. Deterministic given `cfg.seed`.
    pub fn train(&mut self, data: &[(Vec<f64>, usize)], cfg: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::invalid("training data is empty"));
        }
        if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "learning rate and batch size must be positive".into(),
            ));
        }
        let classes = *self.dims.last().unwrap();
        for (i, (x, y)) in data.iter().enumerate() {
            self.check_input(x)?;
            if *y >= classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {y} >= {classes}"
                )));
            }
        }

        let mut rng = rng(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut loss_trace = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = Mlp::zeros(&self.dims)?.layers;
                for &i in batch {
                    let (x, y) = &data[i];
                    let t = self.run(x);
                    let logits = t.pre.last().unwrap();
                    let (loss, g) = cross_entropy_with_grad(logits, *y);
                    epoch_loss += loss;
                    self.backward(&t, g, Some(&mut grads));
                }
                let step = cfg.learning_rate / batch.len() as f64;
                for (layer, g) in self.layers.iter_mut().zip(&grads) {
                    for o in 0..layer.weight.rows() {
                        axpy(-step, g.weight.row(o), layer.weight.row_mut(o));
                    }
                    axpy(-step, &g.bias, &mut layer.bias);
                }
            }
            loss_trace.push(epoch_loss / data.len() as f64);
        }
        Ok(TrainReport { loss_trace })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }
}

impl DifferentiableClassifier for Mlp {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }

    fn neg_log_msp_gradient(&self, x: &[f64], temperature: f64) -> Result<Vec<f64>> {
        self.input_gradient(x, GradientTarget::NegLogMsp { temperature })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dims must have at least two positive entries, got {dims:?}"
        )));
    }
    if *dims.last().unwrap() < 2 {
        return Err(Error::InvalidArgument(
            "classifier needs at least 2 classes".into(),
        ));
    }
    Ok(())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax − one_hot` at the logit layer.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits, 1.0);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    (loss, p)
}

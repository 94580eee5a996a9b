//! Minimal dense network engine: layers, activations, losses, reverse-mode
//! gradients, and Adam. All math is f64; shapes are validated at construction
//! so the hot paths can assume consistency.

mod adam;
mod tape;

pub use adam::{Adam, OptimizerConfig};
pub use tape::{GradientSet, ModelRef, NodeId, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive guard inside the cross-entropy log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: &mut [f64]) {
        if self == Activation::Relu {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// A dense affine layer `y = activation(W x + b)` with row-major weights
/// of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(rename = "in")]
    in_dim: usize,
    #[serde(rename = "out")]
    out_dim: usize,
    activation: Activation,
    #[serde(rename = "w")]
    weights: Vec<f64>,
    #[serde(rename = "b")]
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(
                "layer dimensions must be positive".into(),
            ));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        })
    }

    /// Glorot-uniform weights in `[-sqrt(6/(in+out)), +sqrt(6/(in+out))]`,
    /// zero bias.
    pub fn glorot(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, activation)?;
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.uniform(-limit, limit);
        }
        Ok(layer)
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let layer = DenseLayer {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "layer dimensions must be positive".into(),
            ));
        }
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(Error::DimensionMismatch {
                context: "layer weights",
                expected: self.in_dim * self.out_dim,
                actual: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_dim {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: self.out_dim,
                actual: self.bias.len(),
            });
        }
        if !self
            .weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidConfig("layer has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// `W x + b` without the activation.
    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x.iter()) {
                acc += w * xv;
            }
            *out_v += acc;
        }
        out
    }
}

/// A stack of dense layers whose dimensions chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("model layers"));
        }
        for layer in &layers {
            layer.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Composed affine + activation map. Pure: identical inputs give
    /// bit-identical outputs.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.in_dim(),
                actual: x.len(),
            });
        }
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = layer.affine(&cur);
            layer.activation.apply(&mut next);
            cur = next;
        }
        Ok(cur)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let model: MlpModel = serde_json::from_str(json)?;
        MlpModel::new(model.layers)
    }

    /// Total parameter count, weights plus biases.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Numerically stable softmax: max-subtraction before exponentiation.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// Squared error `(pred - target)^2`.
pub fn mse_loss(pred: f64, target: f64) -> f64 {
    let d = pred - target;
    d * d
}

/// Negative log-likelihood of the target bin, `-ln(probs[bin] + eps)`.
pub fn cross_entropy_loss(probs: &[f64], target_bin: usize) -> Result<f64> {
    if target_bin >= probs.len() {
        return Err(Error::BinOutOfRange {
            bin: target_bin,
            n_bins: probs.len(),
        });
    }
    Ok(-(probs[target_bin] + LOG_EPS).ln())
}

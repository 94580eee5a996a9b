//! Define-by-run reverse-mode differentiation over vector-valued nodes.
//!
//! A `Tape` records the forward computation of one scalar loss; `backward`
//! then produces exact gradients for every parameter of every registered
//! model. Node values are plain `Vec<f64>` and reuse the same kernels as the
//! eager forward path, so tape and eager evaluation agree bit for bit.

use crate::error::{Error, Result};
use crate::nn::{softmax, MlpModel, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelRef(usize);

/// One gradient tensor per parameter tensor of a model, same shapes.
#[derive(Debug, Clone)]
pub struct GradientSet {
    layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientSet {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights().len()],
                    bias: vec![0.0; l.bias().len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.layers
    }

    pub fn is_congruent_with(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers().len()
            && self.layers.iter().zip(model.layers()).all(|(g, l)| {
                g.weights.len() == l.weights().len() && g.bias.len() == l.bias().len()
            })
    }

    /// Element-wise sum, for gradient accumulation across samples.
    pub fn accumulate(&mut self, other: &GradientSet) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers.iter_mut() {
            for v in l.weights.iter_mut() {
                *v *= factor;
            }
            for v in l.bias.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerGrads] {
        &mut self.layers
    }
}

enum Op {
    Constant,
    Dense {
        model: usize,
        layer: usize,
        input: usize,
    },
    Relu {
        input: usize,
    },
    Softmax {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Dot {
        lhs: usize,
        rhs: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    SquaredError {
        pred: usize,
        target: f64,
    },
    NegLogProb {
        probs: usize,
        bin: usize,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'m> {
    models: Vec<&'m MlpModel>,
    grads: Vec<GradientSet>,
    nodes: Vec<Node>,
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Tape {
            models: Vec::new(),
            grads: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Makes a model's parameters differentiable on this tape.
    pub fn register(&mut self, model: &'m MlpModel) -> ModelRef {
        self.models.push(model);
        self.grads.push(GradientSet::zeros_like(model));
        ModelRef(self.models.len() - 1)
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Affine map through one layer of a registered model, without the
    /// layer's activation.
    pub fn dense(&mut self, model: ModelRef, layer: usize, input: NodeId) -> Result<NodeId> {
        let l = &self.models[model.0].layers()[layer];
        let x = &self.nodes[input.0].value;
        if x.len() != l.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "dense input",
                expected: l.in_dim(),
                actual: x.len(),
            });
        }
        let value = l.affine(x);
        Ok(self.push(
            value,
            Op::Dense {
                model: model.0,
                layer,
                input: input.0,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut value = self.nodes[input.0].value.clone();
        for v in value.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu { input: input.0 })
    }

    /// Full forward pass of a registered model, layer activations included.
    pub fn model_forward(&mut self, model: ModelRef, input: NodeId) -> Result<NodeId> {
        let n_layers = self.models[model.0].layers().len();
        let mut cur = input;
        for i in 0..n_layers {
            cur = self.dense(model, i, cur)?;
            if self.models[model.0].layers()[i].activation() == crate::nn::Activation::Relu {
                cur = self.relu(cur);
            }
        }
        Ok(cur)
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let value = softmax(&self.nodes[input.0].value)?;
        Ok(self.push(value, Op::Softmax { input: input.0 }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn dot(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                context: "dot",
                expected: a.len(),
                actual: b.len(),
            });
        }
        let value = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        Ok(self.push(
            vec![value],
            Op::Dot {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                context: "add",
                expected: a.len(),
                actual: b.len(),
            });
        }
        let value = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        Ok(self.push(
            value,
            Op::Add {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|v| v * factor)
            .collect();
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
        )
    }

    pub fn squared_error(&mut self, pred: NodeId, target: f64) -> Result<NodeId> {
        let p = &self.nodes[pred.0].value;
        if p.len() != 1 {
            return Err(Error::LossNotScalar { len: p.len() });
        }
        let d = p[0] - target;
        Ok(self.push(
            vec![d * d],
            Op::SquaredError {
                pred: pred.0,
                target,
            },
        ))
    }

    pub fn neg_log_prob(&mut self, probs: NodeId, bin: usize) -> Result<NodeId> {
        let p = &self.nodes[probs.0].value;
        if bin >= p.len() {
            return Err(Error::BinOutOfRange {
                bin,
                n_bins: p.len(),
            });
        }
        let value = -(p[bin] + LOG_EPS).ln();
        Ok(self.push(
            vec![value],
            Op::NegLogProb {
                probs: probs.0,
                bin,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// the per-model gradient sets, so calling backward for several losses on
    /// one tape sums their gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::LossNotScalar {
                len: self.nodes[loss.0].value.len(),
            });
        }
        let mut adjoint: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adjoint[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adjoint[i]);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Dense {
                    model,
                    layer,
                    input,
                } => {
                    let l = &self.models[*model].layers()[*layer];
                    let x = &self.nodes[*input].value;
                    let in_dim = l.in_dim();
                    let lg = &mut self.grads[*model].layers[*layer];
                    for (o, &go) in g.iter().enumerate() {
                        lg.bias[o] += go;
                        let row = &mut lg.weights[o * in_dim..(o + 1) * in_dim];
                        for (w, &xv) in row.iter_mut().zip(x.iter()) {
                            *w += go * xv;
                        }
                    }
                    let gx = &mut adjoint[*input];
                    for (o, &go) in g.iter().enumerate() {
                        let row = &l.weights()[o * in_dim..(o + 1) * in_dim];
                        for (gxi, &w) in gx.iter_mut().zip(row.iter()) {
                            *gxi += w * go;
                        }
                    }
                }
                Op::Relu { input } => {
                    let y = &self.nodes[i].value;
                    let gx = &mut adjoint[*input];
                    for (j, &go) in g.iter().enumerate() {
                        if y[j] > 0.0 {
                            gx[j] += go;
                        }
                    }
                }
                Op::Softmax { input } => {
                    let y = &self.nodes[i].value;
                    let weighted: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    let gx = &mut adjoint[*input];
                    for (j, &go) in g.iter().enumerate() {
                        gx[j] += y[j] * (go - weighted);
                    }
                }
                Op::Concat { inputs } => {
                    let inputs = inputs.clone();
                    let mut offset = 0;
                    for idx in inputs {
                        let len = self.nodes[idx].value.len();
                        let gx = &mut adjoint[idx];
                        for (gxi, &go) in gx.iter_mut().zip(&g[offset..offset + len]) {
                            *gxi += go;
                        }
                        offset += len;
                    }
                }
                Op::Dot { lhs, rhs } => {
                    let go = g[0];
                    let (l, r) = (*lhs, *rhs);
                    let rv = self.nodes[r].value.clone();
                    for (gxi, &bv) in adjoint[l].iter_mut().zip(rv.iter()) {
                        *gxi += go * bv;
                    }
                    let lv = self.nodes[l].value.clone();
                    for (gxi, &av) in adjoint[r].iter_mut().zip(lv.iter()) {
                        *gxi += go * av;
                    }
                }
                Op::Add { lhs, rhs } => {
                    let (l, r) = (*lhs, *rhs);
                    for (gxi, &go) in adjoint[l].iter_mut().zip(g.iter()) {
                        *gxi += go;
                    }
                    for (gxi, &go) in adjoint[r].iter_mut().zip(g.iter()) {
                        *gxi += go;
                    }
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    let gx = &mut adjoint[*input];
                    for (gxi, &go) in gx.iter_mut().zip(g.iter()) {
                        *gxi += f * go;
                    }
                }
                Op::SquaredError { pred, target } => {
                    let p = self.nodes[*pred].value[0];
                    adjoint[*pred][0] += g[0] * 2.0 * (p - *target);
                }
                Op::NegLogProb { probs, bin } => {
                    let p = self.nodes[*probs].value[*bin];
                    adjoint[*probs][*bin] += g[0] * (-1.0 / (p + LOG_EPS));
                }
            }
        }
        Ok(())
    }

    /// Gradients accumulated so far for one registered model.
    pub fn gradients(&self, model: ModelRef) -> GradientSet {
        self.grads[model.0].clone()
    }
}

impl<'m> Default for Tape<'m> {
    fn default() -> Self {
        Self::new()
    }
}

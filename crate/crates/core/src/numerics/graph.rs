//! Reverse-mode tape over the kernel set.
//!
//! A [`Graph`] records every forward value together with the operation that
//! produced it. [`Graph::backward`] replays the tape in reverse and adds the
//! resulting gradients into the [`Parameter`]s that were registered as leaves.

use crate::error::{Error, Result};

use super::kernels::{self, cosine_scores, cosine_scores_backward};
use super::{Parameter, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Bilinear(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// Weighted sum over the cells of a `[D,H,W]` map.
    MaskedMean {
        input: Var,
        weights: Vec<T>,
    },
    Mean(Vec<Var>),
    Cosine {
        features: Var,
        prototypes: Vec<Var>,
        alpha: T,
        eps: T,
    },
    Softmax(Var),
    /// Mean negative log-probability of the labelled class per pixel.
    Nll {
        probs: Var,
        labels: Vec<u8>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A leaf bound to `params[index]` of the slice later passed to
    /// [`Graph::backward`].
    pub fn param(&mut self, index: usize, param: &Parameter<T>) -> Var {
        self.push(param.value.clone(), Op::Param(index), &[])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu(self.value(input));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn maxpool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_with_argmax(self.value(input), size, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(input), out_h, out_w)?;
        Ok(self.push(out, Op::Bilinear(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("add of {:?} and {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale(input, factor), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input), &[input])
    }

    /// `out[d] = Σ_p input[d, p] · weights[p]` for a `[D, H, W]` input.
    pub fn masked_mean(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let (d, h, w) = self.value(input).dims3()?;
        if weights.len() != h * w {
            return Err(Error::shape(format!(
                "pooling weights cover {} cells, map has {}",
                weights.len(),
                h * w
            )));
        }
        let x = self.value(input).data();
        let out: Vec<T> = x
            .chunks(h * w)
            .map(|plane| plane.iter().zip(&weights).map(|(&a, &b)| a * b).sum())
            .collect();
        let out = Tensor::new(vec![d], out)?;
        Ok(self.push(out, Op::MaskedMean { input, weights }, &[input]))
    }

    /// Elementwise arithmetic mean of equally shaped tensors.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Contract("mean of no tensors".into()));
        };
        let mut acc = self.value(first).clone();
        for &v in &inputs[1..] {
            if self.value(v).shape() != acc.shape() {
                return Err(Error::shape("mean over tensors of different shapes"));
            }
            acc.add_assign(self.value(v));
        }
        let n = T::of(inputs.len() as f64);
        let out = acc.map(|v| v / n);
        Ok(self.push(out, Op::Mean(inputs.to_vec()), inputs))
    }

    /// `alpha · cos(features[:, y, x], prototype_j)` for every cell and prototype.
    pub fn cosine_scores(&mut self, features: Var, prototypes: &[Var], alpha: T, eps: T) -> Result<Var> {
        let protos: Vec<&Tensor<T>> = prototypes.iter().map(|&p| self.value(p)).collect();
        let out = cosine_scores(self.value(features), &protos, alpha, eps)?;
        let mut inputs = vec![features];
        inputs.extend_from_slice(prototypes);
        Ok(self.push(
            out,
            Op::Cosine {
                features,
                prototypes: prototypes.to_vec(),
                alpha,
                eps,
            },
            &inputs,
        ))
    }

    pub fn softmax(&mut self, scores: Var) -> Result<Var> {
        let out = kernels::softmax_over_classes(self.value(scores))?;
        Ok(self.push(out, Op::Softmax(scores), &[scores]))
    }

    pub fn nll(&mut self, probs: Var, labels: Vec<u8>) -> Result<Var> {
        let (j, h, w) = self.value(probs).dims3()?;
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "{} labels for a {h}x{w} probability map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= j) {
            return Err(Error::shape(format!("label {bad} outside {j} classes")));
        }
        let p = self.value(probs).data();
        let plane = h * w;
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(px, &l)| -p[l as usize * plane + px].ln())
            .sum();
        let out = Tensor::scalar(total / T::of(plane as f64));
        Ok(self.push(out, Op::Nll { probs, labels }, &[probs]))
    }

    /// Adds `∂loss/∂param` into the gradient of every parameter reachable from
    /// `loss`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut [Parameter<T>]) -> Result<()> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.shape().to_vec(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => {
                    let count = params.len();
                    let p = params.get_mut(*index).ok_or_else(|| {
                        Error::Contract(format!("graph refers to parameter {index}, only {count} given"))
                    })?;
                    if p.grad.shape() != g.shape() {
                        return Err(Error::Contract(format!(
                            "parameter {index} has shape {:?}, graph used {:?}",
                            p.grad.shape(),
                            g.shape()
                        )));
                    }
                    p.grad.add_assign(&g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                        need_input,
                    )?;
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *input, dx);
                    }
                    self.send(&mut grads, *weight, cg.weight);
                    self.send(&mut grads, *bias, cg.bias);
                }
                Op::Relu(input) => {
                    let dx = kernels::relu_backward(&node.value, &g);
                    self.send(&mut grads, *input, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &g);
                    self.send(&mut grads, *input, dx);
                }
                Op::Bilinear(input) => {
                    let (_, h, w) = self.value(*input).dims3()?;
                    let dx = kernels::bilinear_resize_backward(&g, h, w)?;
                    self.send(&mut grads, *input, dx);
                }
                Op::Reshape(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    self.send(&mut grads, *input, g.reshape(shape)?);
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, g.clone());
                    self.send(&mut grads, *b, g);
                }
                Op::Scale(input, factor) => {
                    let f = *factor;
                    self.send(&mut grads, *input, g.map(|v| v * f));
                }
                Op::Sum(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    self.send(&mut grads, *input, Tensor::full(&shape, g.item()));
                }
                Op::MaskedMean { input, weights } => {
                    let shape = self.value(*input).shape().to_vec();
                    let mut dx = Tensor::zeros(&shape);
                    let plane = weights.len();
                    for (row, &gd) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                        for (v, &wt) in row.iter_mut().zip(weights) {
                            *v = gd * wt;
                        }
                    }
                    self.send(&mut grads, *input, dx);
                }
                Op::Mean(inputs) => {
                    let n = T::of(inputs.len() as f64);
                    let share = g.map(|v| v / n);
                    for &v in inputs {
                        self.send(&mut grads, v, share.clone());
                    }
                }
                Op::Cosine {
                    features,
                    prototypes,
                    alpha,
                    eps,
                } => {
                    let protos: Vec<&Tensor<T>> = prototypes.iter().map(|&p| self.value(p)).collect();
                    let (df, dps) = cosine_scores_backward(self.value(*features), &protos, *alpha, *eps, &g)?;
                    self.send(&mut grads, *features, df);
                    for (&p, dp) in prototypes.iter().zip(dps) {
                        self.send(&mut grads, p, dp);
                    }
                }
                Op::Softmax(input) => {
                    let dx = kernels::softmax_backward(&node.value, &g)?;
                    self.send(&mut grads, *input, dx);
                }
                Op::Nll { probs, labels } => {
                    let p = self.value(*probs);
                    let plane = labels.len();
                    let scale = g.item() / T::of(plane as f64);
                    let mut dp = Tensor::zeros(p.shape());
                    let d = dp.data_mut();
                    for (px, &l) in labels.iter().enumerate() {
                        let i = l as usize * plane + px;
                        d[i] = -scale / p.data()[i];
                    }
                    self.send(&mut grads, *probs, dp);
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if self.nodes[to.0].requires_grad {
            accumulate(grads, to, g);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
    match &mut grads[to.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

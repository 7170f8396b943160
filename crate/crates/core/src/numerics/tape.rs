//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Because nodes are appended in evaluation order, walking the tape backwards
//! visits every node after all of its consumers, which is all reverse mode
//! needs. A tape belongs to a single training step and is not shared between
//! threads.

use rand::Rng;

use super::kernels::{self, ConvSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    TransposedConv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<u8>,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        target: Vec<u8>,
        weights: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only kept for leaves with
    /// `requires_grad` and for nodes that depend on one.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        let node = &mut self.nodes[v.0];
        std::mem::replace(&mut node.value, Tensor::scalar(T::zero()))
    }

    /// Accumulated gradient of the last [`Tape::backward`] target, if any
    /// flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), &spec, self.value(weight), self.value(bias))?;
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            spec,
        };
        self.push(y, &[input, weight, bias], op, "conv2d output")
    }

    pub fn transposed_conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = kernels::transposed_conv2d(self.value(input), self.value(weight), self.value(bias))?;
        let op = Op::TransposedConv2d {
            input,
            weight,
            bias,
        };
        self.push(y, &[input, weight, bias], op, "transposed conv output")
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d(self.value(input))?;
        self.push(y, &[input], Op::MaxPool { input, argmax }, "max pool output")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let y = kernels::relu(self.value(input));
        self.push(y, &[input], Op::Relu { input }, "relu output")
    }

    /// Inverted dropout: in [`Mode::Train`] each element survives with
    /// probability `1 - rate` and survivors are scaled by `1 / (1 - rate)`.
    /// [`Mode::Eval`] and `rate == 0` are the identity and draw nothing
    /// from `rng`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let y = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(y, &[input], Op::Dropout { input, mask }, "dropout output")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        self.push(y, &[a, b], Op::Concat { a, b }, "concat output")
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let y = kernels::softmax_channels(self.value(input))?;
        self.push(y, &[input], Op::Softmax { input }, "softmax output")
    }

    /// Normalised weighted cross-entropy of probabilities (see
    /// [`kernels::weighted_cross_entropy`]).
    pub fn cross_entropy(&mut self, probs: Var, target: &[u8], weights: &[f64]) -> Result<Var> {
        let loss = kernels::weighted_cross_entropy(self.value(probs), target, weights)?;
        let op = Op::CrossEntropy {
            probs,
            target: target.to_vec(),
            weights: weights.to_vec(),
        };
        self.push(Tensor::scalar(loss), &[probs], op, "cross-entropy loss")
    }

    /// Softmax over channels fused with weighted cross-entropy; the stable
    /// route used for training.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[u8], weights: &[f64]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), target, weights)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            target: target.to_vec(),
            weights: weights.to_vec(),
        };
        self.push(Tensor::scalar(loss), &[logits], op, "cross-entropy loss")
    }

    /// Probabilities computed by the most recent fused loss node `loss`.
    pub fn fused_probs(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from `output`, seeding its gradient with ones.
    /// Clears gradients from any earlier call first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(self.value(output).shape().to_vec(), T::one())?;
        self.nodes[output.0].grad = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            g.ensure_finite("backward gradient")?;
            // Keep leaf gradients; intermediate ones are dropped once consumed.
            let node_op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            match &node_op {
                Op::Leaf => {
                    self.nodes[idx].grad = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        spec,
                        self.value(*weight),
                        self.value(*bias),
                        &g,
                    )?;
                    self.accumulate(*input, gi);
                    self.accumulate(*weight, gw);
                    self.accumulate(*bias, gb);
                }
                Op::TransposedConv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) = kernels::transposed_conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        &g,
                    )?;
                    self.accumulate(*input, gi);
                    self.accumulate(*weight, gw);
                    self.accumulate(*bias, gb);
                }
                Op::MaxPool { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    let gi = kernels::maxpool2d_backward(&shape, argmax, &g);
                    self.accumulate(*input, gi);
                }
                Op::Relu { input } => {
                    let gi = kernels::relu_backward(self.value(*input), &g);
                    self.accumulate(*input, gi);
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    let gi = Tensor::from_parts_unchecked(g.shape().to_vec(), data);
                    self.accumulate(*input, gi);
                }
                Op::Concat { a, b } => {
                    let sa = self.value(*a).shape().to_vec();
                    let sb = self.value(*b).shape().to_vec();
                    let (ga, gb) = kernels::concat_channels_backward(&sa, &sb, &g);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::Softmax { input } => {
                    let gi = kernels::softmax_channels_backward(&self.nodes[idx].value, &g);
                    self.accumulate(*input, gi);
                }
                Op::CrossEntropy {
                    probs,
                    target,
                    weights,
                } => {
                    let gi = kernels::weighted_cross_entropy_backward(
                        self.value(*probs),
                        target,
                        weights,
                        g.data()[0],
                    );
                    self.accumulate(*probs, gi);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    target,
                    weights,
                } => {
                    let gi = kernels::softmax_cross_entropy_backward(probs, target, weights, g.data()[0]);
                    self.accumulate(*logits, gi);
                }
            }
            self.nodes[idx].op = node_op;
        }
        Ok(())
    }
}

//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. Nodes only reference earlier nodes, so a single
//! reverse sweep over the tape visits each node once in topological order.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::softmax_rows;
pub use conv::Conv2dGeometry;
pub use norm::{NormMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::PoolGeometry;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        geom: PoolGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    /// Records a trainable input whose gradient will be populated by
    /// [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `var`, if `var`
    /// was reachable from the loss.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Hash of the active linear piece: ReLU input signs and max-pool
    /// winners. Two evaluations with equal signatures lie on the same smooth
    /// piece, which finite-difference verification relies on.
    pub fn piecewise_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.value(*input).data() {
                        (*v > T::zero()).hash(&mut hasher);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut hasher),
                _ => {}
            }
        }
        hasher.finish()
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.value(*v).is_finite()) || value.is_finite(),
            "non-finite output from finite inputs in {op:?}",
            op = std::mem::discriminant(&op)
        );
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        self.push_node(value, requires_grad, op)
    }

    /// Runs reverse accumulation from a scalar `loss`. Gradients add up over
    /// every path through which a value is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = match self.value(loss).numel() {
            1 => Tensor::full(self.value(loss).shape().to_vec(), T::one()),
            n => {
                return Err(Error::Backward(format!(
                    "loss must be a scalar, got {n} elements"
                )))
            }
        };
        self.backward_with_seed(loss, seed)
    }

    /// Like [`Tape::backward`] but seeds the output gradient explicitly.
    pub fn backward_with_seed(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.value(output).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        self.backward_done = true;
        if !self.requires_grad(output) {
            return Ok(());
        }
        self.grads[output.0] = Some(seed);
        for index in (0..=output.0).rev() {
            if !self.nodes[index].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[index].take() else {
                continue;
            };
            let contributions = self.node_backward(index, &upstream)?;
            self.grads[index] = Some(upstream);
            for (var, grad) in contributions {
                debug_assert!(var.0 < index, "tape order violated");
                match &mut self.grads[var.0] {
                    Some(existing) => existing.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, index: usize, upstream: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[index];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => self.conv2d_backward(*input, *kernel, *bias, geom, upstream, &mut out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => self.batch_norm_backward(
                (*input, *gamma, *beta),
                normalized,
                inv_std,
                *training,
                upstream,
                &mut out,
            ),
            Op::Relu { input } => self.relu_backward(*input, upstream, &mut out),
            Op::AvgPool { input, geom } => self.avg_pool_backward(*input, geom, upstream, &mut out),
            Op::MaxPool { input, argmax } => {
                self.max_pool_backward(*input, argmax, upstream, &mut out)
            }
            Op::GlobalAvgPool { input } => self.global_avg_pool_backward(*input, upstream, &mut out),
            Op::Concat { inputs } => self.concat_backward(inputs, upstream, &mut out),
            Op::Linear {
                input,
                weight,
                bias,
            } => self.linear_backward(*input, *weight, *bias, upstream, &mut out),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => self.softmax_ce_backward(*logits, labels, probs, upstream, &mut out),
            Op::Add { lhs, rhs } => {
                for v in [*lhs, *rhs] {
                    if self.requires_grad(v) {
                        out.push((v, upstream.clone()));
                    }
                }
            }
            Op::Sum { input } => {
                if self.requires_grad(*input) {
                    let g = upstream.data()[0];
                    out.push((*input, Tensor::full(self.value(*input).shape().to_vec(), g)));
                }
            }
            Op::WeightedSum { input, weights } => {
                if self.requires_grad(*input) {
                    let g = upstream.data()[0];
                    out.push((*input, weights.map(|w| w * g)));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.1));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([3], |i| i as f64));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Backward(_))));
        tape.zero_grad();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        let w = tape.param(Tensor::zeros([2]));
        let y = tape.add(x, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(w).is_some());
    }
}

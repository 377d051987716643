use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Row-wise softmax of an N×K matrix using the max-shift formulation.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

impl<T: Real> Tape<T> {
    /// Elementwise `max(0, x)`; the subgradient at 0 is 0 and NaN passes through.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v < T::zero() { T::zero() } else { v });
        self.push_op(value, &[input], Op::Relu { input })
    }

    pub(super) fn relu_backward(
        &self,
        input: Var,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        if !self.requires_grad(input) {
            return;
        }
        let x = self.value(input);
        let dx = x
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect();
        out.push((input, Tensor::new(x.shape().to_vec(), dx).unwrap()));
    }

    /// Concatenates N×Cᵢ×H×W tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            channels += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * plane;
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let value = Tensor::new([n, channels, h, w], data)?;
        Ok(self.push_op(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub(super) fn concat_backward(
        &self,
        inputs: &[Var],
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        let shape = upstream.shape();
        let (n, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut offset = 0;
        for &v in inputs {
            let c = self.value(v).shape()[1];
            if self.requires_grad(v) {
                let mut g = Vec::with_capacity(n * c * plane);
                for s in 0..n {
                    let start = (s * total + offset) * plane;
                    g.extend_from_slice(&upstream.data()[start..start + c * plane]);
                }
                out.push((v, Tensor::new(self.value(v).shape().to_vec(), g).unwrap()));
            }
            offset += c;
        }
    }

    /// Affine map `x·W + b` for x: N×F, W: F×K, b: K.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, f) = self.value(input).dims2("linear")?;
        let (wf, k) = self.value(weight).dims2("linear")?;
        if wf != f {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * k];
        gemm(
            n,
            f,
            k,
            self.value(input).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [k] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![k],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(k) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new([n, k], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            value,
            &inputs,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub(super) fn linear_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[1];
        let dy = upstream.data();
        if self.requires_grad(input) {
            let mut dx = vec![T::zero(); n * f];
            gemm(n, k, f, dy, Layout::Normal, w.data(), Layout::Transposed, &mut dx, false);
            out.push((input, Tensor::new([n, f], dx).unwrap()));
        }
        if self.requires_grad(weight) {
            let mut dw = vec![T::zero(); f * k];
            gemm(f, n, k, x.data(), Layout::Transposed, dy, Layout::Normal, &mut dw, false);
            out.push((weight, Tensor::new([f, k], dw).unwrap()));
        }
        if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
            let mut db = vec![T::zero(); k];
            for row in dy.chunks(k) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            out.push((b, Tensor::new([k], db).unwrap()));
        }
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss and
    /// the row-normalized class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let (n, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (row, &label) in z.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let probs = Tensor::new([n, k], softmax_rows(z, k))?;
        let loss = Tensor::scalar(total / T::from_f64(n as f64));
        let var = self.push_op(
            loss,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
        );
        Ok((var, probs))
    }

    pub(super) fn softmax_ce_backward(
        &self,
        logits: Var,
        labels: &[usize],
        probs: &Tensor<T>,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        if !self.requires_grad(logits) {
            return;
        }
        let k = probs.shape()[1];
        let scale = upstream.data()[0] / T::from_f64(labels.len() as f64);
        let mut d = probs.data().to_vec();
        for (row, &label) in d.chunks_mut(k).zip(labels) {
            row[label] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        out.push((logits, Tensor::new(probs.shape().to_vec(), d).unwrap()));
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let mut value = self.value(lhs).clone();
        value.add_assign(self.value(rhs))?;
        Ok(self.push_op(value, &[lhs, rhs], Op::Add { lhs, rhs }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), &[input], Op::Sum { input })
    }

    /// `Σ xᵢ·wᵢ` against constant weights of the same shape, as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.value(input).shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let total = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.push_op(
            Tensor::scalar(total),
            &[input],
            Op::WeightedSum { input, weights },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([2], vec![f32::NAN, -1.0]).unwrap());
        let y = tape.relu(x);
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn relu_of_all_negative_has_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn([2, 3], |i| -1.0 - i as f32));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_single_and_pair() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full([1, 1, 1, 1], 3.0));
        let b = tape.leaf(Tensor::full([1, 1, 1, 1], 4.0));
        let one = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(one), tape.value(a));
        let two = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(two).shape(), &[1, 2, 1, 1]);
        assert_eq!(tape.value(two).data(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.leaf(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(
            tape.concat_channels(&[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new([1], vec![0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let eye = tape.leaf(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = tape.leaf(Tensor::zeros([2]));
        let y = tape.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = tape.leaf(Tensor::zeros([3, 1]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([1, 18]));
        let (loss, probs) = tape.softmax_cross_entropy(z, &[4]).unwrap();
        assert!((tape.value(loss).data()[0] - 18f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).data()[0] - 2.8904).abs() < 1e-4);
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_gives_zero_loss() {
        let mut tape = Tape::<f32>::new();
        let mut logits = vec![0.0f32; 5];
        logits[2] = 1e4;
        let z = tape.leaf(Tensor::new([1, 5], logits).unwrap());
        let (loss, _) = tape.softmax_cross_entropy(z, &[2]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros([2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}

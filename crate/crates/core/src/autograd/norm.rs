use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

pub enum NormMode<'a, T: Real> {
    /// Normalize by batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats<T>,
        momentum: f64,
    },
    /// Normalize by the stored running statistics.
    Eval { running: &'a RunningStats<T> },
}

impl<T: Real> Tape<T> {
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        epsilon: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: self.value(input).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input).data();
        let eps = T::from_f64(epsilon);

        let (mean, var, training) = match &mode {
            NormMode::Train { .. } => {
                if count < 2 {
                    return Err(Error::DegenerateBatch { count });
                }
                let (mean, var) = channel_moments(x, n, c, plane);
                (mean, var, true)
            }
            NormMode::Eval { running } => {
                if running.channels() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        lhs: vec![c],
                        rhs: running.mean.shape().to_vec(),
                    });
                }
                (
                    running.mean.data().to_vec(),
                    running.var.data().to_vec(),
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma_v[ch] * xh + beta_v[ch];
                }
            }
        }

        if let NormMode::Train { running, momentum } = mode {
            if running.channels() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm running stats",
                    lhs: vec![c],
                    rhs: running.mean.shape().to_vec(),
                });
            }
            let m = T::from_f64(momentum);
            let keep = T::one() - m;
            let unbias = T::from_f64(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = keep * *rm + m * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = keep * *rv + m * var[ch] * unbias;
            }
        }

        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(
            value,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            },
        ))
    }

    pub(super) fn batch_norm_backward(
        &self,
        (input, gamma, beta): (Var, Var, Var),
        normalized: &[T],
        inv_std: &[T],
        training: bool,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        let shape = self.value(input).shape().to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let dy = upstream.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    sum_dy[ch] += dy[i];
                    sum_dy_xh[ch] += dy[i] * normalized[i];
                }
            }
        }
        if self.requires_grad(input) {
            let g = self.value(gamma).data();
            let count = T::from_f64((n * plane) as f64);
            let mut dx = vec![T::zero(); dy.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let scale = g[ch] * inv_std[ch];
                    for i in base..base + plane {
                        dx[i] = if training {
                            scale
                                * (dy[i] - sum_dy[ch] / count - normalized[i] * sum_dy_xh[ch] / count)
                        } else {
                            scale * dy[i]
                        };
                    }
                }
            }
            out.push((input, Tensor::new(shape, dx).unwrap()));
        }
        if self.requires_grad(gamma) {
            out.push((gamma, Tensor::new([c], sum_dy_xh).unwrap()));
        }
        if self.requires_grad(beta) {
            out.push((beta, Tensor::new([c], sum_dy).unwrap()));
        }
    }
}

/// Per-channel mean and biased variance over N, H, W.
fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            mean[ch] += x[base..base + plane].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            var[ch] += x[base..base + plane]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &mut Tape<f64>, c: usize) -> (Var, Var) {
        (
            tape.param(Tensor::full([c], 1.0)),
            tape.param(Tensor::zeros([c])),
        )
    }

    #[test]
    fn standardized_input_passes_through() {
        // Each channel: values ±1 → mean 0, biased variance 1.
        let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 2, 2, 2], data.clone()).unwrap());
        let (g, b) = affine(&mut tape, 2);
        let mut stats = RunningStats::new(2);
        let mode = NormMode::Train {
            running: &mut stats,
            momentum: BN_MOMENTUM,
        };
        let y = tape.batch_norm(x, g, b, mode, BN_EPSILON).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([3, 1, 2, 2], 7.5));
        let g = tape.param(Tensor::full([1], 2.0));
        let b = tape.param(Tensor::full([1], 0.25));
        let mut stats = RunningStats::new(1);
        let mode = NormMode::Train {
            running: &mut stats,
            momentum: BN_MOMENTUM,
        };
        let y = tape.batch_norm(x, g, b, mode, BN_EPSILON).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_element_train_batch_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 2, 1, 1], 1.0));
        let (g, b) = affine(&mut tape, 2);
        let mut stats = RunningStats::new(2);
        let mode = NormMode::Train {
            running: &mut stats,
            momentum: BN_MOMENTUM,
        };
        assert!(matches!(
            tape.batch_norm(x, g, b, mode, BN_EPSILON),
            Err(Error::DegenerateBatch { count: 1 })
        ));
        // Eval mode is fine on a single element.
        let stats = RunningStats::new(2);
        assert!(tape
            .batch_norm(x, g, b, NormMode::Eval { running: &stats }, BN_EPSILON)
            .is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut tape = Tape::new();
        // channel values 0, 2 → mean 1, biased var 1, unbiased var 2
        let x = tape.leaf(Tensor::new([2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
        let (g, b) = affine(&mut tape, 1);
        let mut stats = RunningStats::new(1);
        let mode = NormMode::Train {
            running: &mut stats,
            momentum: 0.1,
        };
        tape.batch_norm(x, g, b, mode, BN_EPSILON).unwrap();
        assert!((stats.mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((stats.var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 2], 3.0));
        let (g, b) = affine(&mut tape, 1);
        let stats = RunningStats {
            mean: Tensor::full([1], 1.0),
            var: Tensor::full([1], 4.0 - BN_EPSILON),
        };
        let y = tape
            .batch_norm(x, g, b, NormMode::Eval { running: &stats }, BN_EPSILON)
            .unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

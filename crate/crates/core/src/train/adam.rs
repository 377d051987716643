use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments for every parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: IndexMap<String, Tensor<T>>,
    pub second_moment: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON)
    }
}

impl<T: Real> OptimizerState<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            beta1,
            beta2,
            epsilon,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched; a non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("gradient for unknown `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (c1, c2) = (T::from_f64(bias1), T::from_f64(bias2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(state.epsilon));

    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("p".to_string(), Tensor::full([3], value))])
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = single(1.5);
        let mut state = OptimizerState::default();
        adam_step(&mut params, &single(0.0), &mut state, 1e-3).unwrap();
        assert_eq!(params, single(1.5));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the step is lr·|g|/(|g|+ε).
        for g in [0.3, -2.0, 1e-3] {
            let mut params = single(0.0);
            let mut state = OptimizerState::default();
            adam_step(&mut params, &single(g), &mut state, 1e-2).unwrap();
            let expected = -1e-2 * g / (g.abs() + ADAM_EPSILON);
            for &p in params["p"].data() {
                assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
                assert!((p.abs() - 1e-2).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn descends_a_parabola() {
        let mut params = IndexMap::from([("p".to_string(), Tensor::scalar(1.0f64))]);
        let mut state = OptimizerState::default();
        for _ in 0..200 {
            let p = params["p"].data()[0];
            let grads = IndexMap::from([("p".to_string(), Tensor::scalar(2.0 * p))]);
            adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        }
        assert!(params["p"].data()[0].abs() < 0.1);
    }

    #[test]
    fn nan_gradient_aborts_without_changes() {
        let mut params = single(1.0);
        let mut state = OptimizerState::default();
        let err = adam_step(&mut params, &single(f64::NAN), &mut state, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(params, single(1.0));
        assert_eq!(state.step, 0);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{PimError, Result};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Parameter::new(Tensor::zeros(shape))
    }

    /// Kaiming-uniform weights for ReLU: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Parameter::new(Tensor::new(shape.to_vec(), data).expect("shape product"))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Adam hyper-parameters and step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0 < beta1 && beta1 < 1.0) || !(0.0 < beta2 && beta2 < 1.0) {
            return Err(PimError::InvalidParameter(format!(
                "adam needs lr > 0 and betas in (0, 1); got lr={lr}, beta1={beta1}, beta2={beta2}"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
        })
    }
}

/// One bias-corrected Adam update of every parameter from its `grad`.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for p in params.iter_mut() {
        let Parameter {
            value,
            grad,
            adam_m,
            adam_v,
        } = &mut **p;
        let it = value.data_mut().iter_mut().zip(grad.data()).zip(
            adam_m
                .data_mut()
                .iter_mut()
                .zip(adam_v.data_mut().iter_mut()),
        );
        for ((x, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Parameter {
        Parameter::new(Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(0.01).unwrap();
        for _ in 0..10 {
            adam_step(&mut [&mut p], &mut s);
        }
        assert_eq!(p.value.data(), &[0.7]);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(0.001).unwrap();
        let mut prev = 0.0;
        for k in 0..500 {
            p.grad.data_mut()[0] = 2.5;
            adam_step(&mut [&mut p], &mut s);
            let x = p.value.data()[0];
            let stepsize = prev - x;
            assert!(stepsize > 0.0);
            // with a constant gradient the bias-corrected ratio is exactly 1
            assert!((stepsize - 0.001).abs() < 1e-9, "step {k}: {stepsize}");
            prev = x;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(0.01).unwrap();
        for _ in 0..2000 {
            let x = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * x;
            adam_step(&mut [&mut p], &mut s);
        }
        assert!(p.value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamState::new(0.0).is_err());
        assert!(AdamState::with_betas(1e-3, 1.0, 0.999, 1e-8).is_err());
    }
}

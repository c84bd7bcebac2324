//! Named parameter slots and the Adam update rule.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamSlot<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub adam_t: u64,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> ParamSlot<T> {
        let shape = value.shape().to_vec();
        ParamSlot {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            adam_t: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    /// One Adam step with bias correction. The caller zeroes the gradient
    /// afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, epsilon: f64) {
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let b1 = T::from_f64(beta1);
        let b2 = T::from_f64(beta2);
        let lr = T::from_f64(lr);
        let eps = T::from_f64(epsilon);
        let m_corr = T::ONE / (T::ONE - b1.powi(t));
        let v_corr = T::ONE / (T::ONE - b2.powi(t));
        let value = self.value.as_mut_slice();
        let grad = self.grad.as_slice();
        let m = self.adam_m.as_mut_slice();
        let v = self.adam_v.as_mut_slice();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::ONE - b1) * g;
            v[i] = b2 * v[i] + (T::ONE - b2) * g * g;
            let m_hat = m[i] * m_corr;
            let v_hat = v[i] * v_corr;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

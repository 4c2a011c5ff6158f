use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |_| params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, first: zeros(()), second: zeros(()) }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Validation(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let step_size = T::from_f64_lossy(lr * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
        let eps_hat = T::from_f64_lossy(c.eps * (1.0 - c.beta2.powf(t)).sqrt());
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let mut params = ParamSet::<f64>::default();
        params.push("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig::default(), &params);
        let g = Tensor::from_vec(&[3], vec![0.3, -7.0, 1e-3]).unwrap();
        opt.update(&mut params, &[g], 0.01).unwrap();
        let w = params.get(0).data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert!((w[2] - 0.49).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::default();
        params.push("w", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..3000 {
            let g = params.get(0).map(|w| 2.0 * w);
            opt.update(&mut params, &[g], 0.05).unwrap();
        }
        assert!(params.get(0).max_abs() < 1e-3);
    }
}

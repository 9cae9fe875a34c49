use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

/// Decoupled-weight-decay Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One update with learning rate `lr`. `decay[i]` selects which tensors
    /// receive weight decay (biases and norms usually do not).
    pub fn update(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[&Tensor<T>],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let wd = if decay.get(i).copied().unwrap_or(false) {
                T::lit(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w - wd * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut params = vec![Tensor::from_vec(vec![1.0f64, -1.0])];
        let grad = Tensor::from_vec(vec![0.3, -2.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        opt.update(&mut params, &[&grad], &[true], 0.1).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((params[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![3.0f64])];
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        for _ in 0..2000 {
            let g = params[0].map(|x| 2.0 * (x - 1.0));
            opt.update(&mut params, &[&g], &[false], 0.01).unwrap();
        }
        assert!((params[0].data()[0] - 1.0).abs() < 1e-3);
    }
}

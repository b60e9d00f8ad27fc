use ndarray::Zip;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "adam: state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::config(format!(
                    "adam: tensor {i} expected shape {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p.array_mut())
                .and(g.array())
                .and(m.array_mut())
                .and(v.array_mut())
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Tensor::row_vector(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn constant_gradient_step_approaches_learning_rate() {
        // m_hat -> g and v_hat -> g^2, so each step moves lr * g / |g| = lr.
        let lr = 0.01;
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &[&p]);
        let mut last = 0.0;
        let mut delta = 0.0;
        for _ in 0..5000 {
            adam.step(&mut [&mut p], &[Tensor::scalar(2.5)]).unwrap();
            let now = p.item().unwrap();
            delta = now - last;
            last = now;
        }
        assert!((delta.abs() - lr).abs() < 1e-6 * lr, "delta {delta}");
        assert!(delta < 0.0);
    }

    #[test]
    fn identical_calls_are_identical() {
        let run = || {
            let mut p = Tensor::row_vector(&[0.2, 0.4]);
            let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[&p]);
            adam.step(&mut [&mut p], &[Tensor::row_vector(&[0.3, -1.0])]).unwrap();
            (p, adam)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut p = Tensor::row_vector(&[0.2, 0.4]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        let err = adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(adam.steps_taken(), 0);
    }
}

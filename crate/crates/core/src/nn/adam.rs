use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("adam: parameter count changed".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(
                    "adam: gradient shape differs from parameter".into(),
                ));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(1, 2, vec![0.3, -1.0]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p[0].data(), &[0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &p);
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-7,
        };
        let mut p = vec![Tensor::new(1, 3, vec![0.5, -0.2, 2.0]).unwrap()];
        let mut adam = AdamState::new(cfg, &p);
        let mut x = [0.5f64, -0.2, 2.0];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for t in 1..=100 {
            let g: Vec<f64> = x.iter().map(|xi| 2.0 * xi - 0.1 * t as f64).collect();
            adam.step(&mut p, &[Tensor::new(1, 3, g.clone()).unwrap()])
                .unwrap();
            for i in 0..3 {
                m[i] = 0.8 * m[i] + 0.2 * g[i];
                v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.8f64.powi(t));
                let vh = v[i] / (1.0 - 0.99f64.powi(t));
                x[i] -= 0.01 * mh / (vh.sqrt() + 1e-7);
            }
        }
        for i in 0..3 {
            assert!((p[0].data()[i] - x[i]).abs() < 1e-12);
        }
    }
}

//! AdamW with decoupled weight decay over flat parameter slices.

use serde::{Deserialize, Serialize};

/// A trainable tensor viewed as a flat slice.
pub struct ParamSlot<'a> {
    pub data: &'a mut [f64],
    /// Whether decoupled weight decay applies (weights yes; biases and centers no).
    pub decay: bool,
    /// Multiplier on the learning rate for this tensor.
    pub lr_scale: f64,
}

impl<'a> ParamSlot<'a> {
    pub fn new(data: &'a mut [f64], decay: bool) -> Self {
        Self {
            data,
            decay,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update. `params` and `grads` must list tensors in the same order
    /// on every call.
    pub fn step(&mut self, lr: f64, params: Vec<ParamSlot<'_>>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient lists differ");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "optimizer state does not match parameters");
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((slot, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            assert_eq!(slot.data.len(), g.len());
            let lr = lr * slot.lr_scale;
            for i in 0..g.len() {
                if slot.decay && weight_decay > 0.0 {
                    slot.data[i] -= lr * weight_decay * slot.data[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                slot.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![1.0, -1.0];
        opt.step(0.1, vec![ParamSlot::new(&mut p, true)], &[&[2.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(0.01, vec![ParamSlot::new(&mut p, false)], &[&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}

use serde::{Deserialize, Serialize};

use super::tensor::Param;
use crate::error::{Error, Result};

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightDecay {
    /// `w ← w − lr·wd·w` applied outside the adaptive step.
    Decoupled,
    /// `wd·w` added to the gradient before the moment updates.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
            decay_mode: WeightDecay::Decoupled,
        }
    }
}

/// Step learning-rate schedule: `base · γ^⌊epoch / step⌋`, epochs counted from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            step_size: 20,
            gamma: 0.5,
        }
    }
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (p, (m, _)) in params.iter().zip(&self.moments) {
            if p.value.len() != m.len() {
                return Err(Error::shape(&[m.len()], p.value.shape()));
            }
        }
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            let grad = p.grad.data().to_vec();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let mut g = grad[k];
                match c.decay_mode {
                    WeightDecay::L2 => g += c.weight_decay * w[k],
                    WeightDecay::Decoupled => w[k] -= lr * c.weight_decay * w[k],
                }
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                w[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut p = Param::new("w", Tensor::vector(vec![2.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p], 1e-2).unwrap();
        assert_eq!(p.value.data(), &[2.0 * (1.0 - 1e-7), -(1.0 - 1e-7)]);
    }

    #[test]
    fn descends_on_square() {
        let mut p = Param::new("w", Tensor::vector(vec![1.0]));
        let mut opt = Adam::new(AdamConfig::default());
        p.grad = Tensor::vector(vec![2.0]);
        opt.step(vec![&mut p], 1e-4).unwrap();
        assert!(p.value.data()[0] < 1.0);
        // First bias-corrected step has magnitude lr.
        assert!((1.0 - p.value.data()[0] - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn buffers_are_untouched() {
        let mut p = Param::buffer("stat", Tensor::vector(vec![3.0]));
        p.grad = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p], 1.0).unwrap();
        assert_eq!(p.value.data(), &[3.0]);
    }

    #[test]
    fn changed_parameter_set_is_an_error() {
        let mut a = Param::new("a", Tensor::vector(vec![1.0]));
        let mut b = Param::new("b", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut a], 1e-3).unwrap();
        assert!(opt.step(vec![&mut b], 1e-3).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = StepSchedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(19), 1e-4);
        assert_eq!(s.lr_at(20), 5e-5);
        assert!((s.lr_at(40) - 2.5e-5).abs() < 1e-20);
    }
}

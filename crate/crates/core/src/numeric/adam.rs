use serde::{Deserialize, Serialize};

use super::{NumericError, Tensor};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `wd·θ` is added to the gradient before the moment update.
    #[default]
    L2,
    /// `θ ← θ − lr·wd·θ` applied separately from the adaptive step.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_mode: WeightDecayMode::L2,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericError::Config(format!(
                "invalid Adam settings {self:?}"
            )))
        }
    }
}

/// Moment estimates for one list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<Self, NumericError> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second_moment[index]
    }

    /// Resets the moments of one parameter, e.g. after it was reinitialized with a new shape.
    pub fn reset_slot(&mut self, index: usize, numel: usize) {
        self.first_moment[index] = vec![0.0; numel];
        self.second_moment[index] = vec![0.0; numel];
    }

    /// One Adam update using the gradients stored on `params`; gradients are consumed.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NumericError> {
        if params.len() != self.first_moment.len() {
            return Err(NumericError::Shape(format!(
                "adam_step: state tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(NumericError::MissingGradient(i));
            }
            if p.numel() != self.first_moment[i].len() {
                return Err(NumericError::Shape(format!(
                    "adam_step: parameter {i} has shape {:?} but moments hold {} values",
                    p.shape(),
                    self.first_moment[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            decay_mode,
        } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad().expect("checked above");
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let g = match decay_mode {
                    WeightDecayMode::L2 => grad[j] + wd * *theta,
                    WeightDecayMode::Decoupled => grad[j],
                };
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if decay_mode == WeightDecayMode::Decoupled {
                    *theta -= lr * wd * *theta;
                }
                *theta -= update;
            }
        }
        Ok(())
    }
}

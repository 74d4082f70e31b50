use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

/// Which step count drives AdamW bias correction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCounter {
    /// Each parameter counts only the iterations it was updated in.
    #[default]
    PerLayer,
    /// Every parameter uses the global iteration count.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_counter: StepCounter,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_counter: StepCounter::PerLayer,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.warmup_frac)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }
}

/// Linear warmup to `base` followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_frac: f64, total_steps: usize) -> Self {
        Self {
            base,
            warmup_steps: (warmup_frac * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    /// Rate used at zero-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step);
        self.base * left as f64 / span as f64
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
}

/// SGD or AdamW over a parameter store. State is allocated the first time a
/// parameter is updated and left untouched while its layer is frozen.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Option<Slot>>,
    global_steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: Vec::new(),
            global_steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Update count of parameter `index`, if it was ever updated.
    pub fn steps_of(&self, index: usize) -> Option<u64> {
        self.slots
            .get(index)
            .and_then(|s| s.as_ref())
            .map(|s| s.steps)
    }

    /// Applies one update with rate `lr` to every update-enabled parameter
    /// that holds a gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) {
        self.global_steps += 1;
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        let c = &self.config;
        for (id, p) in params.iter_mut() {
            if !p.update_enabled {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let slot = self.slots[id.0].get_or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                steps: 0,
            });
            slot.steps += 1;
            let data = p.tensor.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    let lr = lr as f32;
                    data.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
                }
                OptimizerKind::AdamW => {
                    let t = match c.step_counter {
                        StepCounter::PerLayer => slot.steps,
                        StepCounter::Global => self.global_steps,
                    } as i32;
                    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let step = (lr / bc1) as f32;
                    let bc2_sqrt = bc2.sqrt() as f32;
                    let decay = (lr * c.weight_decay) as f32;
                    let eps = c.eps as f32;
                    for (i, w) in data.iter_mut().enumerate() {
                        let g = grad[i];
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                        *w -= decay * *w;
                        *w -= step * slot.m[i] / (slot.v[i].sqrt() / bc2_sqrt + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new([2], vec![1.0, -2.0]).unwrap(), 0);
        s.add("b.weight", Tensor::new([1], vec![3.0]).unwrap(), 1);
        s
    }

    #[test]
    fn lr_warmup_then_decay() {
        let s = LrSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.at(0) - 0.1).abs() < 1e-12);
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!((s.at(10) - 1.0).abs() < 1e-12);
        assert!((s.at(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.at(100), 0.0);
    }

    #[test]
    fn sgd_step() {
        let mut p = store();
        for (_, q) in p.iter_mut() {
            let n = q.tensor.numel();
            q.tensor.set_grad(vec![1.0; n]).unwrap();
        }
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.step(&mut p, 0.5);
        assert_eq!(p.get(crate::ParamId(0)).tensor.data(), &[0.5, -2.5]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = store();
        p.get_mut(crate::ParamId(0))
            .tensor
            .set_grad(vec![0.3, -4.0])
            .unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.step(&mut p, 0.01);
        let w = p.get(crate::ParamId(0)).tensor.data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_keep_state() {
        let mut p = store();
        for (_, q) in p.iter_mut() {
            let n = q.tensor.numel();
            q.tensor.set_grad(vec![1.0; n]).unwrap();
        }
        p.set_layer_enabled(1, false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.step(&mut p, 0.1);
        assert_eq!(p.get(crate::ParamId(1)).tensor.data(), &[3.0]);
        assert_eq!(opt.steps_of(1), None);
        assert_eq!(opt.steps_of(0), Some(1));
    }
}

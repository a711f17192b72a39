use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr_max;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments plus the learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub schedule: CosineSchedule,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(schedule: CosineSchedule) -> Self {
        OptimizerState {
            hyper: AdamHyper::default(),
            schedule,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One bias-corrected Adam update of every parameter in `grads`, at the
    /// scheduled learning rate for the current step. Returns the rate used.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter '{name}'")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("'{name}': parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
                ));
            }
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(lr: f64) -> CosineSchedule {
        CosineSchedule { lr_max: lr, lr_min: lr / 100.0, total_steps: 10 }
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule(0.1);
        assert_eq!(s.lr(0), 0.1);
        assert!((s.lr(10) - 0.001).abs() < 1e-15);
        assert!((s.lr(5) - 0.0505).abs() < 1e-12);
        assert!(s.lr(3) > s.lr(4));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let before = params.clone();
        let mut opt = OptimizerState::new(schedule(0.1));
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
        for _ in 0..3 {
            opt.adam_step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn descends_on_square() {
        // f(w) = w^2 at w = 1 has gradient 2, so w must decrease.
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(CosineSchedule { lr_max: 0.1, lr_min: 0.0, total_steps: 100 });
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0))]);
        opt.adam_step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().item();
        assert!(w < 1.0);
        // first bias-corrected Adam step moves by lr * sign(g)
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = OptimizerState::new(schedule(0.1));
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![3]))]);
        assert!(opt.adam_step(&mut params, &grads).is_err());
    }
}

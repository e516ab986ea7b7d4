//! AdamW with decoupled weight decay and a step-halving learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub lr_halving_period_epochs: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_halving_period_epochs: 20,
            epochs: 150,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("optimizer.{k} must be positive, got {v}")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer.weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(Error::Config("optimizer.lr_halving_period_epochs must be positive".into()));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer.{k} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// lr0 * 2^-(epoch / period), with integer division.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.lr_halving_period_epochs) as i32;
        self.lr * 2f64.powi(-halvings)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient slot. Parameters
    /// without a slot are not touched, not even by weight decay.
    pub fn step<T: Clone>(&mut self, store: &mut ParamStore<T>, grads: &Gradients, lr: f64) {
        let n = store.len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(crate::params::ParamId(i)) else { continue };
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= 1.0 - lr * c.weight_decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_schedule() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr_at(0), 1e-5);
        assert_eq!(c.lr_at(19), 1e-5);
        assert_eq!(c.lr_at(20), 5e-6);
        assert_eq!(c.lr_at(40), 2.5e-6);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s: ParamStore<()> = ParamStore::new();
        let a = s.add("a", vec![2], (), vec![1.0, -1.0]);
        s.add("b", vec![1], (), vec![3.0]);
        let mut g = Gradients::masked(&s, |p| p.name == "a");
        g.slot(a).unwrap().copy_from_slice(&[2.0, -0.5]);
        let mut opt = AdamW::new(OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() });
        opt.step(&mut s, &g, 0.1);
        let v = s.value(a);
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.params()[1].value, vec![3.0]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig { lr: 0.0, ..OptimizerConfig::default() }.validate().is_err());
        assert!(OptimizerConfig { lr_halving_period_epochs: 0, ..OptimizerConfig::default() }.validate().is_err());
    }
}

//! Adaptive-moment optimizer over named parameters.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily the first time a
/// parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter in `names` that has a gradient in `grads`.
    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, names: &[String]) -> Result<usize> {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut updated = 0;
        for name in names {
            let Some(var) = store.get(name) else { continue };
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let step = (m.affine(1.0 / c1, 0.0)? / (v.affine(1.0 / c2, 0.0)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (step * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
            updated += 1;
        }
        Ok(updated)
    }

    /// Moments as `(name, first, second)` for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.moments.iter().map(|(n, (m, v))| (n, m, v))
    }

    pub fn restore(&mut self, steps: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.steps = steps;
        self.moments = moments;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar_f64, Init};
    use candle_core::DType;

    #[test]
    fn minimizes_quadratic_and_matches_hand_step() {
        let mut store = ParamStore::new(0, DType::F64);
        store.root().param("x", 1, Init::Ones).unwrap();
        let names = vec!["x".to_string()];
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        let x = store.get("x").unwrap().clone();
        // first step moves by exactly lr in the direction of -sign(g)
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&store, &loss.backward().unwrap(), &names).unwrap();
        let after = scalar_f64(&x.as_tensor().sum_all().unwrap()).unwrap();
        assert!((after - 0.9).abs() < 1e-7, "{after}");
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap(), &names).unwrap();
        }
        let end = scalar_f64(&x.as_tensor().sum_all().unwrap()).unwrap();
        assert!(end.abs() < 0.05, "{end}");
    }
}

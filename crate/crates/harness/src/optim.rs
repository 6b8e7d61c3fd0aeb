//! Adam with decoupled weight decay, global-norm clipping and step decay.

use std::collections::BTreeMap;

use clipseg_core::ParamStore;
use clipseg_tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";
const STEPS: &str = "adam.steps";

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. `lr` gives the rate of each parameter by name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: impl Fn(&str) -> f64) -> Result<()> {
        self.steps += 1;
        let b1 = 1.0 - self.beta1.powi(self.steps as i32);
        let b2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(HarnessError::Config(format!(
                    "gradient of {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let rate = lr(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / b1) / ((vd[i] / b2).sqrt() + self.eps);
                *x -= rate * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }

    /// Moments and step count as named tensors for a checkpoint.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{M_PREFIX}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{V_PREFIX}{k}"), t.clone());
        }
        out.insert(STEPS.into(), Tensor::scalar(self.steps as f64));
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.steps = 0;
        for (k, t) in state {
            if let Some(name) = k.strip_prefix(M_PREFIX) {
                self.m.insert(name.into(), t.clone());
            } else if let Some(name) = k.strip_prefix(V_PREFIX) {
                self.v.insert(name.into(), t.clone());
            } else if k == STEPS {
                self.steps = t.item() as u64;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Rate multiplier at `iteration` of `total`: `factor` per passed milestone.
pub fn decay_multiplier(iteration: usize, total: usize, milestones: &[f64], factor: f64) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&f| iteration >= (f * total as f64).round() as usize)
        .count();
    factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(v));
        s
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = store(vec![1.0, -2.0]);
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(vec![0.3, 0.4]));
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 1e-4);
        adam.step(&mut p, &g, |_| 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_rate() {
        // bias correction makes the first update exactly sign(g) * lr (up to eps)
        let mut p = store(vec![1.0, -2.0]);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(vec![0.3, -5.0]));
        let mut adam = Adam::new(0.9, 0.999, 1e-12, 0.0);
        adam.step(&mut p, &g, |_| 0.01).unwrap();
        let w = p.get("w").unwrap().data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 1.99).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = store(vec![3.0, -1.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().clone();
            let mut g = BTreeMap::new();
            g.insert("w".to_string(), w.scale(2.0));
            adam.step(&mut p, &g, |_| 0.01).unwrap();
        }
        assert!(p.get("w").unwrap().norm_sq() < 1e-4);
    }

    #[test]
    fn state_round_trip() {
        let mut p = store(vec![1.0]);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(vec![0.5]));
        let mut a = Adam::new(0.9, 0.999, 1e-8, 0.0);
        a.step(&mut p, &g, |_| 0.1).unwrap();
        let mut b = Adam::new(0.9, 0.999, 1e-8, 0.0);
        b.load_state(&a.state()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_and_decay() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 0.1), 5.0);
        assert!((grad_norm(&g) - 0.1).abs() < 1e-6);
        let m = [0.6, 0.9];
        assert_eq!(decay_multiplier(0, 100, &m, 0.1), 1.0);
        assert_eq!(decay_multiplier(59, 100, &m, 0.1), 1.0);
        assert!((decay_multiplier(60, 100, &m, 0.1) - 0.1).abs() < 1e-15);
        assert!((decay_multiplier(95, 100, &m, 0.1) - 0.01).abs() < 1e-15);
    }
}

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::params::{round_f32, ParameterStore};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient anywhere aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        for id in store.ids() {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let (value, m, v, grad) = store.moments_mut(id);
            Zip::from(value).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = round_f32(*p - lr * m_hat / (v_hat.sqrt() + eps));
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Mat;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParameterStore::new();
        let id = s.add("w", Mat::from_elem((2, 3), 0.25));
        let mut adam = Adam::default();
        adam.step(&mut s).unwrap();
        assert!(s.value(id).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut s = ParameterStore::new();
        let id = s.add("w", Mat::zeros((1, 1)));
        s.accumulate_grad(id, &Mat::from_elem((1, 1), 1.0));
        Adam::new(0.001).step(&mut s).unwrap();
        assert!((s.value(id)[[0, 0]] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParameterStore::new();
        let id = s.add("w", Mat::from_elem((1, 1), 1.0));
        let mut adam = Adam::new(0.01);
        let mut prev = 1.0f64;
        for step in 0..80 {
            s.zero_grads();
            let w = s.value(id)[[0, 0]];
            s.accumulate_grad(id, &Mat::from_elem((1, 1), 2.0 * w));
            adam.step(&mut s).unwrap();
            let now = s.value(id)[[0, 0]].abs();
            if step >= 5 {
                assert!(now < prev, "step {step}: {now} >= {prev}");
            }
            prev = now;
        }
        assert!(prev < 0.4);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut s = ParameterStore::new();
        let id = s.add("w", Mat::zeros((1, 2)));
        s.accumulate_grad(id, &Mat::from_elem((1, 2), f64::NAN));
        assert!(matches!(Adam::default().step(&mut s), Err(Error::NonFiniteGradient(_))));
        assert!(s.value(id).iter().all(|&v| v == 0.0));
    }
}

use indexmap::IndexMap;

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    /// Zeroed moments for every trainable parameter of `store`.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let n = p.tensor.numel();
                (name.to_string(), (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update of every tracked parameter. All gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        for name in self.moments.keys() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
            let p = store.tensor(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(name.clone(), p.shape(), g.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, (m, v)) in &mut self.moments {
            let g = grads[name].data();
            let p = store.tensor_mut(name)?.data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

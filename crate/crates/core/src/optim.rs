//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of parameters that have optimizer moments allocated.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Applies one update to every trainable parameter. Frozen parameters are
    /// skipped and keep their exact values.
    pub fn step<T: Element>(&mut self, params: &mut [&mut Parameter<T>], grads: &Gradients<T>) -> Result<()> {
        for p in params.iter() {
            if p.trainable && !grads.contains(&p.name) {
                return Err(Error::contract(format!("no gradient for trainable parameter '{}'", p.name)));
            }
        }
        self.steps += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let grad = grads.get(&p.name).expect("checked above");
            if grad.shape() != p.shape() {
                return Err(Error::shape("adamw_step", grad.shape(), p.shape()));
            }
            let n = p.tensor.numel();
            let moments = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut data: Vec<T> = p.data().to_vec();
            for (((w, g), m), v) in data.iter_mut().zip(grad.data()).zip(&mut moments.m).zip(&mut moments.v) {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                let mut value = w.as_f64();
                value -= lr * weight_decay * value;
                value -= lr * m_hat / (v_hat.sqrt() + eps);
                *w = T::from_f64(value);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f32` next to the
/// parameters; the per-step arithmetic is done in `f64` and rounded once.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<f32>>,
    second: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor in `params`. Every parameter must
    /// have a same-shaped gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Gradients<f32>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

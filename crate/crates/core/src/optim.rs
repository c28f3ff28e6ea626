//! Adam with explicit, checkpointable moment buffers.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.5,
            beta2: 0.999,
            eps: default_eps(),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings for {name}: {self:?}")));
        }
        Ok(())
    }
}

pub struct Adam {
    config: AdamConfig,
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &[(String, Var)], config: AdamConfig) -> Result<Self> {
        let zeros = params
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: params.to_vec(),
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * beta1)? + (grad * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (grad.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let delta = ((m_hat / (v_hat.sqrt()? + eps)?)? * learning_rate)?;
            var.set(&(var.as_tensor() - delta)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment buffers keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("m.{name}"), self.first[i].clone()));
            out.push((format!("v.{name}"), self.second[i].clone()));
        }
        out
    }

    pub fn state_keys(&self) -> Vec<String> {
        self.state().into_iter().map(|(k, _)| k).collect()
    }

    /// Restores moments and the step counter. `lookup` returns the stored
    /// tensor for a key; every key of [`Adam::state_keys`] must be present.
    pub fn load_state(
        &mut self,
        steps: u64,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> std::result::Result<(), Vec<String>> {
        let mut missing = Vec::new();
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{name}");
                match lookup(&key) {
                    Some(t) if t.dims() == var.dims() => *slot = t,
                    _ => missing.push(key),
                }
            }
        }
        if missing.is_empty() {
            self.steps = steps;
            Ok(())
        } else {
            Err(missing)
        }
    }
}

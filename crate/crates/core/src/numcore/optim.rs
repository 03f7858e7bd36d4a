use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the cosine schedule decays to zero.
    pub total_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.0e-4,
            weight_decay: 1.0e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.total_steps > 0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .canonical()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
                .collect::<BTreeMap<_, _>>()
        };
        OptimState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Cosine-annealed learning rate at step `s`.
    pub fn lr_at(&self, s: u64) -> f64 {
        let frac = (s.min(self.config.total_steps)) as f64 / self.config.total_steps as f64;
        self.config.lr * 0.5 * (1.0 + (PI * frac).cos())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }
}

/// One decoupled-weight-decay Adam update of every canonical parameter.
///
/// Every canonical parameter must carry a gradient buffer.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState) -> Result<()> {
    for (name, t) in store.canonical() {
        if t.grad.is_none() {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }
        match state.first.get(name) {
            Some(m) if m.len() == t.len() => {}
            _ => {
                return Err(Error::contract(format!(
                    "optimizer state does not cover parameter {name}"
                )))
            }
        }
    }
    let clip_scale = match state.config.grad_clip {
        Some(max_norm) => {
            let norm = store
                .canonical()
                .flat_map(|(_, t)| t.grad.as_deref().unwrap_or(&[]).iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    let cfg = state.config.clone();
    let lr = state.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in store.canonical_mut() {
        let grad = param.grad.take().expect("checked above");
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("checked above");
        let data = param.data_mut();
        for k in 0..data.len() {
            let g = grad[k] * clip_scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            data[k] *= 1.0 - lr * cfg.weight_decay;
            data[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        param.grad = Some(grad);
    }
    state.step += 1;
    Ok(())
}

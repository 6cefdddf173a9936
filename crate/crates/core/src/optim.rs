//! AdamW with decoupled weight decay and exportable moments.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;

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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moments per parameter name plus the update count.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut opt = Self {
            config,
            state: AdamWState {
                step: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        };
        opt.reset(params)?;
        Ok(opt)
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    /// Zero all moments and the step counter.
    pub fn reset(&mut self, params: &ParamStore) -> Result<()> {
        self.state.step = 0;
        self.state.m.clear();
        self.state.v.clear();
        for (name, var) in params.iter() {
            let z = var.as_tensor().zeros_like()?;
            self.state.m.insert(name.to_string(), z.clone());
            self.state.v.insert(name.to_string(), z);
        }
        Ok(())
    }

    /// Replace moments with `state`; every parameter must have matching entries.
    pub fn load_state(&mut self, params: &ParamStore, state: AdamWState) -> Result<()> {
        for (name, var) in params.iter() {
            for (kind, map) in [("m", &state.m), ("v", &state.v)] {
                let t = map.get(name).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer moment {kind} missing for `{name}`"))
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::ShapeMismatch {
                        context: "optimizer moment",
                        left: var.dims().to_vec(),
                        right: t.dims().to_vec(),
                    });
                }
            }
        }
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter()
                .map(|(k, t)| Ok((k, t.to_dtype(params.dtype())?)))
                .collect()
        };
        self.state = AdamWState {
            step: state.step,
            m: cast(state.m)?,
            v: cast(state.v)?,
        };
        Ok(())
    }

    /// One update from `grads`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.state.m.get_mut(name).expect("moments cover every parameter");
            *m = ((&*m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = self.state.v.get_mut(name).expect("moments cover every parameter");
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor();
            let decayed = (p * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
        }
        Ok(())
    }
}

/// Global L2 norm over every parameter gradient present in `grads`.
pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += ops::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

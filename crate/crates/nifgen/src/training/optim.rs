//! Optimizer and weight averaging. The update is Adam with decoupled weight
//! decay and global-norm gradient clipping; state (first/second moments and
//! the step counter) serializes into checkpoints so a resumed run continues
//! bit-identically.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; gradients are rescaled, not clamped
    /// element-wise. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Collect the gradients of a backward pass into a name-keyed map, so they
/// can be scaled and merged across passes before the optimizer sees them.
/// Parameters without a gradient are simply absent.
pub fn grads_to_map(ps: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, var) in ps.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

/// Global L2 norm over a gradient map, accumulated in f64.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sumsq = 0f64;
    for g in grads.values() {
        sumsq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sumsq.sqrt())
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only parameters present in `grads` move; their
    /// moments are created lazily. Returns the pre-clip global gradient
    /// norm. Non-finite gradients abort before any weight changes.
    pub fn step(&mut self, ps: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let var = ps
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if g.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.dims(),
                    var.dims()
                )));
            }
            let g = g.affine(scale, 0.0)?;
            let m_old = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_old = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_old.affine(self.cfg.beta1, 0.0))? + g.affine(1.0 - self.cfg.beta1, 0.0)?)?;
            let v = ((v_old.affine(self.cfg.beta2, 0.0))?
                + g.sqr()?.affine(1.0 - self.cfg.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let w = var.as_tensor();
            let decayed = w.affine(1.0 - self.cfg.lr * self.cfg.weight_decay, 0.0)?;
            let new = (decayed - update.affine(self.cfg.lr, 0.0)?)?;
            var.set(&new)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moment tensors under `m.`/`v.` prefixes, for checkpointing.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.m {
            out.insert(format!("m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("v.{name}"), t.clone());
        }
        out
    }

    /// Restore moments and step counter saved by [`Self::state_tensors`].
    pub fn restore(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (key, t) in state {
            if let Some(name) = key.strip_prefix("m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = key.strip_prefix("v.") {
                self.v.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unrecognized optimizer state key {key}")));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} first moments but {} second moments",
                self.m.len(),
                self.v.len()
            )));
        }
        self.step = step;
        Ok(())
    }
}

/// Exponential moving average of the weights:
/// `ema_t = d·ema_{t-1} + (1-d)·w_t`. Tracks every parameter in the store.
pub struct Ema {
    decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(ps: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        // Copy rather than alias: the store's tensors share storage with the
        // live variables, and the shadow must keep its own values once the
        // optimizer starts moving the weights in place.
        let mut shadow = BTreeMap::new();
        for (name, var) in ps.vars() {
            shadow.insert(name.clone(), var.as_tensor().copy()?.detach());
        }
        Ok(Self { decay, shadow })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update(&mut self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.vars() {
            let prev = self
                .shadow
                .get(name)
                .ok_or_else(|| Error::Config(format!("ema has no entry for parameter {name}")))?;
            // Detach the result: the blend touches a live variable, and a
            // tracked shadow would chain every update's graph onto the next,
            // growing memory without bound over a training run.
            let next = (prev.affine(self.decay, 0.0)?
                + var.as_tensor().affine(1.0 - self.decay, 0.0)?)?
                .detach();
            self.shadow.insert(name.clone(), next);
        }
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn restore(&mut self, shadow: BTreeMap<String, Tensor>) {
        self.shadow = shadow;
    }
}

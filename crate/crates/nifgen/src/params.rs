//! Trainable-parameter registry with deterministic initialization.
//!
//! Every module's weights live in a [`ParamStore`] keyed by a dotted path
//! (`renderer.block0.attn.qkv.weight`). Initial values are a pure function
//! of `(master seed, parameter name)`, so construction order, refactors, and
//! partial rebuilds never change what a given parameter starts as. The
//! optimizer updates parameters in place through [`candle_core::Var`], and
//! checkpoint restore overwrites them the same way, so model structs built
//! against a store keep seeing current values without being rebuilt.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a, Stream};

/// How to fill a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±1/sqrt(fan_in)`, the usual default for linear and
    /// convolution weights (and their biases).
    FanInUniform(usize),
    Normal { std: f64 },
    /// Normal resampled until within `±2·std`; used for embedding tables
    /// and attention bias tables.
    TruncNormal { std: f64 },
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            seed,
            dtype,
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create parameter `name` and return a tensor view of it. The returned
    /// tensor shares storage with the stored [`Var`]: optimizer updates and
    /// checkpoint restores are visible through it immediately.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` created twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng: ChaCha8Rng =
            rand::SeedableRng::seed_from_u64(derive_seed(self.seed, Stream::ParamInit as u64, fnv1a(name)));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v = dist.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let view = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(view)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// All `(name, var)` pairs in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Snapshot of all parameters as plain tensors (detached copies are not
    /// needed: Vars are leaves, so these tensors carry no graph).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite parameters from a checkpoint map. Every stored parameter
    /// must be present with a matching shape; extra entries in `map` are
    /// rejected so weight files and configs cannot drift apart silently.
    pub fn restore(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        for name in map.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint contains unknown parameter `{name}`"
                )));
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Linear layer `in_dim → out_dim` with fan-in uniform init.
pub fn linear(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = ps.var(&format!("{name}.weight"), &[out_dim, in_dim], Init::FanInUniform(in_dim))?;
    let b = ps.var(&format!("{name}.bias"), &[out_dim], Init::FanInUniform(in_dim))?;
    Ok(Linear::new(w, Some(b)))
}

/// Linear layer with zero weight and a constant bias; used for output heads
/// that must start at a known value and for gates that must start closed.
pub fn linear_zero(
    ps: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: f64,
) -> Result<Linear> {
    let w = ps.var(&format!("{name}.weight"), &[out_dim, in_dim], Init::Zeros)?;
    let b = ps.var(&format!("{name}.bias"), &[out_dim], Init::Const(bias))?;
    Ok(Linear::new(w, Some(b)))
}

/// Layer normalization over the last dimension with learned affine.
///
/// Written out with primitive tensor ops on purpose: the fused library
/// kernel registers no backward pass, which still trains the affine weights
/// but silently freezes every parameter behind the normalization boundary.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn layer_norm(ps: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = ps.var(&format!("{name}.weight"), &[dim], Init::Const(1.0))?;
    let b = ps.var(&format!("{name}.bias"), &[dim], Init::Zeros)?;
    Ok(LayerNorm { weight: w, bias: b, eps: 1e-6 })
}

/// Numerically stable softmax over the last dimension, from primitive ops
/// for the same reason as [`LayerNorm`]: the fused kernel severs gradients.
/// The subtracted row maximum is detached, which changes neither the value
/// nor the derivative. Rows may contain `-inf` entries (masked pairs) as
/// long as at least one entry per row is finite.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let m = x.max_keepdim(last)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(last)?;
    Ok(e.broadcast_div(&s)?)
}

/// RMS normalization over the last dimension: `x / sqrt(mean(x²) + eps) · w`.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    weight: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.var(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let ms = x.sqr()?.mean_keepdim(last)?;
        let denom = (ms + self.eps)?.sqrt()?;
        Ok(x.broadcast_div(&denom)?.broadcast_mul(&self.weight)?)
    }
}

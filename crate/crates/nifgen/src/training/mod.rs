//! Two-stage training: first the continuous autoencoder with feature
//! distillation, then the text-conditioned velocity model on top of the
//! frozen first stage. Submodules hold the optimizer, datasets, batch
//! construction, latent statistics, metrics logging, and the two loops.

mod batch;
mod dataset;
mod metrics;
mod optim;
mod stage1;
mod stage2;
mod stats;

pub use batch::{make_stage1_batch, Stage1Batch};
pub use dataset::{Dataset, DirDataset, Sample, SyntheticShapes};
pub use metrics::MetricsWriter;
pub use optim::{grad_norm, grads_to_map, AdamW, AdamWConfig, Ema};
pub use stage1::{
    run_stage1, stage1_step, Stage1Metrics, Stage1Models, Stage1RunReport, LATENT_STATS,
    STAGE1_CHECKPOINT, STAGE1_CONFIG_ECHO, STAGE1_METRICS,
};
pub use stage2::{
    load_stage1_weights, run_stage2, split_stage2_checkpoint, stage2_step, FrozenStage1,
    Stage2Metrics, Stage2Models,
    Stage2RunReport, STAGE2_CHECKPOINT, STAGE2_CONFIG_ECHO, STAGE2_METRICS,
};
pub use stats::{compute_latent_stats, LatentAccumulator};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{EncoderConfig, RendererConfig};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::flowmatch::TimestepShiftConfig;
use crate::guidance::DistillConfig;

/// Everything a stage-1 run needs, serializable so checkpoints carry it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Encoder input size `(H0, W0)`; crops are `r` times larger.
    pub input_height: usize,
    pub input_width: usize,
    /// Crop-scale range for multi-resolution supervision.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Perceptual-term weight in the reconstruction loss.
    pub omega: f64,
    /// Perceptual backend name; "none" disables the term.
    pub perceptual: String,
    /// Distillation teacher backend name.
    pub teacher: String,
    pub grad_clip: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub renderer: RendererConfig,
    pub distill: DistillConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-4,
            batch_size: 4,
            seed: 0,
            input_height: 32,
            input_width: 32,
            scale_min: 1.0,
            scale_max: 2.0,
            omega: 0.1,
            perceptual: "conv_stack".into(),
            teacher: "conv_stub".into(),
            grad_clip: 1.0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            renderer: RendererConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.input_height < 8 || self.input_width < 8 {
            return Err(Error::Config(format!(
                "encoder input {}x{} is below the 8x8 minimum",
                self.input_height, self.input_width
            )));
        }
        if !(self.scale_min.is_finite() && self.scale_max.is_finite())
            || self.scale_min < 1.0
            || self.scale_max < self.scale_min
        {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 1 <= min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::Config(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        self.encoder.validate()?;
        self.renderer.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}

/// Configuration of a stage-2 (velocity model) run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing the prompt with the learned null condition.
    pub cfg_drop_rate: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub text_backend: String,
    /// Alignment teacher backend name.
    pub teacher: String,
    pub shift: TimestepShiftConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-4,
            batch_size: 4,
            seed: 0,
            cfg_drop_rate: 0.1,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            checkpoint_every: 0,
            text_backend: "hash_stub".into(),
            teacher: "conv_stub".into(),
            shift: TimestepShiftConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_rate) {
            return Err(Error::Config(format!(
                "cfg_drop_rate must lie in [0, 1], got {}",
                self.cfg_drop_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        self.shift.validate()?;
        self.denoiser.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        Stage1Config::default().validate().unwrap();
        Stage2Config::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = Stage1Config::default();
        c.steps = 0;
        assert!(c.validate().is_err());

        let mut c = Stage1Config::default();
        c.scale_min = 0.5;
        assert!(c.validate().is_err());

        let mut c = Stage1Config::default();
        c.scale_max = 0.9;
        assert!(c.validate().is_err());

        let mut c = Stage2Config::default();
        c.cfg_drop_rate = 1.5;
        assert!(c.validate().is_err());

        let mut c = Stage2Config::default();
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn configs_roundtrip_through_toml_and_reject_unknown_keys() {
        let c = Stage1Config::default();
        let text = toml::to_string(&c).unwrap();
        let back: Stage1Config = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<Stage1Config>("stepz = 3").is_err());

        let c = Stage2Config::default();
        let text = toml::to_string(&c).unwrap();
        let back: Stage2Config = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<Stage2Config>("unknown_key = 1").is_err());
    }
}

//! Second training stage: the text-conditioned velocity model learns to
//! transport noise to normalized latents of the frozen first stage. The
//! encoder and renderer load as a sealed bundle whose weights are
//! checksummed; latents are detached before they enter the flow-matching
//! graph, and every step asserts that no gradient touched the bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde_json::json;

use crate::autoencoder::{Encoder, Renderer};
use crate::checkpoint::{
    load_checkpoint, map_checksum, save_checkpoint, META_CONFIG, META_KIND, META_STEP,
};
use crate::denoiser::{text_backend, Denoiser, TextEncoder};
use crate::error::{Error, Result};
use crate::flowmatch::{gaussian_tensor, make_flow_sample, sample_timestep, velocity_mse, LatentStats};
use crate::guidance::{teacher_backend, Teacher};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::training::dataset::{Dataset, Sample};
use crate::training::metrics::MetricsWriter;
use crate::training::optim::{grads_to_map, AdamW, AdamWConfig, Ema};
use crate::training::stage1::split_checkpoint;
use crate::training::{Stage1Config, Stage2Config};

/// Stage-1 weights loaded for inference only. The parameter store stays
/// private so nothing can hand its variables to an optimizer; `checksum`
/// is the digest of the weights as loaded.
pub struct FrozenStage1 {
    ps: ParamStore,
    pub encoder: Encoder,
    pub renderer: Renderer,
    pub stats: LatentStats,
    pub config: Stage1Config,
    checksum: String,
}

/// Rebuild the encoder and renderer from a stage-1 checkpoint alone.
/// Reconstruction and statistics computation need no latent statistics,
/// so this is split from [`FrozenStage1::load`].
pub fn load_stage1_weights(
    checkpoint: &Path,
    device: &Device,
) -> Result<(Stage1Config, ParamStore, Encoder, Renderer)> {
    let (tensors, meta) = load_checkpoint(checkpoint, device)?;
    if meta.get(META_KIND).map(String::as_str) != Some("stage1") {
        return Err(Error::Checkpoint(format!(
            "{} is not a stage-1 checkpoint",
            checkpoint.display()
        )));
    }
    let config: Stage1Config = serde_json::from_str(
        meta.get(META_CONFIG)
            .ok_or_else(|| Error::Checkpoint("stage-1 checkpoint has no config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("stage-1 checkpoint config unreadable: {e}")))?;
    let (weights, _optim) = split_checkpoint(tensors);

    let mut ps = ParamStore::new(0, DType::F32, device);
    let encoder = Encoder::new(&mut ps, "encoder", &config.encoder)?;
    let renderer = Renderer::new(&mut ps, "renderer", &config.renderer, config.encoder.channels)?;
    // The projection branch exists in the checkpoint but plays no role
    // after stage 1; restore validates against the full parameter set,
    // so recreate it and drop it.
    let teacher = teacher_backend(&config.teacher, DType::F32, device)?;
    let probe = Tensor::zeros((3, config.input_height, config.input_width), DType::F32, device)?;
    let pool_target = teacher.forward(&probe)?.grid();
    let _projection = crate::guidance::ProjectionBranch::new(
        &mut ps,
        "projection",
        config.encoder.channels,
        teacher.feature_dim(),
        pool_target,
    )?;
    ps.restore(&weights)?;
    Ok((config, ps, encoder, renderer))
}

impl FrozenStage1 {
    pub fn load(checkpoint: &Path, stats: &Path, device: &Device) -> Result<Self> {
        let (config, ps, encoder, renderer) = load_stage1_weights(checkpoint, device)?;
        let checksum = map_checksum(&ps.tensors())?;

        let (stats, _fingerprint) = LatentStats::load(stats)?;
        if stats.channels() != config.encoder.channels {
            return Err(Error::Config(format!(
                "stats cover {} channels but the encoder produces {}",
                stats.channels(),
                config.encoder.channels
            )));
        }
        Ok(Self { ps, encoder, renderer, stats, config, checksum })
    }

    /// Digest recorded at load time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Digest of the weights as they are now; equal to [`Self::checksum`]
    /// unless something mutated the frozen bundle.
    pub fn checksum_now(&self) -> Result<String> {
        map_checksum(&self.ps.tensors())
    }

    fn assert_untouched(&self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        for (name, var) in self.ps.vars() {
            if grads.get(var.as_tensor()).is_some() {
                return Err(Error::Msg(format!(
                    "gradient reached frozen stage-1 parameter {name}"
                )));
            }
        }
        Ok(())
    }
}

/// Trainable stage-2 state: denoiser and text encoder over one store, plus
/// the frozen stage-1 bundle they depend on.
pub struct Stage2Models {
    pub ps: ParamStore,
    pub denoiser: Denoiser,
    pub text: Box<dyn TextEncoder>,
    pub frozen: FrozenStage1,
}

impl Stage2Models {
    pub fn new(cfg: &Stage2Config, frozen: FrozenStage1, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.denoiser.latent_channels != frozen.config.encoder.channels {
            return Err(Error::Config(format!(
                "denoiser expects {} latent channels but the encoder produces {}",
                cfg.denoiser.latent_channels, frozen.config.encoder.channels
            )));
        }
        let mut ps = ParamStore::new(cfg.seed, DType::F32, device);
        let denoiser = Denoiser::new(&mut ps, "denoiser", &cfg.denoiser)?;
        let text = text_backend(
            &cfg.text_backend,
            &mut ps,
            "text",
            cfg.denoiser.text_len,
            cfg.denoiser.text_dim,
        )?;
        Ok(Self { ps, denoiser, text, frozen })
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Metrics {
    pub l_fm: f64,
    pub l_repa: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// How many conditions in the batch were dropped to null.
    pub dropped: usize,
}

fn mean_of(losses: Vec<Tensor>) -> Result<Tensor> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Config("empty batch".into()))?;
    for l in it {
        acc = (acc + l)?;
    }
    Ok(acc.affine(1.0 / n as f64, 0.0)?)
}

/// One optimization step: per sample, encode and normalize the latent
/// (detached from the frozen bundle), draw `(t, ε)`, and regress the
/// velocity; alignment features are matched against the teacher when the
/// alignment weight is positive. One optimizer update plus one EMA update.
pub fn stage2_step(
    models: &Stage2Models,
    teacher: &dyn Teacher,
    samples: &[Sample],
    opt: &mut AdamW,
    ema: &mut Ema,
    cfg: &Stage2Config,
    step: u64,
) -> Result<Stage2Metrics> {
    if samples.is_empty() {
        return Err(Error::Config("stage-2 step needs a non-empty batch".into()));
    }
    let device = models.ps.device().clone();
    let repa_weight = cfg.denoiser.repa_weight;
    let mut rng_t = stream_rng(cfg.seed, Stream::Timestep, step);
    let mut rng_n = stream_rng(cfg.seed, Stream::Noise, step);
    let mut rng_d = stream_rng(cfg.seed, Stream::CondDrop, step);

    let mut fm_losses = Vec::with_capacity(samples.len());
    let mut repa_losses = Vec::with_capacity(samples.len());
    let mut dropped = 0usize;
    for sample in samples {
        let latent = models.frozen.encoder.encode(&sample.image)?;
        let z = latent.tensor().detach();
        let z_norm = models.frozen.stats.normalize(&z)?;
        let t = sample_timestep(&mut rng_t, &cfg.shift);
        let eps = gaussian_tensor(&mut rng_n, z_norm.dims(), z_norm.dtype(), &device)?;
        let flow = make_flow_sample(&z_norm, t, eps)?;
        let cond = models.text.encode(&sample.prompt)?;
        let cond = if rng_d.gen::<f64>() < cfg.cfg_drop_rate {
            dropped += 1;
            cond.unconditional()
        } else {
            cond
        };
        let (velocity, features) = models.denoiser.denoise_with_features(&flow.u_t, t, &cond)?;
        fm_losses.push(velocity_mse(&velocity, &flow.target_v)?);
        if repa_weight > 0.0 {
            let teacher_features = teacher.forward(&sample.image)?;
            let (_, h, w) = z.dims3()?;
            let grid = cfg.denoiser.token_grid(h, w)?;
            repa_losses.push(models.denoiser.repa_loss(&features, &teacher_features, grid)?);
        }
    }

    let l_fm = mean_of(fm_losses)?;
    let l_fm_val = l_fm.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let (total_t, l_repa_val) = if repa_weight > 0.0 {
        let l_repa = mean_of(repa_losses)?;
        let v = l_repa.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        ((&l_fm + l_repa.affine(repa_weight, 0.0)?)?, v)
    } else {
        (l_fm.clone(), 0.0)
    };
    let total = l_fm_val + repa_weight * l_repa_val;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage-2 loss at step {step}: l_fm = {l_fm_val}, l_repa = {l_repa_val}"
        )));
    }

    let grad_store = total_t.backward()?;
    models.frozen.assert_untouched(&grad_store)?;
    let grads = grads_to_map(&models.ps, &grad_store);
    let grad_norm = opt.step(&models.ps, &grads)?;
    ema.update(&models.ps)?;
    Ok(Stage2Metrics { l_fm: l_fm_val, l_repa: l_repa_val, total, grad_norm, dropped })
}

pub struct Stage2RunReport {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_metrics: Stage2Metrics,
    pub steps_run: u64,
}

pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const STAGE2_METRICS: &str = "stage2_metrics.jsonl";
pub const STAGE2_CONFIG_ECHO: &str = "stage2_config.json";

fn save_stage2_checkpoint(
    path: &Path,
    models: &Stage2Models,
    opt: &AdamW,
    ema: &Ema,
    cfg: &Stage2Config,
    step: u64,
) -> Result<()> {
    let mut tensors = models.ps.tensors();
    for (k, v) in opt.state_tensors() {
        tensors.insert(format!("optim.{k}"), v);
    }
    for (k, v) in ema.tensors() {
        tensors.insert(format!("ema.{k}"), v.clone());
    }
    let mut meta = BTreeMap::new();
    meta.insert(META_KIND.to_string(), "stage2".to_string());
    meta.insert(META_STEP.to_string(), step.to_string());
    meta.insert(
        META_CONFIG.to_string(),
        serde_json::to_string(cfg).map_err(|e| Error::Msg(e.to_string()))?,
    );
    save_checkpoint(path, &tensors, &meta)
}

/// Split stage-2 checkpoint tensors into weights, optimizer state, and EMA
/// shadow weights.
pub fn split_stage2_checkpoint(
    map: BTreeMap<String, Tensor>,
) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut weights = BTreeMap::new();
    let mut optim = BTreeMap::new();
    let mut ema = BTreeMap::new();
    for (k, v) in map {
        if let Some(rest) = k.strip_prefix("optim.") {
            optim.insert(rest.to_string(), v);
        } else if let Some(rest) = k.strip_prefix("ema.") {
            ema.insert(rest.to_string(), v);
        } else {
            weights.insert(k, v);
        }
    }
    (weights, optim, ema)
}

/// Full stage-2 run over a frozen stage-1 bundle. The bundle checksum is
/// verified after the loop: training must leave it untouched.
pub fn run_stage2(
    cfg: &Stage2Config,
    dataset: &dyn Dataset,
    stage1_checkpoint: &Path,
    stats_path: &Path,
    out_dir: &Path,
    resume: bool,
    device: &Device,
) -> Result<Stage2RunReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(STAGE2_CHECKPOINT);
    let metrics_path = out_dir.join(STAGE2_METRICS);

    let frozen = FrozenStage1::load(stage1_checkpoint, stats_path, device)?;
    let mut models = Stage2Models::new(cfg, frozen, device)?;
    let teacher = teacher_backend(&cfg.teacher, DType::F32, device)?;
    if teacher.feature_dim() != cfg.denoiser.teacher_dim {
        return Err(Error::Config(format!(
            "teacher provides {}-dim features but the denoiser expects {}",
            teacher.feature_dim(),
            cfg.denoiser.teacher_dim
        )));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.grad_clip),
        ..Default::default()
    });
    let mut ema = Ema::new(&models.ps, cfg.ema_decay)?;

    let mut start_step: u64 = 0;
    if resume {
        let (tensors, meta) = load_checkpoint(&ckpt_path, device)?;
        if meta.get(META_KIND).map(String::as_str) != Some("stage2") {
            return Err(Error::Checkpoint(format!(
                "{} is not a stage-2 checkpoint",
                ckpt_path.display()
            )));
        }
        let mut stored: Stage2Config = serde_json::from_str(
            meta.get(META_CONFIG)
                .ok_or_else(|| Error::Checkpoint("checkpoint has no config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
        stored.steps = cfg.steps;
        if &stored != cfg {
            return Err(Error::Config(
                "resume config differs from the checkpointed config".into(),
            ));
        }
        let step: u64 = meta
            .get(META_STEP)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint has no step counter".into()))?;
        if step >= cfg.steps as u64 {
            return Err(Error::Config(format!(
                "checkpoint is already at step {step}; configure more than {step} steps to continue"
            )));
        }
        let (weights, optim, ema_map) = split_stage2_checkpoint(tensors);
        models.ps.restore(&weights)?;
        opt.restore(&optim, step)?;
        if ema_map.len() != models.ps.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} EMA entries for {} parameters",
                ema_map.len(),
                models.ps.len()
            )));
        }
        ema.restore(ema_map);
        start_step = step;
    }

    std::fs::write(
        out_dir.join(STAGE2_CONFIG_ECHO),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Msg(e.to_string()))?,
    )?;
    let mut metrics = if resume {
        MetricsWriter::append_to(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let mut last = None;
    for step in start_step..cfg.steps as u64 {
        let started = Instant::now();
        let mut select = stream_rng(cfg.seed, Stream::BatchSelect, step);
        let samples: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| dataset.get(select.gen_range(0..dataset.len()), device))
            .collect::<Result<_>>()?;
        let m = stage2_step(&models, teacher.as_ref(), &samples, &mut opt, &mut ema, cfg, step)?;
        metrics.append(&json!({
            "step": step,
            "l_fm": m.l_fm,
            "l_repa": m.l_repa,
            "total": m.total,
            "grad_norm": m.grad_norm,
            "lr": cfg.lr,
            "dropped": m.dropped,
            "wall_ms": started.elapsed().as_secs_f64() * 1e3,
        }))?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 {
            save_stage2_checkpoint(&ckpt_path, &models, &opt, &ema, cfg, step + 1)?;
        }
        last = Some(m);
    }
    let final_metrics =
        last.ok_or_else(|| Error::Config("run finished without executing any step".into()))?;
    save_stage2_checkpoint(&ckpt_path, &models, &opt, &ema, cfg, cfg.steps as u64)?;

    if models.frozen.checksum_now()? != models.frozen.checksum() {
        return Err(Error::Msg("frozen stage-1 weights changed during stage-2 training".into()));
    }

    Ok(Stage2RunReport {
        checkpoint_path: ckpt_path,
        metrics_path,
        final_metrics,
        steps_run: cfg.steps as u64 - start_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{EncoderConfig, RendererConfig};
    use crate::checkpoint::tensor_checksum;
    use crate::denoiser::DenoiserConfig;
    use crate::guidance::DistillConfig;
    use crate::training::dataset::SyntheticShapes;
    use crate::training::stage1::run_stage1;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_stage1() -> Stage1Config {
        Stage1Config {
            steps: 1,
            lr: 1e-3,
            batch_size: 1,
            seed: 3,
            input_height: 16,
            input_width: 16,
            scale_min: 1.0,
            scale_max: 1.0,
            omega: 0.0,
            perceptual: "none".into(),
            teacher: "conv_stub".into(),
            grad_clip: 1.0,
            checkpoint_every: 0,
            encoder: EncoderConfig { channels: 4, resblocks: 1 },
            renderer: RendererConfig {
                hidden_dim: 32,
                num_blocks: 1,
                num_heads: 2,
                window: 4,
                ffn_expansion: 2,
            },
            distill: DistillConfig { k: 16, ..Default::default() },
        }
    }

    fn tiny_stage2(seed: u64) -> Stage2Config {
        Stage2Config {
            steps: 2,
            lr: 1e-3,
            batch_size: 2,
            seed,
            cfg_drop_rate: 0.1,
            ema_decay: 0.99,
            grad_clip: 1.0,
            checkpoint_every: 0,
            text_backend: "hash_stub".into(),
            teacher: "conv_stub".into(),
            shift: Default::default(),
            denoiser: DenoiserConfig {
                latent_channels: 4,
                hidden_dim: 32,
                num_blocks: 2,
                num_heads: 2,
                patch_size: 4,
                bottleneck_dim: 32,
                text_refine_blocks: 1,
                repa_block_index: 0,
                repa_weight: 0.5,
                text_len: 4,
                text_dim: 16,
                teacher_dim: 64,
            },
        }
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        ckpt: PathBuf,
        stats: PathBuf,
    }

    fn stage1_fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let ds = SyntheticShapes::new(2, 16, 16, 1).unwrap();
        let report = run_stage1(&tiny_stage1(), &ds, dir.path(), false, &dev()).unwrap();
        Fixture { ckpt: report.checkpoint_path, stats: report.stats_path, _dir: dir }
    }

    fn models_for(fx: &Fixture, cfg: &Stage2Config) -> Stage2Models {
        let frozen = FrozenStage1::load(&fx.ckpt, &fx.stats, &dev()).unwrap();
        Stage2Models::new(cfg, frozen, &dev()).unwrap()
    }

    fn batch(n: usize) -> Vec<Sample> {
        let ds = SyntheticShapes::new(4, 16, 16, 9).unwrap();
        (0..n).map(|i| ds.get(i % ds.len(), &dev()).unwrap()).collect()
    }

    #[test]
    fn steps_leave_frozen_weights_untouched() {
        let fx = stage1_fixture();
        let cfg = tiny_stage2(5);
        let models = models_for(&fx, &cfg);
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
        let mut ema = Ema::new(&models.ps, cfg.ema_decay).unwrap();
        let before = models.frozen.checksum().to_string();
        for step in 0..3 {
            let m = stage2_step(&models, teacher.as_ref(), &batch(2), &mut opt, &mut ema, &cfg, step)
                .unwrap();
            assert!(m.total.is_finite());
            assert!(m.l_fm > 0.0);
        }
        assert_eq!(models.frozen.checksum_now().unwrap(), before);
    }

    #[test]
    fn zero_alignment_weight_means_total_equals_velocity_loss() {
        let fx = stage1_fixture();
        let mut cfg = tiny_stage2(6);
        cfg.denoiser.repa_weight = 0.0;
        let models = models_for(&fx, &cfg);
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
        let mut ema = Ema::new(&models.ps, cfg.ema_decay).unwrap();
        let m =
            stage2_step(&models, teacher.as_ref(), &batch(2), &mut opt, &mut ema, &cfg, 0).unwrap();
        assert_eq!(m.l_repa, 0.0);
        assert_eq!(m.total, m.l_fm);
    }

    /// Replace every trainable weight with small random values. The fresh
    /// denoiser initializes with zeroed gates and output, which blocks all
    /// gradient flow beyond the final layer for the first couple of steps;
    /// the structural claims below are about the graph, not that warm-up.
    fn randomize(ps: &ParamStore) {
        use crate::rng::fnv1a;
        for (name, var) in ps.vars() {
            let mut rng = stream_rng(0xabcd, Stream::Dataset, fnv1a(name));
            let noise =
                gaussian_tensor(&mut rng, var.dims(), var.dtype(), var.device()).unwrap();
            var.set(&noise.affine(0.05, 0.0).unwrap()).unwrap();
        }
    }

    /// Mirror of the stage-1 gradient-coverage guard for the stage-2 graph:
    /// every denoiser parameter and the prompt embedding table must receive
    /// a flow-matching (plus feature-alignment) gradient once the weights
    /// are away from their gate-closed initialization.
    #[test]
    fn flow_gradient_reaches_every_denoiser_parameter() {
        let fx = stage1_fixture();
        let cfg = tiny_stage2(11);
        let models = models_for(&fx, &cfg);
        randomize(&models.ps);
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let sample = &batch(1)[0];

        let z = models.frozen.encoder.encode(&sample.image).unwrap().tensor().detach();
        let z_norm = models.frozen.stats.normalize(&z).unwrap();
        let mut rng_n = stream_rng(cfg.seed, Stream::Noise, 0);
        let eps =
            gaussian_tensor(&mut rng_n, z_norm.dims(), z_norm.dtype(), z_norm.device()).unwrap();
        let fs = make_flow_sample(&z_norm, 0.4, eps).unwrap();
        let cond = models.text.encode(&sample.prompt).unwrap();
        let (v, feats) = models.denoiser.denoise_with_features(&fs.u_t, fs.t, &cond).unwrap();
        let l_fm = velocity_mse(&v, &fs.target_v).unwrap();
        let (_, h, w) = z.dims3().unwrap();
        let grid = models.denoiser.config().token_grid(h, w).unwrap();
        let tf = teacher.forward(&sample.image).unwrap();
        let l_repa = models.denoiser.repa_loss(&feats, &tf, grid).unwrap();
        let total = (l_fm + l_repa.affine(cfg.denoiser.repa_weight, 0.0).unwrap()).unwrap();

        let grads = grads_to_map(&models.ps, &total.backward().unwrap());
        let missing: Vec<_> = models
            .ps
            .vars()
            .map(|(n, _)| n)
            // The null embedding enters only when the condition is dropped.
            .filter(|n| *n != "text.null" && !grads.contains_key(*n))
            .collect();
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }

    #[test]
    fn full_drop_rate_trains_null_but_not_the_vocabulary() {
        let fx = stage1_fixture();
        let mut cfg = tiny_stage2(7);
        cfg.cfg_drop_rate = 1.0;
        let models = models_for(&fx, &cfg);
        randomize(&models.ps);
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
        let mut ema = Ema::new(&models.ps, cfg.ema_decay).unwrap();
        let table_before =
            tensor_checksum(models.ps.get("text.table").unwrap().as_tensor()).unwrap();
        let null_before = tensor_checksum(models.ps.get("text.null").unwrap().as_tensor()).unwrap();
        let m =
            stage2_step(&models, teacher.as_ref(), &batch(2), &mut opt, &mut ema, &cfg, 0).unwrap();
        assert_eq!(m.dropped, 2);
        let table_after =
            tensor_checksum(models.ps.get("text.table").unwrap().as_tensor()).unwrap();
        let null_after = tensor_checksum(models.ps.get("text.null").unwrap().as_tensor()).unwrap();
        assert_eq!(table_before, table_after, "vocabulary must receive no gradient");
        assert_ne!(null_before, null_after, "null embedding must train");
        assert!(!opt.state_tensors().contains_key("m.text.table"));
    }

    #[test]
    fn run_writes_artifacts_and_resume_is_bit_identical() {
        let fx = stage1_fixture();
        let ds = SyntheticShapes::new(4, 16, 16, 9).unwrap();
        let mut cfg = tiny_stage2(8);
        cfg.steps = 4;
        cfg.checkpoint_every = 2;

        let dir_full = tempfile::tempdir().unwrap();
        let full =
            run_stage2(&cfg, &ds, &fx.ckpt, &fx.stats, dir_full.path(), false, &dev()).unwrap();
        let (full_map, meta) = load_checkpoint(&full.checkpoint_path, &dev()).unwrap();
        assert_eq!(meta.get(META_STEP).unwrap(), "4");

        let dir_split = tempfile::tempdir().unwrap();
        let mut half = cfg.clone();
        half.steps = 2;
        run_stage2(&half, &ds, &fx.ckpt, &fx.stats, dir_split.path(), false, &dev()).unwrap();
        let resumed =
            run_stage2(&cfg, &ds, &fx.ckpt, &fx.stats, dir_split.path(), true, &dev()).unwrap();
        let (split_map, _) = load_checkpoint(&resumed.checkpoint_path, &dev()).unwrap();
        assert_eq!(
            map_checksum(&full_map).unwrap(),
            map_checksum(&split_map).unwrap(),
            "resume must continue bit-identically (weights, optimizer, and EMA)"
        );
        assert_eq!(
            std::fs::read_to_string(&full.metrics_path).unwrap().lines().count(),
            4
        );
    }
}

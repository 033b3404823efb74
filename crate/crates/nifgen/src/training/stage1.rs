//! First training stage: the continuous autoencoder (encoder + field
//! renderer) trained for reconstruction across scales, with the latent
//! nudged toward a frozen teacher's feature geometry through the projection
//! branch. The distillation weight is re-balanced every step from gradient
//! norms at the encoder's final convolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde_json::json;

use crate::autoencoder::{
    perceptual_backend, reconstruction_loss, Encoder, PerceptualLoss, Renderer,
};
use crate::checkpoint::{
    load_checkpoint, map_checksum, save_checkpoint, META_CONFIG, META_KIND, META_STEP,
};
use crate::error::{Error, Result};
use crate::guidance::{
    adaptive_weight, distance_matrix_loss, margin_cosine_loss, teacher_backend, ProjectionBranch,
    Teacher,
};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::training::batch::{make_stage1_batch, Stage1Batch};
use crate::training::dataset::Dataset;
use crate::training::metrics::MetricsWriter;
use crate::training::optim::{grads_to_map, AdamW, AdamWConfig};
use crate::training::stats::compute_latent_stats;
use crate::training::Stage1Config;

/// The trainable stage-1 models over one shared parameter store.
pub struct Stage1Models {
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub renderer: Renderer,
    pub projection: ProjectionBranch,
    pub perceptual: Option<Box<dyn PerceptualLoss>>,
}

impl Stage1Models {
    /// Build fresh models. The projection branch pools to whatever grid the
    /// teacher produces for the configured encoder input size, measured by
    /// one probe forward pass.
    pub fn new(cfg: &Stage1Config, teacher: &dyn Teacher, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(cfg.seed, DType::F32, device);
        let encoder = Encoder::new(&mut ps, "encoder", &cfg.encoder)?;
        let renderer = Renderer::new(&mut ps, "renderer", &cfg.renderer, cfg.encoder.channels)?;
        let probe = Tensor::zeros((3, cfg.input_height, cfg.input_width), DType::F32, device)?;
        let pool_target = teacher.forward(&probe)?.grid();
        let projection = ProjectionBranch::new(
            &mut ps,
            "projection",
            cfg.encoder.channels,
            teacher.feature_dim(),
            pool_target,
        )?;
        let perceptual = perceptual_backend(&cfg.perceptual, DType::F32, device)?;
        Ok(Self { ps, encoder, renderer, projection, perceptual })
    }

    /// Digest of every trainable weight.
    pub fn param_checksum(&self) -> Result<String> {
        map_checksum(&self.ps.tensors())
    }
}

/// Loss breakdown of one optimization step. All values are plain numbers
/// taken after the forward pass.
#[derive(Debug, Clone)]
pub struct Stage1Metrics {
    /// Reconstruction loss (pixel term plus weighted perceptual term).
    pub l_rec: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub l_mcos: f64,
    pub l_mdms: f64,
    pub w_adapt: f64,
    pub total: f64,
    /// Pre-clip global gradient norm of the combined update.
    pub grad_norm: f64,
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

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Gradient norm over the encoder's final convolution parameters.
fn phi_l_norm(
    grads: &BTreeMap<String, Tensor>,
    names: &[String; 2],
) -> Result<f64> {
    let mut sumsq = 0f64;
    for name in names {
        if let Some(g) = grads.get(name) {
            sumsq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sumsq.sqrt())
}

/// One optimization step over a batch of supervision pairs: encode each
/// input, render at its target grid, balance reconstruction against
/// distillation, and apply a single optimizer update.
///
/// With `w_base == 0` the distillation losses are still reported but no
/// gradient from them is formed, so the update equals pure
/// reconstruction training bit for bit.
pub fn stage1_step(
    models: &Stage1Models,
    teacher: &dyn Teacher,
    samples: &[Stage1Batch],
    opt: &mut AdamW,
    cfg: &Stage1Config,
    step: u64,
) -> Result<Stage1Metrics> {
    if samples.is_empty() {
        return Err(Error::Config("stage-1 step needs a non-empty batch".into()));
    }
    let mut rec_losses = Vec::with_capacity(samples.len());
    let mut l1_sum = 0f64;
    let mut perc_sum = 0f64;
    let mut mcos_losses = Vec::with_capacity(samples.len());
    let mut mdms_losses = Vec::with_capacity(samples.len());

    // One K-subset per step, shared by every pair in the batch.
    let k_rng = stream_rng(cfg.seed, Stream::PositionSample, step);

    for pair in samples {
        let latent = models.encoder.encode(&pair.x_in)?;
        let pred = models.renderer.render(&latent, &pair.grid)?;
        let rec =
            reconstruction_loss(&pred, &pair.x_tar, cfg.omega, models.perceptual.as_deref())?;
        l1_sum += rec.l1;
        perc_sum += rec.perceptual;
        rec_losses.push(rec.total);

        let teacher_features = teacher.forward(&pair.x_in)?;
        let student = models.projection.project(&latent)?;
        mcos_losses.push(margin_cosine_loss(&student, &teacher_features, cfg.distill.m_cos)?);
        mdms_losses.push(distance_matrix_loss(
            &student,
            &teacher_features,
            cfg.distill.k,
            cfg.distill.m_dist,
            &mut k_rng.clone(),
        )?);
    }

    let n = samples.len() as f64;
    let l_rec = mean_of(rec_losses)?;
    let l_mcos = mean_of(mcos_losses)?;
    let l_mdms = mean_of(mdms_losses)?;
    let l_distill = (&l_mcos + &l_mdms)?;

    let l_rec_val = scalar(&l_rec)?;
    let l_mcos_val = scalar(&l_mcos)?;
    let l_mdms_val = scalar(&l_mdms)?;

    let rec_grads = grads_to_map(&models.ps, &l_rec.backward()?);
    let phi_names = models.encoder.last_conv_param_names();

    let (w_adapt, combined) = if cfg.distill.w_base == 0.0 {
        // Zero weight: skip the distillation backward pass entirely so the
        // update graph is exactly the reconstruction-only one.
        (0.0, rec_grads)
    } else {
        let dist_grads = grads_to_map(&models.ps, &l_distill.backward()?);
        let w = adaptive_weight(
            phi_l_norm(&rec_grads, phi_names)?,
            phi_l_norm(&dist_grads, phi_names)?,
            &cfg.distill,
        )?;
        let mut combined = rec_grads;
        for (name, g) in dist_grads {
            let scaled = g.affine(w, 0.0)?;
            let merged = match combined.get(&name) {
                Some(base) => (base + scaled)?,
                None => scaled,
            };
            combined.insert(name, merged);
        }
        (w, combined)
    };

    let total = l_rec_val + w_adapt * (l_mcos_val + l_mdms_val);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage-1 loss at step {step}: l_rec = {l_rec_val}, l_mcos = {l_mcos_val}, \
             l_mdms = {l_mdms_val}, w_adapt = {w_adapt}"
        )));
    }
    let grad_norm = opt.step(&models.ps, &combined)?;
    Ok(Stage1Metrics {
        l_rec: l_rec_val,
        l1: l1_sum / n,
        perceptual: perc_sum / n,
        l_mcos: l_mcos_val,
        l_mdms: l_mdms_val,
        w_adapt,
        total,
        grad_norm,
    })
}

pub struct Stage1RunReport {
    pub checkpoint_path: PathBuf,
    pub stats_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_metrics: Stage1Metrics,
    pub steps_run: u64,
}

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE1_METRICS: &str = "stage1_metrics.jsonl";
pub const STAGE1_CONFIG_ECHO: &str = "stage1_config.json";
pub const LATENT_STATS: &str = "latent_stats.json";

fn optimizer_prefixed(opt: &AdamW) -> BTreeMap<String, Tensor> {
    opt.state_tensors()
        .into_iter()
        .map(|(k, v)| (format!("optim.{k}"), v))
        .collect()
}

/// Split a checkpoint tensor map into model weights and optimizer state.
pub(crate) fn split_checkpoint(
    map: BTreeMap<String, Tensor>,
) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut weights = BTreeMap::new();
    let mut optim = BTreeMap::new();
    for (k, v) in map {
        match k.strip_prefix("optim.") {
            Some(rest) => {
                optim.insert(rest.to_string(), v);
            }
            None => {
                weights.insert(k, v);
            }
        }
    }
    (weights, optim)
}

fn save_stage1_checkpoint(
    path: &Path,
    models: &Stage1Models,
    opt: &AdamW,
    cfg: &Stage1Config,
    step: u64,
) -> Result<()> {
    let mut tensors = models.ps.tensors();
    tensors.extend(optimizer_prefixed(opt));
    let mut meta = BTreeMap::new();
    meta.insert(META_KIND.to_string(), "stage1".to_string());
    meta.insert(META_STEP.to_string(), step.to_string());
    meta.insert(
        META_CONFIG.to_string(),
        serde_json::to_string(cfg).map_err(|e| Error::Msg(e.to_string()))?,
    );
    save_checkpoint(path, &tensors, &meta)
}

/// Full stage-1 run: step loop, metrics log, periodic checkpoints, and
/// final latent statistics over the training set. With `resume` the loop
/// continues from the checkpoint in `out_dir`, bit-identically to a run
/// that never stopped.
pub fn run_stage1(
    cfg: &Stage1Config,
    dataset: &dyn Dataset,
    out_dir: &Path,
    resume: bool,
    device: &Device,
) -> Result<Stage1RunReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(STAGE1_CHECKPOINT);
    let stats_path = out_dir.join(LATENT_STATS);
    let metrics_path = out_dir.join(STAGE1_METRICS);

    let teacher = teacher_backend(&cfg.teacher, DType::F32, device)?;
    let models = Stage1Models::new(cfg, teacher.as_ref(), device)?;
    let mut models = models;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.grad_clip),
        ..Default::default()
    });

    let mut start_step: u64 = 0;
    if resume {
        let (tensors, meta) = load_checkpoint(&ckpt_path, device)?;
        if meta.get(META_KIND).map(String::as_str) != Some("stage1") {
            return Err(Error::Checkpoint(format!(
                "{} is not a stage-1 checkpoint",
                ckpt_path.display()
            )));
        }
        let mut stored: Stage1Config = serde_json::from_str(
            meta.get(META_CONFIG)
                .ok_or_else(|| Error::Checkpoint("checkpoint has no config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
        // The step budget may grow on resume; everything else is pinned by
        // the checkpoint.
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
        let (weights, optim) = split_checkpoint(tensors);
        models.ps.restore(&weights)?;
        opt.restore(&optim, step)?;
        start_step = step;
    }

    // Echo the exact resolved config for provenance.
    std::fs::write(
        out_dir.join(STAGE1_CONFIG_ECHO),
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
        let mut crop = stream_rng(cfg.seed, Stream::BatchCrop, step);
        let mut samples = Vec::with_capacity(cfg.batch_size);
        let mut upscaled = 0usize;
        for _ in 0..cfg.batch_size {
            let index = select.gen_range(0..dataset.len());
            let image = dataset.get(index, device)?.image;
            let pair = make_stage1_batch(
                &image,
                cfg.input_height,
                cfg.input_width,
                (cfg.scale_min, cfg.scale_max),
                &mut crop,
            )?;
            upscaled += pair.upscaled as usize;
            samples.push(pair);
        }
        let m = stage1_step(&models, teacher.as_ref(), &samples, &mut opt, cfg, step)?;
        metrics.append(&json!({
            "step": step,
            "l_rec": m.l_rec,
            "l1": m.l1,
            "perceptual": m.perceptual,
            "l_mcos": m.l_mcos,
            "l_mdms": m.l_mdms,
            "w_adapt": m.w_adapt,
            "total": m.total,
            "grad_norm": m.grad_norm,
            "lr": cfg.lr,
            "upscaled": upscaled,
            "wall_ms": started.elapsed().as_secs_f64() * 1e3,
        }))?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every as u64 == 0 {
            save_stage1_checkpoint(&ckpt_path, &models, &opt, cfg, step + 1)?;
        }
        last = Some(m);
    }
    let final_metrics =
        last.ok_or_else(|| Error::Config("run finished without executing any step".into()))?;

    save_stage1_checkpoint(&ckpt_path, &models, &opt, cfg, cfg.steps as u64)?;
    let stats = compute_latent_stats(dataset, &models.encoder, device, 1)?;
    stats.save(&stats_path, &dataset.fingerprint())?;

    Ok(Stage1RunReport {
        checkpoint_path: ckpt_path,
        stats_path,
        metrics_path,
        final_metrics,
        steps_run: cfg.steps as u64 - start_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{EncoderConfig, RendererConfig};
    use crate::guidance::{DistillConfig, TeacherFeatures};
    use crate::rng::fnv1a;
    use crate::training::dataset::SyntheticShapes;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_config() -> Stage1Config {
        Stage1Config {
            steps: 2,
            lr: 1e-3,
            batch_size: 2,
            seed: 3,
            input_height: 16,
            input_width: 16,
            scale_min: 1.0,
            scale_max: 1.5,
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

    fn batch_for(cfg: &Stage1Config, step: u64) -> Vec<Stage1Batch> {
        let ds = SyntheticShapes::new(4, 32, 32, 1).unwrap();
        let mut select = stream_rng(cfg.seed, Stream::BatchSelect, step);
        let mut crop = stream_rng(cfg.seed, Stream::BatchCrop, step);
        (0..cfg.batch_size)
            .map(|_| {
                let i = select.gen_range(0..ds.len());
                let img = ds.get(i, &dev()).unwrap().image;
                make_stage1_batch(
                    &img,
                    cfg.input_height,
                    cfg.input_width,
                    (cfg.scale_min, cfg.scale_max),
                    &mut crop,
                )
                .unwrap()
            })
            .collect()
    }

    /// A teacher that is the projection of the student by construction:
    /// distillation can never see a gap.
    struct AlignedTeacher<'a> {
        models: &'a Stage1Models,
        patch: usize,
        dim: usize,
    }

    impl Teacher for AlignedTeacher<'_> {
        fn name(&self) -> &'static str {
            "aligned"
        }
        fn patch_size(&self) -> usize {
            self.patch
        }
        fn feature_dim(&self) -> usize {
            self.dim
        }
        fn forward(&self, image: &Tensor) -> Result<TeacherFeatures> {
            let latent = self.models.encoder.encode(image)?;
            TeacherFeatures::new(self.models.projection.project(&latent)?)
        }
    }

    /// Guards the backward path end to end: the fused library kernels for
    /// layer norm and softmax register no gradient, so a regression to them
    /// would freeze everything behind the first normalization while the
    /// loss still falls (the output head trains). Zero-initialized heads
    /// block value flow at init, so weights are randomized first.
    #[test]
    fn reconstruction_gradient_reaches_every_encoder_and_renderer_parameter() {
        let cfg = tiny_config();
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let models = Stage1Models::new(&cfg, teacher.as_ref(), &dev()).unwrap();
        for (name, var) in models.ps.vars() {
            let mut r = stream_rng(0x517a, Stream::ParamInit, fnv1a(name));
            let vals: Vec<f32> = (0..var.elem_count()).map(|_| r.gen_range(-0.05..0.05)).collect();
            var.set(&Tensor::from_vec(vals, var.shape(), &dev()).unwrap()).unwrap();
        }
        let pair = &batch_for(&cfg, 0)[0];
        let latent = models.encoder.encode(&pair.x_in).unwrap();
        let pred = models.renderer.render(&latent, &pair.grid).unwrap();
        let l_rec = (pred - &pair.x_tar).unwrap().abs().unwrap().mean_all().unwrap();
        let grads = grads_to_map(&models.ps, &l_rec.backward().unwrap());
        let missing: Vec<_> = models
            .ps
            .vars()
            .map(|(n, _)| n)
            .filter(|n| !n.starts_with("projection") && !grads.contains_key(*n))
            .collect();
        assert!(missing.is_empty(), "no reconstruction gradient for {missing:?}");
        assert!(phi_l_norm(&grads, models.encoder.last_conv_param_names()).unwrap() > 0.0);
    }

    #[test]
    fn aligned_teacher_short_circuits_distillation() {
        let cfg = tiny_config();
        let real = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let models = Stage1Models::new(&cfg, real.as_ref(), &dev()).unwrap();
        let aligned = AlignedTeacher {
            models: &models,
            patch: real.patch_size(),
            dim: real.feature_dim(),
        };
        let samples = batch_for(&cfg, 0);
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
        let m = stage1_step(&models, &aligned, &samples, &mut opt, &cfg, 0).unwrap();
        assert_eq!(m.l_mcos, 0.0);
        assert_eq!(m.l_mdms, 0.0);
        assert_eq!(m.total, m.l_rec);
    }

    #[test]
    fn zero_base_weight_equals_reconstruction_only_training() {
        let mut cfg = tiny_config();
        cfg.distill.w_base = 0.0;
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let samples = batch_for(&cfg, 0);

        // Path A: the real step with w_base = 0.
        let models_a = Stage1Models::new(&cfg, teacher.as_ref(), &dev()).unwrap();
        let mut opt_a = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            clip_norm: Some(cfg.grad_clip),
            ..Default::default()
        });
        let m = stage1_step(&models_a, teacher.as_ref(), &samples, &mut opt_a, &cfg, 0).unwrap();
        assert_eq!(m.w_adapt, 0.0);

        // Path B: hand-written reconstruction-only training on identically
        // seeded models.
        let models_b = Stage1Models::new(&cfg, teacher.as_ref(), &dev()).unwrap();
        let mut opt_b = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            clip_norm: Some(cfg.grad_clip),
            ..Default::default()
        });
        let mut losses = Vec::new();
        for pair in &samples {
            let latent = models_b.encoder.encode(&pair.x_in).unwrap();
            let pred = models_b.renderer.render(&latent, &pair.grid).unwrap();
            let rec = reconstruction_loss(&pred, &pair.x_tar, cfg.omega, None).unwrap();
            losses.push(rec.total);
        }
        let loss = mean_of(losses).unwrap();
        let grads = grads_to_map(&models_b.ps, &loss.backward().unwrap());
        opt_b.step(&models_b.ps, &grads).unwrap();

        assert_eq!(
            models_a.param_checksum().unwrap(),
            models_b.param_checksum().unwrap(),
            "w_base = 0 must reproduce reconstruction-only training exactly"
        );
    }

    #[test]
    fn steps_reduce_reconstruction_loss_and_report_finite_metrics() {
        let mut cfg = tiny_config();
        cfg.scale_min = 1.0;
        cfg.scale_max = 1.0;
        let teacher = teacher_backend(&cfg.teacher, DType::F32, &dev()).unwrap();
        let models = Stage1Models::new(&cfg, teacher.as_ref(), &dev()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 5e-3, ..Default::default() });
        let samples = batch_for(&cfg, 0);
        let first = stage1_step(&models, teacher.as_ref(), &samples, &mut opt, &cfg, 0).unwrap();
        let mut last = first.clone();
        for step in 1..20 {
            last =
                stage1_step(&models, teacher.as_ref(), &samples, &mut opt, &cfg, step).unwrap();
        }
        assert!(last.l_rec < first.l_rec, "{} -> {}", first.l_rec, last.l_rec);
        assert!(last.w_adapt >= 0.0 && last.w_adapt <= cfg.distill.w_base * 1e8);
        for v in [last.l_rec, last.l_mcos, last.l_mdms, last.total, last.grad_norm] {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn run_writes_artifacts_and_resume_is_bit_identical() {
        let mut cfg = tiny_config();
        cfg.steps = 4;
        cfg.checkpoint_every = 2;
        let ds = SyntheticShapes::new(4, 32, 32, 1).unwrap();

        // Uninterrupted run.
        let dir_full = tempfile::tempdir().unwrap();
        let full = run_stage1(&cfg, &ds, dir_full.path(), false, &dev()).unwrap();
        let (full_weights, full_meta) = load_checkpoint(&full.checkpoint_path, &dev()).unwrap();
        assert_eq!(full_meta.get(META_STEP).unwrap(), "4");

        // Interrupted at step 2, then resumed.
        let dir_split = tempfile::tempdir().unwrap();
        let mut half = cfg.clone();
        half.steps = 2;
        run_stage1(&half, &ds, dir_split.path(), false, &dev()).unwrap();
        let resumed = run_stage1(&cfg, &ds, dir_split.path(), true, &dev()).unwrap();
        let (split_weights, _) = load_checkpoint(&resumed.checkpoint_path, &dev()).unwrap();
        assert_eq!(
            map_checksum(&full_weights).unwrap(),
            map_checksum(&split_weights).unwrap(),
            "resumed run must match the uninterrupted run bit for bit"
        );

        // Metrics: one line per step in both runs.
        let count = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count();
        assert_eq!(count(&full.metrics_path), 4);
        assert_eq!(count(&resumed.metrics_path), 4);
        assert!(full.stats_path.exists());
        assert!(dir_full.path().join(STAGE1_CONFIG_ECHO).exists());

        // Resume with a different config is refused.
        let mut other = cfg.clone();
        other.lr = 9e-9;
        assert!(run_stage1(&other, &ds, dir_split.path(), true, &dev()).is_err());
    }
}

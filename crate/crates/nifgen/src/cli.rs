//! Command-line interface: the two training stages, latent statistics,
//! generation, reconstruction, and a resolution-scaling benchmark.
//!
//! Every command reads one optional TOML config (`--config`), applies flag
//! overrides on top, and writes its artifacts under one output directory
//! resolved as flag > config file > `NIFGEN_OUT_DIR` > `./runs`. Exit codes:
//! 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::autoencoder::NifLatent;
use crate::checkpoint::{load_checkpoint, tensor_checksum, META_CONFIG, META_KIND};
use crate::config::{resolve_output_dir, RunConfig, OUT_DIR_ENV};
use crate::error::{Error, Result};
use crate::flowmatch::{euler_sample, Branch};
use crate::geometry::CoordGrid;
use crate::image_io::{load_png, save_png};
use crate::rng::{stream_rng, Stream};
use crate::training::{
    compute_latent_stats, load_stage1_weights, run_stage1, run_stage2, split_stage2_checkpoint,
    Dataset, DirDataset, FrozenStage1, Stage2Config, Stage2Models, SyntheticShapes,
    LATENT_STATS, STAGE1_CHECKPOINT, STAGE2_CHECKPOINT,
};

#[derive(Parser)]
#[command(
    name = "nifgen",
    version,
    about = "Resolution-agnostic image generation: continuous-field autoencoder + latent flow matching"
)]
struct Cli {
    /// TOML run configuration; all settings have defaults when absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (overrides the config file and NIFGEN_OUT_DIR).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder and renderer on reconstruction plus distillation.
    TrainStage1 {
        /// Override stage1.steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Override stage1.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute per-channel latent statistics with a trained encoder.
    ComputeStats {
        /// Encode every n-th dataset image.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train the text-conditioned latent denoiser against frozen stage-1 weights.
    TrainStage2 {
        /// Override stage2.steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Override stage2.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample a latent from a prompt and render it at the requested size.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override generate.steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Override generate.cfg_scale from the config.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Sample with the raw weights instead of the EMA weights.
        #[arg(long)]
        no_ema: bool,
        /// Output image path (default: <out-dir>/generate_s<seed>_<H>x<W>.png).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Encode an image and render it back at a chosen scale factor.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Reference image for the L1 report; at scale 1 the input is used.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Output image path (default: <out-dir>/reconstruct_<stem>_x<scale>.png).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time denoising and rendering separately across output sizes.
    BenchScaling {
        #[arg(long, default_value = "a benchmark scene")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output size as HxW; repeatable. Overrides bench.sizes.
        #[arg(long = "size", value_name = "HxW")]
        sizes: Vec<String>,
        /// JSON report path (default: <out-dir>/bench.json).
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out_dir = resolve_output_dir(
        cli.out_dir.clone(),
        cfg.output_dir.clone(),
        std::env::var(OUT_DIR_ENV).ok(),
    );
    let device = Device::Cpu;

    match cli.command {
        Command::TrainStage1 { steps, seed, resume } => {
            let mut s1 = cfg.stage1.clone();
            if let Some(steps) = steps {
                s1.steps = steps;
            }
            if let Some(seed) = seed {
                s1.seed = seed;
            }
            let dataset = build_dataset(&cfg)?;
            let report = run_stage1(&s1, dataset.as_ref(), &out_dir, resume, &device)?;
            println!("stage-1 training: {} steps run", report.steps_run);
            let m = &report.final_metrics;
            println!(
                "final losses: total {:.6}  l_rec {:.6}  l1 {:.6}  l_mcos {:.6}  l_mdms {:.6}  w_adapt {:.6}",
                m.total, m.l_rec, m.l1, m.l_mcos, m.l_mdms, m.w_adapt
            );
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("latent stats: {}", report.stats_path.display());
            println!("metrics: {}", report.metrics_path.display());
            Ok(())
        }
        Command::ComputeStats { stride } => {
            let dataset = build_dataset(&cfg)?;
            let (_config, _ps, encoder, _renderer) =
                load_stage1_weights(&out_dir.join(STAGE1_CHECKPOINT), &device)?;
            let stats = compute_latent_stats(dataset.as_ref(), &encoder, &device, stride)?;
            let path = out_dir.join(LATENT_STATS);
            stats.save(&path, &dataset.fingerprint())?;
            println!("latent statistics over {} images (stride {stride}):", dataset.len().div_ceil(stride));
            for (c, (mu, sigma)) in stats.mu.iter().zip(&stats.sigma).enumerate() {
                println!("  channel {c}: mu {mu:+.6}  sigma {sigma:.6}");
            }
            println!("written to {}", path.display());
            Ok(())
        }
        Command::TrainStage2 { steps, seed, resume } => {
            let mut s2 = cfg.stage2.clone();
            if let Some(steps) = steps {
                s2.steps = steps;
            }
            if let Some(seed) = seed {
                s2.seed = seed;
            }
            let dataset = build_dataset(&cfg)?;
            let report = run_stage2(
                &s2,
                dataset.as_ref(),
                &out_dir.join(STAGE1_CHECKPOINT),
                &out_dir.join(LATENT_STATS),
                &out_dir,
                resume,
                &device,
            )?;
            println!("stage-2 training: {} steps run", report.steps_run);
            let m = &report.final_metrics;
            println!(
                "final losses: total {:.6}  l_fm {:.6}  l_repa {:.6}",
                m.total, m.l_fm, m.l_repa
            );
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("metrics: {}", report.metrics_path.display());
            Ok(())
        }
        Command::Generate { prompt, height, width, seed, steps, cfg_scale, no_ema, output } => {
            let steps = steps.unwrap_or(cfg.generate.steps);
            let cfg_scale = cfg_scale.unwrap_or(cfg.generate.cfg_scale);
            let use_ema = if no_ema { false } else { cfg.generate.use_ema };
            cmd_generate(
                &out_dir, &prompt, height, width, seed, steps, cfg_scale, use_ema, output, &device,
            )
        }
        Command::Reconstruct { image, scale, ground_truth, output } => {
            cmd_reconstruct(&out_dir, &image, scale, ground_truth.as_deref(), output, &device)
        }
        Command::BenchScaling { prompt, seed, sizes, json } => {
            let sizes = if sizes.is_empty() {
                cfg.bench.sizes.iter().map(|[h, w]| (*h, *w)).collect()
            } else {
                sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?
            };
            cmd_bench_scaling(&cfg, &out_dir, &prompt, seed, &sizes, json, &device)
        }
    }
}

fn build_dataset(cfg: &RunConfig) -> Result<Box<dyn Dataset>> {
    let d = &cfg.dataset;
    match d.kind.as_str() {
        "synthetic" => Ok(Box::new(SyntheticShapes::new(d.count, d.height, d.width, d.seed)?)),
        "dir" => {
            let path = d.path.as_ref().ok_or_else(|| {
                Error::Config("dataset.kind = \"dir\" requires dataset.path".into())
            })?;
            Ok(Box::new(DirDataset::open(path)?))
        }
        other => Err(Error::Config(format!("unknown dataset.kind `{other}`"))),
    }
}

/// Parse `HxW` (e.g. `128x96`) into `(height, width)`.
fn parse_size(text: &str) -> Result<(usize, usize)> {
    let err = || Error::Config(format!("size `{text}` is not of the form HxW, e.g. 128x96"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(err)?;
    let h: usize = h.trim().parse().map_err(|_| err())?;
    let w: usize = w.trim().parse().map_err(|_| err())?;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("size {h}x{w} is below the 8x8 minimum")));
    }
    Ok((h, w))
}

/// Stage-2 weights plus everything needed to turn a prompt into a latent:
/// frozen stage-1 bundle, denoiser, text encoder, and the stored stage-2
/// config (the checkpoint is authoritative for architecture and shift).
struct Sampler {
    models: Stage2Models,
    stage2: Stage2Config,
    device: Device,
}

impl Sampler {
    fn load(out_dir: &Path, use_ema: bool, device: &Device) -> Result<Self> {
        let frozen = FrozenStage1::load(
            &out_dir.join(STAGE1_CHECKPOINT),
            &out_dir.join(LATENT_STATS),
            device,
        )?;
        let ckpt_path = out_dir.join(STAGE2_CHECKPOINT);
        let (tensors, meta) = load_checkpoint(&ckpt_path, device)?;
        if meta.get(META_KIND).map(String::as_str) != Some("stage2") {
            return Err(Error::Checkpoint(format!(
                "{} is not a stage-2 checkpoint",
                ckpt_path.display()
            )));
        }
        let stage2: Stage2Config = serde_json::from_str(
            meta.get(META_CONFIG)
                .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint has no config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("stage-2 checkpoint config unreadable: {e}")))?;
        let (weights, _optim, ema) = split_stage2_checkpoint(tensors);
        let mut models = Stage2Models::new(&stage2, frozen, device)?;
        models.ps.restore(if use_ema { &ema } else { &weights })?;
        Ok(Self { models, stage2, device: device.clone() })
    }

    /// Latent spatial size the denoiser was trained at: the stage-1 input
    /// resolution (the encoder preserves spatial size).
    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = self.models.frozen.config.encoder.channels;
        let h = self.models.frozen.config.input_height;
        let w = self.models.frozen.config.input_width;
        (c, h, w)
    }

    /// One full flow-matching sample: Gaussian noise integrated to a
    /// normalized latent, then denormalized with the stored statistics.
    fn sample_latent(&self, prompt: &str, seed: u64, steps: usize, cfg_scale: f64) -> Result<Tensor> {
        let cond = self.models.text.encode(prompt)?;
        let null = cond.unconditional();
        let (c, h, w) = self.latent_shape();
        let mut rng = stream_rng(seed, Stream::SampleInit, 0);
        let z_norm = euler_sample(
            |u, t, branch| {
                let cond = match branch {
                    Branch::Conditional => &cond,
                    Branch::Unconditional => &null,
                };
                self.models.denoiser.denoise(u, t, cond)
            },
            &[c, h, w],
            steps,
            cfg_scale,
            &self.stage2.shift,
            &mut rng,
            DType::F32,
            &self.device,
        )?;
        self.models.frozen.stats.denormalize(&z_norm)
    }

    fn denoise_token_count(&self) -> Result<usize> {
        let (_, h, w) = self.latent_shape();
        self.stage2.denoiser.token_count(h, w)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    out_dir: &Path,
    prompt: &str,
    height: usize,
    width: usize,
    seed: u64,
    steps: usize,
    cfg_scale: f64,
    use_ema: bool,
    output: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("generate needs at least one step".into()));
    }
    if !(cfg_scale.is_finite() && cfg_scale > 0.0) {
        return Err(Error::Config(format!("cfg_scale must be positive, got {cfg_scale}")));
    }
    let sampler = Sampler::load(out_dir, use_ema, device)?;
    let latent = sampler.sample_latent(prompt, seed, steps, cfg_scale)?;
    let checksum = tensor_checksum(&latent)?;
    let denoise_tokens = sampler.denoise_token_count()?;

    let grid = CoordGrid::new(height, width)?;
    let image = sampler.models.frozen.renderer.render(&NifLatent::new(latent)?, &grid)?;
    let render_tokens = height * width;

    let out_path =
        output.unwrap_or_else(|| out_dir.join(format!("generate_s{seed}_{height}x{width}.png")));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_png(&out_path, &image)?;
    let report = json!({
        "prompt": prompt,
        "seed": seed,
        "height": height,
        "width": width,
        "steps": steps,
        "cfg_scale": cfg_scale,
        "ema": use_ema,
        "latent_checksum": checksum,
        "denoise_tokens": denoise_tokens,
        "render_tokens": render_tokens,
        "image": out_path.display().to_string(),
    });
    std::fs::write(
        out_path.with_extension("json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Msg(e.to_string()))? + "\n",
    )?;

    println!("prompt: {prompt}");
    println!("seed {seed}  steps {steps}  cfg_scale {cfg_scale}  ema {use_ema}");
    println!("latent checksum: {checksum}");
    println!("denoise tokens: {denoise_tokens} (independent of output size)");
    println!("render tokens: {render_tokens} ({height}x{width})");
    println!("image: {}", out_path.display());
    Ok(())
}

fn cmd_reconstruct(
    out_dir: &Path,
    image_path: &Path,
    scale: f64,
    ground_truth: Option<&Path>,
    output: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let (_config, _ps, encoder, renderer) =
        load_stage1_weights(&out_dir.join(STAGE1_CHECKPOINT), device)?;
    let image = load_png(image_path, device)?;
    let (_, h, w) = image.dims3()?;
    let th = ((scale * h as f64).round() as usize).max(1);
    let tw = ((scale * w as f64).round() as usize).max(1);

    let latent = encoder.encode(&image)?;
    let grid = CoordGrid::new(th, tw)?;
    let out = renderer.render(&latent, &grid)?;

    // L1 against the given reference, or against the input when the output
    // is the same size as the input.
    let reference = match ground_truth {
        Some(path) => Some(load_png(path, device)?),
        None if (th, tw) == (h, w) => Some(image.clone()),
        None => None,
    };
    let l1 = match &reference {
        Some(r) => {
            if r.dims() != out.dims() {
                return Err(Error::Shape(format!(
                    "reference {:?} does not match output {:?}",
                    r.dims(),
                    out.dims()
                )));
            }
            Some((&out - r)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        }
        None => None,
    };

    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let out_path =
        output.unwrap_or_else(|| out_dir.join(format!("reconstruct_{stem}_x{scale}.png")));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_png(&out_path, &out)?;

    println!("input: {} ({h}x{w})", image_path.display());
    println!("scale {scale} -> {th}x{tw}");
    match l1 {
        Some(l1) => println!("L1 vs reference: {l1:.6}"),
        None => println!("L1 vs reference: (no reference at this size)"),
    }
    println!("image: {}", out_path.display());
    Ok(())
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Run `f` once per warm-up, then `runs` more times; the median wall time in
/// milliseconds and the last result are returned.
fn time_phase<T>(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs {
        let started = Instant::now();
        let value = f()?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
        last = Some(value);
    }
    Ok((median_ms(times), last.expect("runs is validated positive")))
}

fn cmd_bench_scaling(
    cfg: &RunConfig,
    out_dir: &Path,
    prompt: &str,
    seed: u64,
    sizes: &[(usize, usize)],
    json_path: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("bench needs at least one size".into()));
    }
    let steps = cfg.generate.steps;
    let cfg_scale = cfg.generate.cfg_scale;
    let sampler = Sampler::load(out_dir, cfg.generate.use_ema, device)?;
    let denoise_tokens = sampler.denoise_token_count()?;
    let (warmup, runs) = (cfg.bench.warmup, cfg.bench.runs);

    let mut rows = Vec::new();
    println!(
        "{:>10}  {:>14}  {:>13}  {:>11}  {:>10}  latent checksum",
        "size", "denoise tokens", "render tokens", "denoise ms", "render ms"
    );
    for &(h, w) in sizes {
        // The denoise phase is repeated per size on purpose: its token count
        // and its wall time must come out independent of the output size.
        let (denoise_ms, latent) = time_phase(warmup, runs, || {
            sampler.sample_latent(prompt, seed, steps, cfg_scale)
        })?;
        let checksum = tensor_checksum(&latent)?;
        let grid = CoordGrid::new(h, w)?;
        let nif = NifLatent::new(latent)?;
        let (render_ms, _image) =
            time_phase(warmup, runs, || sampler.models.frozen.renderer.render(&nif, &grid))?;
        let render_tokens = h * w;
        println!(
            "{:>10}  {:>14}  {:>13}  {:>11.2}  {:>10.2}  {}",
            format!("{h}x{w}"),
            denoise_tokens,
            render_tokens,
            denoise_ms,
            render_ms,
            checksum,
        );
        rows.push(json!({
            "height": h,
            "width": w,
            "denoise_tokens": denoise_tokens,
            "render_tokens": render_tokens,
            "denoise_ms": denoise_ms,
            "render_ms": render_ms,
            "latent_checksum": checksum,
        }));
    }

    let report = json!({
        "prompt": prompt,
        "seed": seed,
        "steps": steps,
        "cfg_scale": cfg_scale,
        "ema": cfg.generate.use_ema,
        "warmup": warmup,
        "runs": runs,
        "rows": rows,
    });
    let json_path = json_path.unwrap_or_else(|| out_dir.join("bench.json"));
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Msg(e.to_string()))? + "\n",
    )?;
    println!("report: {}", json_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_strings_parse_or_fail_cleanly() {
        assert_eq!(parse_size("128x96").unwrap(), (128, 96));
        assert_eq!(parse_size("64X64").unwrap(), (64, 64));
        assert_eq!(parse_size(" 32 x 48 ").unwrap(), (32, 48));
        assert!(parse_size("128").is_err());
        assert!(parse_size("ax b").is_err());
        assert!(parse_size("4x64").is_err());
    }

    #[test]
    fn median_handles_odd_and_even_counts() {
        assert_eq!(median_ms(vec![5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median_ms(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median_ms(vec![7.0]), 7.0);
    }
}

//! Text-conditioned velocity denoiser over normalized latents.
//!
//! The latent is unfolded into non-overlapping patches, compressed through
//! a bottleneck into hidden tokens, refined text tokens are attended to by
//! a stack of gated transformer blocks, and a final projection folds the
//! tokens back to a velocity field of the latent's shape. A feature tap at
//! a fixed block feeds an alignment loss against frozen teacher features.
//! The token count depends only on the latent shape and patch size, never
//! on any requested output resolution.

mod blocks;
mod text;

pub use blocks::{ImageBlock, TextRefineBlock, TimestepEmbed};
pub use text::{text_backend, HashEmbedStub, TextCondition, TextEncoder};

use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::TeacherFeatures;
use crate::params::{linear, ParamStore};

use blocks::FinalLayer;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub bottleneck_dim: usize,
    pub text_refine_blocks: usize,
    pub repa_block_index: usize,
    pub repa_weight: f64,
    pub text_len: usize,
    pub text_dim: usize,
    /// Channel width of the teacher features the alignment head projects to.
    pub teacher_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            hidden_dim: 256,
            num_blocks: 8,
            num_heads: 4,
            patch_size: 4,
            bottleneck_dim: 256,
            text_refine_blocks: 2,
            repa_block_index: 4,
            repa_weight: 0.5,
            text_len: 16,
            text_dim: 64,
            teacher_dim: 64,
        }
    }
}

impl DenoiserConfig {
    /// Full-scale preset: too large to train in tests, but constructible
    /// and validated so the configuration path is exercised end to end.
    pub fn paper_preset() -> Self {
        Self {
            latent_channels: 16,
            hidden_dim: 1536,
            num_blocks: 16,
            num_heads: 24,
            patch_size: 16,
            bottleneck_dim: 1024,
            text_refine_blocks: 4,
            repa_block_index: 8,
            repa_weight: 0.5,
            text_len: 128,
            text_dim: 2048,
            teacher_dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("bottleneck_dim", self.bottleneck_dim),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
            ("teacher_dim", self.teacher_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        // Axial rotary encoding splits each head dimension into row/column
        // halves of rotation pairs.
        if (self.hidden_dim / self.num_heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be a multiple of 4 for axial rotary encoding",
                self.hidden_dim / self.num_heads
            )));
        }
        if self.repa_block_index >= self.num_blocks {
            return Err(Error::Config(format!(
                "repa_block_index {} must be below num_blocks {}",
                self.repa_block_index, self.num_blocks
            )));
        }
        if !(self.repa_weight >= 0.0 && self.repa_weight.is_finite()) {
            return Err(Error::Config(format!(
                "repa_weight must be finite and non-negative, got {}",
                self.repa_weight
            )));
        }
        Ok(())
    }

    /// Tokens a latent of the given spatial size produces.
    pub fn token_count(&self, height: usize, width: usize) -> Result<usize> {
        let (rows, cols) = self.token_grid(height, width)?;
        Ok(rows * cols)
    }

    pub fn token_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(Error::Shape(format!(
                "latent {height}×{width} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }
}

/// Linear interpolation matrix `(output, input)` over cell centers, edges
/// clamped; used to resample the teacher grid onto the token grid.
fn bilinear_matrix(input: usize, output: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f64; output * input];
    for i in 0..output {
        let src = (i as f64 + 0.5) * input as f64 / output as f64 - 0.5;
        let src = src.clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w1 = src - i0 as f64;
        data[i * input + i0] += 1.0 - w1;
        data[i * input + i1] += w1;
    }
    Ok(Tensor::from_vec(data, (output, input), device)?.to_dtype(dtype)?)
}

/// Mean over rows of `1 − cos(a_i, b_i)` for two `(N, D)` feature sets; in
/// `[0, 2]` and invariant to positive per-row rescaling.
pub(crate) fn mean_one_minus_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let norms = |x: &Tensor| -> Result<Tensor> {
        Ok((x.sqr()?.sum_keepdim(1)? + 1e-16)?.sqrt()?)
    };
    let dots = (a * b)?.sum_keepdim(1)?;
    let cos = (dots / ((norms(a)? * norms(b)?)? + 1e-8)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// The denoiser: predicts the flow-matching velocity for a normalized
/// latent at timestep `t` under a text condition.
pub struct Denoiser {
    cfg: DenoiserConfig,
    bottleneck: Linear,
    embed: Linear,
    t_embed: TimestepEmbed,
    text_in: Linear,
    text_blocks: Vec<TextRefineBlock>,
    blocks: Vec<ImageBlock>,
    final_layer: FinalLayer,
    repa_fc1: Linear,
    repa_fc2: Linear,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let patch_dim = cfg.latent_channels * cfg.patch_size * cfg.patch_size;
        let mut text_blocks = Vec::with_capacity(cfg.text_refine_blocks);
        for i in 0..cfg.text_refine_blocks {
            text_blocks.push(TextRefineBlock::new(ps, &format!("{prefix}.text_block{i}"), d, cfg.num_heads)?);
        }
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(ImageBlock::new(ps, &format!("{prefix}.block{i}"), d, cfg.num_heads)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            bottleneck: linear(ps, &format!("{prefix}.bottleneck"), patch_dim, cfg.bottleneck_dim)?,
            embed: linear(ps, &format!("{prefix}.embed"), cfg.bottleneck_dim, d)?,
            t_embed: TimestepEmbed::new(ps, &format!("{prefix}.t_embed"), d)?,
            text_in: linear(ps, &format!("{prefix}.text_in"), cfg.text_dim, d)?,
            text_blocks,
            blocks,
            final_layer: FinalLayer::new(ps, &format!("{prefix}.final"), d, patch_dim)?,
            repa_fc1: linear(ps, &format!("{prefix}.repa_head.fc1"), d, d)?,
            repa_fc2: linear(ps, &format!("{prefix}.repa_head.fc2"), d, cfg.teacher_dim)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Unfold `(C, H, W)` into per-patch rows `(N, C·p²)`, channel-major
    /// within each patch. Exact inverse of [`Self::unpatchify`].
    pub(crate) fn patchify(&self, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = z.dims3()?;
        let p = self.cfg.patch_size;
        let (rows, cols) = self.cfg.token_grid(h, w)?;
        let x = z.reshape((c, rows, p, cols, p))?;
        let x = x.permute((1, 3, 0, 2, 4))?.contiguous()?;
        Ok(x.reshape((rows * cols, c * p * p))?)
    }

    /// Fold `(N, C·p²)` rows back to `(C, H, W)`.
    pub(crate) fn unpatchify(&self, tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let p = self.cfg.patch_size;
        let c = self.cfg.latent_channels;
        let (rows, cols) = self.cfg.token_grid(height, width)?;
        let x = tokens.reshape((rows, cols, c, p, p))?;
        let x = x.permute((2, 0, 3, 1, 4))?.contiguous()?;
        Ok(x.reshape((c, height, width))?)
    }

    /// Patch rows through the bottleneck into hidden tokens `(N, hidden)`.
    pub fn patch_embed(&self, z: &Tensor) -> Result<Tensor> {
        let (c, _, _) = z.dims3()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "denoiser was built for {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        let patches = self.patchify(z)?;
        Ok(self.embed.forward(&self.bottleneck.forward(&patches)?)?)
    }

    fn probe_finite(&self, x: &Tensor, stage: &str) -> Result<()> {
        let s = x.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("denoiser activations at {stage}")));
        }
        Ok(())
    }

    /// Predicted velocity for `u_t` at timestep `t`, same shape as `u_t`.
    pub fn denoise(&self, u_t: &Tensor, t: f64, cond: &TextCondition) -> Result<Tensor> {
        Ok(self.denoise_with_features(u_t, t, cond)?.0)
    }

    /// As [`Self::denoise`], also returning the hidden tokens after the
    /// alignment tap block for the feature-alignment loss.
    pub fn denoise_with_features(
        &self,
        u_t: &Tensor,
        t: f64,
        cond: &TextCondition,
    ) -> Result<(Tensor, Tensor)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("timestep must lie in [0, 1], got {t}")));
        }
        let (_, h, w) = u_t.dims3()?;
        let (rows, cols) = self.cfg.token_grid(h, w)?;
        if cond.len() != self.cfg.text_len || cond.dim() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "text condition {}×{} does not match config {}×{}",
                cond.len(),
                cond.dim(),
                self.cfg.text_len,
                self.cfg.text_dim
            )));
        }

        let cvec = self.t_embed.forward(t, u_t.dtype(), u_t.device())?;
        let mut text = self.text_in.forward(cond.tokens())?;
        for (i, block) in self.text_blocks.iter().enumerate() {
            text = block.forward(&text, &cvec)?;
            self.probe_finite(&text, &format!("text block {i}"))?;
        }

        let mut x = self.patch_embed(u_t)?;
        self.probe_finite(&x, "patch embedding")?;
        let mut repa_features = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &text, &cvec, rows, cols)?;
            self.probe_finite(&x, &format!("image block {i}"))?;
            if i == self.cfg.repa_block_index {
                repa_features = Some(x.clone());
            }
        }
        let out = self.final_layer.forward(&x, &cvec)?;
        self.probe_finite(&out, "final layer")?;
        let velocity = self.unpatchify(&out, h, w)?;
        let features = repa_features.expect("repa_block_index < num_blocks is validated");
        Ok((velocity, features))
    }

    /// Feature-alignment loss: project tapped tokens `(N, hidden)` to the
    /// teacher width, resample the teacher grid to the token grid, and take
    /// the mean cosine gap. Gradients reach the denoiser; the teacher is
    /// already detached.
    pub fn repa_loss(
        &self,
        features: &Tensor,
        teacher: &TeacherFeatures,
        token_grid: (usize, usize),
    ) -> Result<Tensor> {
        let projected = self.repa_fc2.forward(&self.repa_fc1.forward(features)?.silu()?)?;
        if teacher.channels() != self.cfg.teacher_dim {
            return Err(Error::Shape(format!(
                "projected features have width {} but teacher provides {}",
                self.cfg.teacher_dim,
                teacher.channels()
            )));
        }
        let (rows, cols) = token_grid;
        if projected.dim(0)? != rows * cols {
            return Err(Error::Shape(format!(
                "feature rows {} do not cover the {rows}×{cols} token grid",
                projected.dim(0)?
            )));
        }
        let (hp, wp) = teacher.grid();
        let values = teacher.values().to_dtype(projected.dtype())?;
        let r = bilinear_matrix(hp, rows, projected.dtype(), projected.device())?.unsqueeze(0)?;
        let c = bilinear_matrix(wp, cols, projected.dtype(), projected.device())?
            .t()?
            .contiguous()?
            .unsqueeze(0)?;
        let resampled = r.broadcast_matmul(&values)?.broadcast_matmul(&c)?;
        let d = teacher.channels();
        let teacher_rows = resampled.reshape((d, rows * cols))?.t()?.contiguous()?;
        mean_one_minus_cosine(&projected, &teacher_rows)
    }
}

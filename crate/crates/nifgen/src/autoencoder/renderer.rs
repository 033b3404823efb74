//! Coordinate-queried attention renderer.
//!
//! Rendering builds one token per output pixel — a linear projection of the
//! nearest latent feature concatenated with the query's offset from that
//! feature's center, the query cell extent in latent units, and the absolute
//! coordinate — then runs a stack of windowed-attention transformer blocks
//! over the token grid and projects to RGB. Odd-indexed blocks shift their
//! windows by half a window so information crosses window boundaries, with
//! the mask from [`crate::geometry::partition_windows`] keeping wrapped
//! windows apart. Cost is linear in the number of output pixels.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::NifLatent;
use crate::error::{Error, Result};
use crate::geometry::{partition_windows, query_geometry, CoordGrid};
use crate::params::{layer_norm, linear, linear_zero, softmax, Init, LayerNorm, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RendererConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub window: usize,
    pub ffn_expansion: usize,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, num_blocks: 4, num_heads: 4, window: 8, ffn_expansion: 2 }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("renderer needs at least one block".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::Config(format!(
                "window must be even and at least 2, got {}",
                self.window
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be positive".into()));
        }
        Ok(())
    }
}

/// Learned relative position bias: a `(2W−1)² × heads` table indexed by the
/// relative displacement between query and key positions within a window.
/// Pure lookup, so permuting tokens permutes the bias matrix consistently.
#[derive(Debug)]
pub struct RelPosBias {
    table: Tensor,
    index: Tensor,
    window: usize,
    heads: usize,
}

impl RelPosBias {
    pub fn new(ps: &mut ParamStore, name: &str, window: usize, heads: usize) -> Result<Self> {
        let side = 2 * window - 1;
        let table = ps.var(&format!("{name}.table"), &[side * side, heads], Init::TruncNormal { std: 0.02 })?;
        let t = window * window;
        let mut idx = Vec::with_capacity(t * t);
        for a in 0..t {
            for b in 0..t {
                let (ya, xa) = (a / window, a % window);
                let (yb, xb) = (b / window, b % window);
                let dy = ya as i64 - yb as i64 + window as i64 - 1;
                let dx = xa as i64 - xb as i64 + window as i64 - 1;
                idx.push((dy * side as i64 + dx) as u32);
            }
        }
        let index = Tensor::from_vec(idx, t * t, ps.device())?;
        Ok(Self { table, index, window, heads })
    }

    /// Bias matrix `(heads, W², W²)` for adding to attention logits.
    pub fn bias(&self) -> Result<Tensor> {
        let t = self.window * self.window;
        let b = self.table.index_select(&self.index, 0)?;
        Ok(b.reshape((t, t, self.heads))?.permute((2, 0, 1))?.contiguous()?)
    }
}

/// Multi-head attention within fixed windows, with relative position bias
/// and an optional additive mask shared across the batch.
#[derive(Debug)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias: RelPosBias,
    heads: usize,
    head_dim: usize,
}

impl WindowAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(Self {
            qkv: linear(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(ps, &format!("{name}.proj"), dim, dim)?,
            bias: RelPosBias::new(ps, &format!("{name}.bias"), window, heads)?,
            heads,
            head_dim: dim / heads,
        })
    }

    /// `windows` is `(batch·num_windows, T, D)`; `mask` is
    /// `(num_windows, T, T)` when present.
    pub fn forward(&self, windows: &Tensor, mask: Option<&Tensor>, batch: usize) -> Result<Tensor> {
        let (bw, t, d) = windows.dims3()?;
        let (h, hd) = (self.heads, self.head_dim);
        let qkv = self.qkv.forward(windows)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((bw, t, h, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut attn = q
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?
            .matmul(&k.transpose(2, 3)?.contiguous()?)?;
        attn = attn.broadcast_add(&self.bias.bias()?)?;
        if let Some(m) = mask {
            let nw = bw / batch;
            attn = attn
                .reshape((batch, nw, h, t, t))?
                .broadcast_add(&m.unsqueeze(1)?)?
                .reshape((bw, h, t, t))?;
        }
        let attn = softmax(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, t, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

/// Gated feed-forward: project to two halves, gate one with GELU of the
/// other, project back.
#[derive(Debug)]
pub struct GatedFfn {
    fused_in: Linear,
    out: Linear,
    intermediate: usize,
}

impl GatedFfn {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, expansion: usize) -> Result<Self> {
        let intermediate = expansion * dim;
        Ok(Self {
            fused_in: linear(ps, &format!("{name}.fused_in"), dim, 2 * intermediate)?,
            out: linear(ps, &format!("{name}.out"), intermediate, dim)?,
            intermediate,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let both = self.fused_in.forward(x)?;
        let x1 = both.narrow(last, 0, self.intermediate)?;
        let x2 = both.narrow(last, self.intermediate, self.intermediate)?;
        Ok(self.out.forward(&(x1.gelu()? * x2)?)?)
    }
}

/// One pre-norm transformer block over the `(B, H, W, D)` token grid:
/// `x + Attn(LN(x))` with windowed attention, then `x + FFN(LN(x))`.
#[derive(Debug)]
struct RendererBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    ffn: GatedFfn,
    window: usize,
    shift: usize,
}

impl RendererBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = x.dim(0)?;
        let y = self.norm1.forward(x)?;
        let part = partition_windows(&y, self.window, self.shift)?;
        let a = self.attn.forward(&part.windows, part.mask.as_ref(), batch)?;
        let x = (x + part.merge(&a)?)?;
        let y = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&y)?)?)
    }
}

/// Decodes a latent field onto any coordinate grid.
#[derive(Debug)]
pub struct Renderer {
    cfg: RendererConfig,
    latent_channels: usize,
    token_in: Linear,
    blocks: Vec<RendererBlock>,
    final_norm: LayerNorm,
    rgb_out: Linear,
}

impl Renderer {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &RendererConfig,
        latent_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        // Token input width: latent feature + Δq (2) + Δc (2) + q (2).
        let token_in = linear(ps, &format!("{prefix}.token_in"), latent_channels + 6, d)?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(RendererBlock {
                norm1: layer_norm(ps, &format!("{prefix}.block{i}.norm1"), d)?,
                attn: WindowAttention::new(
                    ps,
                    &format!("{prefix}.block{i}.attn"),
                    d,
                    cfg.num_heads,
                    cfg.window,
                )?,
                norm2: layer_norm(ps, &format!("{prefix}.block{i}.norm2"), d)?,
                ffn: GatedFfn::new(ps, &format!("{prefix}.block{i}.ffn"), d, cfg.ffn_expansion)?,
                window: cfg.window,
                // Alternate plain and shifted windows so information can
                // cross window boundaries every other block.
                shift: if i % 2 == 1 { cfg.window / 2 } else { 0 },
            });
        }
        // Zero weight plus 0.5 bias: an untrained renderer paints mid-gray,
        // which keeps early training targets in range.
        let rgb_out = linear_zero(ps, &format!("{prefix}.rgb_out"), d, 3, 0.5)?;
        Ok(Self {
            cfg: cfg.clone(),
            latent_channels,
            token_in,
            blocks,
            final_norm: layer_norm(ps, &format!("{prefix}.final_norm"), d)?,
            rgb_out,
        })
    }

    pub fn config(&self) -> &RendererConfig {
        &self.cfg
    }

    /// Raw per-query token inputs `(H'·W', C+6)` in the fixed concatenation
    /// order (feature, Δq, Δc, q).
    fn token_inputs(&self, latent: &Tensor, grid: &CoordGrid) -> Result<Tensor> {
        let (c, h, w) = latent.dims3()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!(
                "renderer was built for {} latent channels, got {c}",
                self.latent_channels
            )));
        }
        let qg = query_geometry(grid, h, w)?;
        let flat = latent.reshape((c, h * w))?.t()?.contiguous()?;
        let feats = flat.index_select(&qg.nearest_flat_tensor(latent.device())?, 0)?;
        let offsets = qg.offsets_tensor(latent.dtype(), latent.device())?;
        let coords = grid.coords_tensor(latent.dtype(), latent.device())?;
        Ok(Tensor::cat(&[&feats, &offsets, &coords], 1)?)
    }

    /// Project per-query inputs into the token grid `(1, H', W', D)`.
    pub fn build_tokens(&self, latent: &NifLatent, grid: &CoordGrid) -> Result<Tensor> {
        let inputs = self.token_inputs(latent.tensor(), grid)?;
        let tokens = self.token_in.forward(&inputs)?;
        Ok(tokens.reshape((1, grid.height(), grid.width(), self.cfg.hidden_dim))?)
    }

    /// Render the latent at the grid's resolution, returning `(3, H', W')`.
    pub fn render(&self, latent: &NifLatent, grid: &CoordGrid) -> Result<Tensor> {
        let mut x = self.build_tokens(latent, grid)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let y = self.final_norm.forward(&x)?;
        let rgb = self.rgb_out.forward(&y)?;
        Ok(rgb.squeeze(0)?.permute((2, 0, 1))?.contiguous()?)
    }

    /// Number of tokens a render at `grid` processes; linear in the pixel
    /// count by construction.
    pub fn render_token_count(&self, grid: &CoordGrid) -> usize {
        grid.height() * grid.width()
    }
}

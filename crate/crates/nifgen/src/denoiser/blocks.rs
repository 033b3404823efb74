//! Transformer building blocks for the denoiser: timestep embedding,
//! zero-initialized adaptive layer-norm modulation, rotary-encoded image
//! self-attention, cross-attention to text, and the SwiGLU feed-forward.
//!
//! Every sub-layer is gated by an AdaLN output whose projection starts at
//! zero, so at initialization each block is exactly the identity on its
//! input tokens and training opens the residual branches gradually.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;

use crate::error::Result;
use crate::params::{linear, linear_zero, softmax, ParamStore, RmsNorm};

/// Sinusoidal features of a scalar timestep: `dim/2` log-spaced frequencies,
/// sine then cosine halves, shape `(1, dim)`.
pub(crate) fn sinusoidal_embedding(
    t: f64,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f64; dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        data[j] = (t * freq).sin();
        data[half + j] = (t * freq).cos();
    }
    Ok(Tensor::from_vec(data, (1, dim), device)?.to_dtype(dtype)?)
}

/// Two-layer MLP over sinusoidal timestep features; its SiLU'd output is
/// the conditioning vector every AdaLN consumes.
#[derive(Debug)]
pub struct TimestepEmbed {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimestepEmbed {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(ps, &format!("{name}.fc1"), dim, dim)?,
            fc2: linear(ps, &format!("{name}.fc2"), dim, dim)?,
            dim,
        })
    }

    /// Conditioning vector `(1, dim)` for a timestep in `[0, 1]`.
    pub fn forward(&self, t: f64, dtype: DType, device: &Device) -> Result<Tensor> {
        let features = sinusoidal_embedding(t, self.dim, dtype, device)?;
        let hidden = self.fc1.forward(&features)?.silu()?;
        Ok(self.fc2.forward(&hidden)?.silu()?)
    }
}

/// Layer normalization without learned affine parameters — AdaLN supplies
/// shift and scale instead.
pub(crate) fn layer_norm_raw(x: &Tensor, eps: f64) -> Result<Tensor> {
    let last = x.rank() - 1;
    let mean = x.mean_keepdim(last)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(last)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// `x·(1 + scale) + shift` with `(1, D)` modulation rows broadcast over
/// tokens.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&scale.affine(1.0, 1.0)?)?.broadcast_add(shift)?)
}

/// Produces `chunks` modulation rows from the conditioning vector through a
/// zero-initialized projection: every shift, scale, and gate starts at 0.
#[derive(Debug)]
pub struct AdaLn {
    projection: Linear,
    dim: usize,
    chunks: usize,
}

impl AdaLn {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, chunks: usize) -> Result<Self> {
        Ok(Self {
            projection: linear_zero(ps, &format!("{name}.projection"), dim, chunks * dim, 0.0)?,
            dim,
            chunks,
        })
    }

    pub fn forward(&self, cond: &Tensor) -> Result<Vec<Tensor>> {
        let all = self.projection.forward(cond)?;
        (0..self.chunks).map(|i| Ok(all.narrow(1, i * self.dim, self.dim)?)).collect()
    }
}

/// Rotation tables for axial 2D rotary encoding on a `rows × cols` token
/// grid: the first half of each head's pair slots turns with the row index,
/// the second half with the column index. Returns `(cos, sin)`, each
/// `(rows·cols, head_dim/2)`.
fn rope_tables(
    rows: usize,
    cols: usize,
    head_dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let half = head_dim / 2;
    let quarter = head_dim / 4;
    let n = rows * cols;
    let mut cos = vec![0f64; n * half];
    let mut sin = vec![0f64; n * half];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * half;
            for j in 0..half {
                let (pos, k) = if j < quarter { (r as f64, j) } else { (c as f64, j - quarter) };
                let theta = pos * (-(10000f64.ln()) * k as f64 / quarter as f64).exp();
                cos[base + j] = theta.cos();
                sin[base + j] = theta.sin();
            }
        }
    }
    Ok((
        Tensor::from_vec(cos, (n, half), device)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (n, half), device)?.to_dtype(dtype)?,
    ))
}

/// Rotate `(heads, N, head_dim)` queries or keys by the axial tables. Pairs
/// are `(x_j, x_{j+head_dim/2})`, each a proper 2D rotation, so norms are
/// preserved and dot products depend only on per-axis index differences.
pub(crate) fn axial_rope(x: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (_, n, hd) = x.dims3()?;
    debug_assert_eq!(n, rows * cols);
    let (cos, sin) = rope_tables(rows, cols, hd, x.dtype(), x.device())?;
    let half = hd / 2;
    let x1 = x.narrow(2, 0, half)?;
    let x2 = x.narrow(2, half, half)?;
    let out1 = (x1.broadcast_mul(&cos)? - x2.broadcast_mul(&sin)?)?;
    let out2 = (x1.broadcast_mul(&sin)? + x2.broadcast_mul(&cos)?)?;
    Ok(Tensor::cat(&[&out1, &out2], 2)?)
}

/// Split `(N, D)` into `(heads, N, D/heads)`.
fn to_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    Ok(x.reshape((n, heads, d / heads))?.transpose(0, 1)?.contiguous()?)
}

/// Inverse of [`to_heads`].
fn from_heads(x: &Tensor) -> Result<Tensor> {
    let (h, n, hd) = x.dims3()?;
    Ok(x.transpose(0, 1)?.reshape((n, h * hd))?)
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let hd = q.dim(2)?;
    let logits = q
        .affine(1.0 / (hd as f64).sqrt(), 0.0)?
        .matmul(&k.transpose(1, 2)?.contiguous()?)?;
    Ok(softmax(&logits)?.matmul(v)?)
}

/// Plain multi-head self-attention (used on text tokens).
#[derive(Debug)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: linear(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(ps, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        let qkv = self.qkv.forward(x)?;
        let q = to_heads(&qkv.narrow(1, 0, d)?, self.heads)?;
        let k = to_heads(&qkv.narrow(1, d, d)?, self.heads)?;
        let v = to_heads(&qkv.narrow(1, 2 * d, d)?, self.heads)?;
        Ok(self.proj.forward(&from_heads(&attend(&q, &k, &v)?)?)?)
    }
}

/// Image-token self-attention: RMS-normalized queries and keys with axial
/// rotary position encoding.
#[derive(Debug)]
pub struct ImageSelfAttention {
    qkv: Linear,
    proj: Linear,
    q_norm: RmsNorm,
    k_norm: RmsNorm,
    heads: usize,
}

impl ImageSelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let hd = dim / heads;
        Ok(Self {
            qkv: linear(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(ps, &format!("{name}.proj"), dim, dim)?,
            q_norm: RmsNorm::new(ps, &format!("{name}.q_norm"), hd)?,
            k_norm: RmsNorm::new(ps, &format!("{name}.k_norm"), hd)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        let qkv = self.qkv.forward(x)?;
        let q = to_heads(&qkv.narrow(1, 0, d)?, self.heads)?;
        let k = to_heads(&qkv.narrow(1, d, d)?, self.heads)?;
        let v = to_heads(&qkv.narrow(1, 2 * d, d)?, self.heads)?;
        let q = axial_rope(&self.q_norm.forward(&q)?, rows, cols)?;
        let k = axial_rope(&self.k_norm.forward(&k)?, rows, cols)?;
        Ok(self.proj.forward(&from_heads(&attend(&q, &k, &v)?)?)?)
    }
}

/// Cross-attention: image queries against text keys/values, RMS-normalized
/// Q and K, no positional encoding across modalities.
#[derive(Debug)]
pub struct CrossAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    q_norm: RmsNorm,
    k_norm: RmsNorm,
    heads: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let hd = dim / heads;
        Ok(Self {
            q: linear(ps, &format!("{name}.q"), dim, dim)?,
            kv: linear(ps, &format!("{name}.kv"), dim, 2 * dim)?,
            proj: linear(ps, &format!("{name}.proj"), dim, dim)?,
            q_norm: RmsNorm::new(ps, &format!("{name}.q_norm"), hd)?,
            k_norm: RmsNorm::new(ps, &format!("{name}.k_norm"), hd)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        let d = x.dim(1)?;
        let q = self.q_norm.forward(&to_heads(&self.q.forward(x)?, self.heads)?)?;
        let kv = self.kv.forward(text)?;
        let k = self.k_norm.forward(&to_heads(&kv.narrow(1, 0, d)?, self.heads)?)?;
        let v = to_heads(&kv.narrow(1, d, d)?, self.heads)?;
        Ok(self.proj.forward(&from_heads(&attend(&q, &k, &v)?)?)?)
    }
}

/// SwiGLU feed-forward: fused projection to two lobes, SiLU gate, project
/// back down.
#[derive(Debug)]
pub struct SwiGlu {
    fused_in: Linear,
    out: Linear,
    intermediate: usize,
}

/// Feed-forward widening factor for the denoiser blocks.
const FFN_EXPANSION: usize = 4;

impl SwiGlu {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let intermediate = FFN_EXPANSION * dim;
        Ok(Self {
            fused_in: linear(ps, &format!("{name}.fused_in"), dim, 2 * intermediate)?,
            out: linear(ps, &format!("{name}.out"), intermediate, dim)?,
            intermediate,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let both = self.fused_in.forward(x)?;
        let x1 = both.narrow(1, 0, self.intermediate)?;
        let x2 = both.narrow(1, self.intermediate, self.intermediate)?;
        Ok(self.out.forward(&(x1.silu()? * x2)?)?)
    }
}

const LN_EPS: f64 = 1e-6;

/// Text-refinement block: gated self-attention over text tokens with AdaLN
/// modulation from the timestep condition.
#[derive(Debug)]
pub struct TextRefineBlock {
    adaln: AdaLn,
    attn: SelfAttention,
}

impl TextRefineBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            adaln: AdaLn::new(ps, &format!("{name}.adaln"), dim, 3)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.adaln.forward(cond)?;
        let normed = modulate(&layer_norm_raw(x, LN_EPS)?, &m[0], &m[1])?;
        Ok(x.broadcast_add(&self.attn.forward(&normed)?.broadcast_mul(&m[2])?)?)
    }
}

/// Image block: three gated sub-layers — rotary self-attention,
/// cross-attention to text, SwiGLU — each with its own AdaLN modulation.
#[derive(Debug)]
pub struct ImageBlock {
    adaln: AdaLn,
    self_attn: ImageSelfAttention,
    cross_attn: CrossAttention,
    ffn: SwiGlu,
}

impl ImageBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            adaln: AdaLn::new(ps, &format!("{name}.adaln"), dim, 9)?,
            self_attn: ImageSelfAttention::new(ps, &format!("{name}.self_attn"), dim, heads)?,
            cross_attn: CrossAttention::new(ps, &format!("{name}.cross_attn"), dim, heads)?,
            ffn: SwiGlu::new(ps, &format!("{name}.ffn"), dim)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        text: &Tensor,
        cond: &Tensor,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor> {
        let m = self.adaln.forward(cond)?;
        let a = modulate(&layer_norm_raw(x, LN_EPS)?, &m[0], &m[1])?;
        let x = x.broadcast_add(&self.self_attn.forward(&a, rows, cols)?.broadcast_mul(&m[2])?)?;
        let c = modulate(&layer_norm_raw(&x, LN_EPS)?, &m[3], &m[4])?;
        let x = x.broadcast_add(&self.cross_attn.forward(&c, text)?.broadcast_mul(&m[5])?)?;
        let f = modulate(&layer_norm_raw(&x, LN_EPS)?, &m[6], &m[7])?;
        Ok(x.broadcast_add(&self.ffn.forward(&f)?.broadcast_mul(&m[8])?)?)
    }
}

/// Final projection: AdaLN-modulated norm then a zero-initialized linear
/// back to patch pixels, so an untrained denoiser predicts zero velocity.
#[derive(Debug)]
pub struct FinalLayer {
    adaln: AdaLn,
    out: Linear,
}

impl FinalLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            adaln: AdaLn::new(ps, &format!("{name}.adaln"), dim, 2)?,
            out: linear_zero(ps, &format!("{name}.out"), dim, out_dim, 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.adaln.forward(cond)?;
        Ok(self.out.forward(&modulate(&layer_norm_raw(x, LN_EPS)?, &m[0], &m[1])?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::gaussian_tensor;
    use crate::rng::{stream_rng, Stream};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(0.2, 32, DType::F64, &dev()).unwrap();
        let b = sinusoidal_embedding(0.7, 32, DType::F64, &dev()).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(av.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(av, bv);
    }

    #[test]
    fn rope_preserves_norms() {
        let mut rng = stream_rng(1, Stream::Dataset, 0);
        let x = gaussian_tensor(&mut rng, &[2, 6, 8], DType::F64, &dev()).unwrap();
        let y = axial_rope(&x, 2, 3).unwrap();
        let nx = x.sqr().unwrap().sum(2).unwrap().to_vec2::<f64>().unwrap();
        let ny = y.sqr().unwrap().sum(2).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in nx.iter().flatten().zip(ny.iter().flatten()) {
            assert!((a - b).abs() < 1e-10, "rotation must preserve norms: {a} vs {b}");
        }
    }

    #[test]
    fn rope_dot_products_depend_only_on_relative_position() {
        // One query/key pair placed at (0,0)/(1,2) and again shifted by
        // (+2,+1): the rotary dot product must be identical.
        let mut rng = stream_rng(2, Stream::Dataset, 0);
        let q = gaussian_tensor(&mut rng, &[1, 1, 16], DType::F64, &dev()).unwrap();
        let k = gaussian_tensor(&mut rng, &[1, 1, 16], DType::F64, &dev()).unwrap();

        // Embed the two tokens in a 4×4 grid by building the full grid of
        // repeated vectors and rotating; then read out specific positions.
        let qs = q.broadcast_as((1, 16, 16)).unwrap().contiguous().unwrap();
        let ks = k.broadcast_as((1, 16, 16)).unwrap().contiguous().unwrap();
        let qr = axial_rope(&qs, 4, 4).unwrap();
        let kr = axial_rope(&ks, 4, 4).unwrap();

        let dot = |a: &Tensor, ai: usize, b: &Tensor, bi: usize| -> f64 {
            let av = a.narrow(1, ai, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let bv = b.narrow(1, bi, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum()
        };
        // (0,0)→(1,2) versus (2,1)→(3,3): same displacement (1,2).
        let d1 = dot(&qr, 0, &kr, 1 * 4 + 2);
        let d2 = dot(&qr, 2 * 4 + 1, &kr, 3 * 4 + 3);
        assert!((d1 - d2).abs() < 1e-10, "{d1} vs {d2}");
        // A different displacement must (generically) give a different dot.
        let d3 = dot(&qr, 0, &kr, 2 * 4 + 2);
        assert!((d1 - d3).abs() > 1e-8);
    }

    #[test]
    fn image_block_is_identity_at_initialization() {
        let mut ps = ParamStore::new(3, DType::F64, &dev());
        let block = ImageBlock::new(&mut ps, "b", 8, 2).unwrap();
        let t_embed = TimestepEmbed::new(&mut ps, "t", 8).unwrap();
        let cond = t_embed.forward(0.3, DType::F64, &dev()).unwrap();
        let mut rng = stream_rng(4, Stream::Dataset, 0);
        let x = gaussian_tensor(&mut rng, &[4, 8], DType::F64, &dev()).unwrap();
        let text = gaussian_tensor(&mut rng, &[5, 8], DType::F64, &dev()).unwrap();
        let y = block.forward(&x, &text, &cond, 2, 2).unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ys = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(xs, ys, "zeroed gates must make the block an exact identity");
    }

    #[test]
    fn image_block_jacobian_is_identity_at_init() {
        // Finite-difference Jacobian on a 4-token toy block: with all gates
        // zero the map is x ↦ x, so J = I within 1e-4.
        let mut ps = ParamStore::new(5, DType::F64, &dev());
        let block = ImageBlock::new(&mut ps, "b", 8, 2).unwrap();
        let t_embed = TimestepEmbed::new(&mut ps, "t", 8).unwrap();
        let cond = t_embed.forward(0.6, DType::F64, &dev()).unwrap();
        let mut rng = stream_rng(6, Stream::Dataset, 0);
        let x0 = gaussian_tensor(&mut rng, &[4, 8], DType::F64, &dev()).unwrap();
        let text = gaussian_tensor(&mut rng, &[3, 8], DType::F64, &dev()).unwrap();

        let eval = |x: &Tensor| -> Vec<f64> {
            block
                .forward(x, &text, &cond, 2, 2)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let n = base.len();
        let h = 1e-5;
        for i in 0..n {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = eval(&Tensor::from_vec(plus, (4, 8), &dev()).unwrap());
            let fm = eval(&Tensor::from_vec(minus, (4, 8), &dev()).unwrap());
            for j in 0..n {
                let jac = (fp[j] - fm[j]) / (2.0 * h);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (jac - expect).abs() < 1e-4,
                    "J[{j},{i}] = {jac}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn text_block_is_identity_at_initialization() {
        let mut ps = ParamStore::new(7, DType::F64, &dev());
        let block = TextRefineBlock::new(&mut ps, "b", 8, 2).unwrap();
        let t_embed = TimestepEmbed::new(&mut ps, "t", 8).unwrap();
        let cond = t_embed.forward(0.1, DType::F64, &dev()).unwrap();
        let mut rng = stream_rng(8, Stream::Dataset, 0);
        let x = gaussian_tensor(&mut rng, &[6, 8], DType::F64, &dev()).unwrap();
        let y = block.forward(&x, &cond).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn layer_norm_raw_normalizes() {
        let mut rng = stream_rng(9, Stream::Dataset, 0);
        let x = gaussian_tensor(&mut rng, &[5, 16], DType::F64, &dev()).unwrap();
        let y = layer_norm_raw(&x, 1e-6).unwrap();
        let rows = y.to_vec2::<f64>().unwrap();
        for row in rows {
            let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

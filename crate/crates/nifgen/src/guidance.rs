//! Semantic guidance for the latent space: a frozen teacher produces patch
//! features, a small projection branch pools and projects the latent onto
//! the teacher's grid, and two margin losses align the two — per-position
//! cosine agreement and pairwise relational geometry over sampled positions.
//! An adaptive weight balances this distillation term against reconstruction
//! by the ratio of their gradient norms at the encoder's last convolution.
//!
//! The projection branch exists only for distillation; rendering never sees
//! it, so adding or removing guidance cannot change what the renderer
//! computes from a given latent.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{subsample2, Conv3x3, NifLatent};
use crate::error::{Error, Result};
use crate::params::{linear, ParamStore};

/// Patch features from a frozen teacher, laid out `(D_t, H_p, W_p)`.
/// Detached: no gradient ever reaches the teacher.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    values: Tensor,
}

impl TeacherFeatures {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!(
                "teacher features must be (channels, height, width), got {:?}",
                values.dims()
            )));
        }
        let probe = values.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !probe.is_finite() {
            return Err(Error::NonFinite("teacher features".into()));
        }
        Ok(Self { values: values.detach() })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dims3().map(|d| d.0).unwrap_or(0)
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dims3().unwrap_or((0, 0, 0));
        (h, w)
    }
}

/// Margins, sample count, and adaptive-weight constants for distillation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub m_cos: f64,
    pub m_dist: f64,
    pub k: usize,
    pub w_base: f64,
    pub delta1: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { m_cos: 0.5, m_dist: 0.25, k: 256, w_base: 0.1, delta1: 1e-4 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("m_cos", self.m_cos), ("m_dist", self.m_dist)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {m}")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.delta1 > 0.0) {
            return Err(Error::Config(format!("delta1 must be positive, got {}", self.delta1)));
        }
        if !(self.w_base >= 0.0 && self.w_base.is_finite()) {
            return Err(Error::Config(format!("w_base must be finite and non-negative, got {}", self.w_base)));
        }
        Ok(())
    }
}

/// Row-pooling matrix `(output, input)` with the overlapping-bin rule used
/// by adaptive average pooling: bin i covers `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`.
fn pool_matrix(input: usize, output: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; output * input];
    for i in 0..output {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        for j in start..end {
            data[i * input + j] = 1.0 / (end - start) as f64;
        }
    }
    Ok(Tensor::from_vec(data, (output, input), device)?.to_dtype(dtype)?)
}

/// Adaptive average pooling of a `(C, H, W)` map to `(C, out_h, out_w)`,
/// expressed as two matrix products so gradients flow through.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Shape(format!(
            "cannot pool a {h}×{w} map to {out_h}×{out_w}"
        )));
    }
    let rows = pool_matrix(h, out_h, x.dtype(), x.device())?.unsqueeze(0)?;
    let cols = pool_matrix(w, out_w, x.dtype(), x.device())?.t()?.contiguous()?.unsqueeze(0)?;
    Ok(rows.broadcast_matmul(x)?.broadcast_matmul(&cols)?)
}

/// Pools the latent to the teacher grid and projects channels with a 1×1
/// convolution. Trains jointly with the encoder but feeds only the
/// distillation losses.
#[derive(Debug)]
pub struct ProjectionBranch {
    pool_h: usize,
    pool_w: usize,
    teacher_dim: usize,
    proj: Linear,
}

impl ProjectionBranch {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        latent_channels: usize,
        teacher_dim: usize,
        pool_target: (usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            pool_h: pool_target.0,
            pool_w: pool_target.1,
            teacher_dim,
            proj: linear(ps, &format!("{prefix}.proj"), latent_channels, teacher_dim)?,
        })
    }

    pub fn pool_target(&self) -> (usize, usize) {
        (self.pool_h, self.pool_w)
    }

    /// Student features `(D_t, H_p, W_p)` for the distillation losses.
    pub fn project(&self, latent: &NifLatent) -> Result<Tensor> {
        let pooled = adaptive_avg_pool(latent.tensor(), self.pool_h, self.pool_w)?;
        let (c, h, w) = pooled.dims3()?;
        let rows = pooled.reshape((c, h * w))?.t()?.contiguous()?;
        let projected = self.proj.forward(&rows)?;
        Ok(projected.t()?.reshape((self.teacher_dim, h, w))?.contiguous()?)
    }
}

/// Row-wise L2 norms of `(N, D)` with a floor that keeps the gradient of
/// the square root finite even for all-zero vectors.
fn row_norms(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()?.sum_keepdim(1)? + 1e-16)?.sqrt()?)
}

/// Cosine similarities between all rows of `a` and all rows of `b`, shape
/// `(N, M)`. An epsilon in the denominator keeps zero vectors finite.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dots = a.matmul(&b.t()?.contiguous()?)?;
    let denom = (row_norms(a)?.matmul(&row_norms(b)?.t()?.contiguous()?)? + 1e-8)?;
    Ok((dots / denom)?)
}

/// Flatten `(D, H, W)` features into position rows `(H·W, D)`.
fn position_rows(features: &Tensor) -> Result<Tensor> {
    let (d, h, w) = features.dims3()?;
    Ok(features.reshape((d, h * w))?.t()?.contiguous()?)
}

/// Mean over positions of `max(0, 1 − m_cos − cos(student_i, teacher_i))`.
pub fn margin_cosine_loss(student: &Tensor, teacher: &TeacherFeatures, m_cos: f64) -> Result<Tensor> {
    if student.dims() != teacher.values().dims() {
        return Err(Error::Shape(format!(
            "student features {:?} do not match teacher features {:?}",
            student.dims(),
            teacher.values().dims()
        )));
    }
    let s = position_rows(student)?;
    let t = position_rows(teacher.values())?;
    let dots = (&s * &t)?.sum_keepdim(1)?;
    let denom = ((row_norms(&s)? * row_norms(&t)?)? + 1e-8)?;
    let cos = (dots / denom)?;
    let hinge = cos.affine(-1.0, 1.0 - m_cos)?.relu()?;
    Ok(hinge.mean_all()?)
}

/// Mean over all entries of `max(0, |D_z − D_t| − m_dist)` for two
/// similarity matrices of equal shape.
pub fn matrix_margin_loss(d_student: &Tensor, d_teacher: &Tensor, m_dist: f64) -> Result<Tensor> {
    if d_student.dims() != d_teacher.dims() {
        return Err(Error::Shape("similarity matrices must have equal shapes".into()));
    }
    let gap = (d_student - d_teacher)?.abs()?.affine(1.0, -m_dist)?.relu()?;
    Ok(gap.mean_all()?)
}

/// Relational loss over `k` positions sampled uniformly without replacement
/// — the same index set for student and teacher, drawn from `rng`. When `k`
/// exceeds the position count, every position is used.
pub fn distance_matrix_loss(
    student: &Tensor,
    teacher: &TeacherFeatures,
    k: usize,
    m_dist: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, sh, sw) = student.dims3()?;
    if (sh, sw) != teacher.grid() {
        return Err(Error::Shape(format!(
            "student grid {sh}×{sw} does not match teacher grid {:?}",
            teacher.grid()
        )));
    }
    let n = sh * sw;
    let k = k.min(n);
    let idx: Vec<u32> = rand::seq::index::sample(rng, n, k).iter().map(|i| i as u32).collect();
    let idx = Tensor::from_vec(idx, k, student.device())?;
    let s = position_rows(student)?.index_select(&idx, 0)?;
    let t = position_rows(teacher.values())?.index_select(&idx, 0)?;
    matrix_margin_loss(&cosine_matrix(&s, &s)?, &cosine_matrix(&t, &t)?, m_dist)
}

/// Balance factor for the distillation term:
/// `w_base · clamp(‖∇L_rec‖ / (‖∇L_distill‖ + δ1), 0, 1e8)`, where both
/// norms are taken over the encoder's last convolution parameters. The
/// result is a plain number — no gradient flows through the ratio.
pub fn adaptive_weight(
    grad_rec_norm: f64,
    grad_distill_norm: f64,
    cfg: &DistillConfig,
) -> Result<f64> {
    if grad_rec_norm < 0.0 || grad_distill_norm < 0.0 {
        return Err(Error::Config(format!(
            "gradient norms must be non-negative, got {grad_rec_norm} and {grad_distill_norm}"
        )));
    }
    let ratio = grad_rec_norm / (grad_distill_norm + cfg.delta1);
    Ok(cfg.w_base * ratio.clamp(0.0, 1e8))
}

/// A frozen model mapping an image to patch features.
pub trait Teacher {
    fn name(&self) -> &'static str;
    /// Spatial reduction factor from image pixels to feature cells.
    fn patch_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn forward(&self, image: &Tensor) -> Result<TeacherFeatures>;
}

/// Weights for the stub teacher always come from this seed, so features are
/// identical across instances and processes.
const STUB_TEACHER_SEED: u64 = 0x74656163;

const STUB_TEACHER_CHANNELS: [usize; 4] = [3, 16, 32, 64];

/// Deterministic stand-in for a pretrained vision teacher: three frozen
/// random 3×3 convolutions with GELU between them and stride-2 subsampling
/// after each, so the patch size is 8 and the feature width 64.
pub struct ConvStubTeacher {
    layers: Vec<Conv3x3>,
}

impl ConvStubTeacher {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(STUB_TEACHER_SEED);
        let mut layers = Vec::new();
        for win in STUB_TEACHER_CHANNELS.windows(2) {
            let (c_in, c_out) = (win[0], win[1]);
            let fan_in = 9 * c_in;
            let std = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * c_out)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std)
                .collect();
            let weight = Tensor::from_vec(data, (fan_in, c_out), device)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(c_out, dtype, device)?;
            layers.push(Conv3x3::from_weights(weight, bias));
        }
        Ok(Self { layers })
    }
}

impl Teacher for ConvStubTeacher {
    fn name(&self) -> &'static str {
        "conv_stub"
    }

    fn patch_size(&self) -> usize {
        8
    }

    fn feature_dim(&self) -> usize {
        *STUB_TEACHER_CHANNELS.last().expect("channel list is non-empty")
    }

    fn forward(&self, image: &Tensor) -> Result<TeacherFeatures> {
        let (c, _, _) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("teacher expects an RGB image, got {c} channels")));
        }
        let mut x = image.unsqueeze(0)?.permute((0, 2, 3, 1))?.contiguous()?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.gelu()?;
            }
            x = subsample2(&x)?;
        }
        let features = x.squeeze(0)?.permute((2, 0, 1))?.contiguous()?;
        TeacherFeatures::new(features)
    }
}

/// Look up a teacher by its configured name.
pub fn teacher_backend(name: &str, dtype: DType, device: &Device) -> Result<Box<dyn Teacher>> {
    match name {
        "conv_stub" => Ok(Box::new(ConvStubTeacher::new(dtype, device)?)),
        other => Err(Error::BackendUnavailable(other.to_string(), "conv_stub".into())),
    }
}

//! Reconstruction objective: pixel L1 plus an optional weighted perceptual
//! term computed by a pluggable feature backend.
//!
//! The shipped backends are `"none"` (no perceptual term at all) and
//! `"conv_stack"`, a tiny frozen stack of random convolutions whose weights
//! come from a fixed seed — enough to exercise the full loss path and its
//! gradients without downloading a pretrained network. Real perceptual
//! networks can slot in behind the same trait.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::encoder::Conv3x3;
use crate::error::{Error, Result};

/// Feature-space distance between a prediction and its target. Gradients
/// must flow to `pred`; the backend's own weights are frozen.
pub trait PerceptualLoss {
    fn name(&self) -> &'static str;
    fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor>;
}

/// Weights for the frozen conv stack always come from this seed, so every
/// instance computes the same function and losses are comparable across
/// processes.
const CONV_STACK_SEED: u64 = 0x70657263;

const CONV_STACK_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// Three frozen random 3×3 convolutions with stride-2 subsampling between
/// them. The loss is LPIPS-shaped: channel-unit-normalize each layer's
/// features, sum squared differences over channels, average over positions
/// and layers.
pub struct ConvStackPerceptual {
    layers: Vec<Conv3x3>,
}

impl ConvStackPerceptual {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(CONV_STACK_SEED);
        let mut layers = Vec::new();
        for win in CONV_STACK_CHANNELS.windows(2) {
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

    /// Multi-scale features for a `(B, 3, H, W)` image.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.permute((0, 2, 3, 1))?.contiguous()?;
        let mut feats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(&x)?.relu()?;
            feats.push(x.clone());
            x = subsample2(&x)?;
        }
        Ok(feats)
    }
}

/// Keep every other row and column (stride-2 subsampling, channels-last).
pub(crate) fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let rows: Vec<u32> = (0..h as u32).step_by(2).collect();
    let cols: Vec<u32> = (0..w as u32).step_by(2).collect();
    let ri = Tensor::from_vec(rows, (h + 1) / 2, x.device())?;
    let ci = Tensor::from_vec(cols, (w + 1) / 2, x.device())?;
    Ok(x.index_select(&ri, 1)?.index_select(&ci, 2)?)
}

/// Unit-normalize along the trailing channel axis.
fn channel_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(3)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

impl PerceptualLoss for ConvStackPerceptual {
    fn name(&self) -> &'static str {
        "conv_stack"
    }

    fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let fp = self.features(pred)?;
        let ft = self.features(target)?;
        let mut total: Option<Tensor> = None;
        for (p, t) in fp.iter().zip(ft.iter()) {
            let d = (channel_normalize(p)? - channel_normalize(t)?)?;
            let term = d.sqr()?.sum(3)?.mean_all()?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let total = total.expect("conv stack has at least one layer");
        Ok(total.affine(1.0 / self.layers.len() as f64, 0.0)?)
    }
}

/// Look up a perceptual backend by name. `"none"` means no backend (the
/// perceptual term is identically zero and never computed).
pub fn perceptual_backend(
    name: &str,
    dtype: DType,
    device: &Device,
) -> Result<Option<Box<dyn PerceptualLoss>>> {
    match name {
        "none" => Ok(None),
        "conv_stack" => Ok(Some(Box::new(ConvStackPerceptual::new(dtype, device)?))),
        other => Err(Error::BackendUnavailable(other.to_string(), "none, conv_stack".into())),
    }
}

/// Loss value plus its detached components for logging.
pub struct ReconLoss {
    /// Scalar loss carrying the autodiff graph.
    pub total: Tensor,
    pub l1: f64,
    pub perceptual: f64,
}

/// Mean absolute error plus `omega` times the perceptual distance. When
/// `omega` is zero or no backend is configured, the perceptual branch is
/// skipped entirely — the backend is never invoked.
pub fn reconstruction_loss(
    pred: &Tensor,
    target: &Tensor,
    omega: f64,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<ReconLoss> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::Config(format!("perceptual weight must be finite and non-negative, got {omega}")));
    }
    let l1 = (pred - target)?.abs()?.mean_all()?;
    let l1_value = l1.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let (total, perceptual_value) = match perceptual {
        Some(backend) if omega > 0.0 => {
            // Feature backends want batched (B, 3, H, W) input; lift single
            // images into a batch of one.
            let (p, t) = if pred.rank() == 3 {
                (pred.unsqueeze(0)?, target.unsqueeze(0)?)
            } else {
                (pred.clone(), target.clone())
            };
            let perc = backend.loss(&p, &t)?;
            let value = perc.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            ((l1 + perc.affine(omega, 0.0)?)?, value)
        }
        _ => (l1, 0.0),
    };
    Ok(ReconLoss { total, l1: l1_value, perceptual: perceptual_value })
}

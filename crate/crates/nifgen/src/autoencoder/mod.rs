//! The trained image representation: an encoder producing a dense latent
//! field at input resolution, and a windowed-attention renderer that decodes
//! that field onto any coordinate grid.

mod encoder;
mod loss;
mod renderer;

pub use encoder::{Conv3x3, Encoder, EncoderConfig};
pub(crate) use loss::subsample2;
pub use loss::{
    perceptual_backend, reconstruction_loss, ConvStackPerceptual, PerceptualLoss, ReconLoss,
};
pub use renderer::{GatedFfn, RelPosBias, Renderer, RendererConfig, WindowAttention};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Dense latent field `(channels, height, width)` with the same spatial
/// resolution as the encoder input. This is both the diffusion state space
/// and the renderer input.
#[derive(Debug, Clone)]
pub struct NifLatent {
    tensor: Tensor,
}

impl NifLatent {
    /// Wrap a `(C, H, W)` tensor, verifying rank and finiteness. The tensor
    /// may carry a gradient graph; the finiteness probe does not sever it.
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Shape(format!(
                "latent must be (channels, height, width), got {:?}",
                tensor.shape()
            )));
        }
        let probe: f64 = tensor.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !probe.is_finite() {
            return Err(Error::NonFinite("latent contains NaN or infinite entries".into()));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims3().map(|d| d.0).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        self.tensor.dims3().map(|d| d.1).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.tensor.dims3().map(|d| d.2).unwrap_or(0)
    }
}

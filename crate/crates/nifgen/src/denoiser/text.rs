//! Text conditioning for the denoiser.
//!
//! A [`TextEncoder`] turns a prompt into a fixed-length token matrix plus a
//! learned null embedding used for classifier-free guidance and condition
//! dropping. The shipped backend is a deterministic hashing stub: words map
//! to rows of a learned embedding table, so identical prompts always yield
//! identical conditions and no pretrained language model is needed. A real
//! text encoder can plug in behind the same trait.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::rng::fnv1a;

/// Conditioning tensors for one prompt: `tokens` and `null_embedding`, both
/// `(L, D_text)`. The null embedding rides along so guidance can evaluate
/// the unconditional branch without consulting the encoder again.
#[derive(Debug, Clone)]
pub struct TextCondition {
    tokens: Tensor,
    null: Tensor,
}

impl TextCondition {
    pub fn new(tokens: Tensor, null: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.dims() != null.dims() {
            return Err(Error::Shape(format!(
                "text tokens {:?} and null embedding {:?} must be equal (length, dim) matrices",
                tokens.dims(),
                null.dims()
            )));
        }
        let probe = tokens
            .detach()
            .abs()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if !probe.is_finite() {
            return Err(Error::NonFinite("text condition".into()));
        }
        Ok(Self { tokens, null })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn null_embedding(&self) -> &Tensor {
        &self.null
    }

    /// The same condition with its tokens replaced by the null embedding —
    /// the unconditional branch for guidance and condition dropping.
    pub fn unconditional(&self) -> TextCondition {
        TextCondition { tokens: self.null.clone(), null: self.null.clone() }
    }

    pub fn len(&self) -> usize {
        self.tokens.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims2().map(|d| d.1).unwrap_or(0)
    }
}

/// Maps prompts to conditioning tensors.
pub trait TextEncoder {
    fn name(&self) -> &'static str;
    fn text_len(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<TextCondition>;
}

/// Rows in the stub's embedding table. Collisions are fine — the table is
/// a learned lookup, not a tokenizer.
const STUB_VOCAB: usize = 512;

/// Deterministic stub encoder: whitespace-split words hash into a learned
/// table, padded with the learned null rows out to the fixed length. The
/// empty prompt is exactly the null embedding.
pub struct HashEmbedStub {
    table: Tensor,
    null: Tensor,
    text_len: usize,
    text_dim: usize,
}

impl HashEmbedStub {
    pub fn new(ps: &mut ParamStore, prefix: &str, text_len: usize, text_dim: usize) -> Result<Self> {
        if text_len == 0 || text_dim == 0 {
            return Err(Error::Config("text length and dimension must be positive".into()));
        }
        Ok(Self {
            table: ps.var(&format!("{prefix}.table"), &[STUB_VOCAB, text_dim], Init::Normal { std: 0.02 })?,
            null: ps.var(&format!("{prefix}.null"), &[text_len, text_dim], Init::Normal { std: 0.02 })?,
            text_len,
            text_dim,
        })
    }
}

impl TextEncoder for HashEmbedStub {
    fn name(&self) -> &'static str {
        "hash_stub"
    }

    fn text_len(&self) -> usize {
        self.text_len
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn encode(&self, prompt: &str) -> Result<TextCondition> {
        let ids: Vec<u32> = prompt
            .split_whitespace()
            .take(self.text_len)
            .map(|w| (fnv1a(w) % STUB_VOCAB as u64) as u32)
            .collect();
        let tokens = if ids.is_empty() {
            self.null.clone()
        } else {
            let n = ids.len();
            let idx = Tensor::from_vec(ids, n, self.table.device())?;
            let words = self.table.index_select(&idx, 0)?;
            if n == self.text_len {
                words
            } else {
                Tensor::cat(&[&words, &self.null.narrow(0, n, self.text_len - n)?], 0)?
            }
        };
        TextCondition::new(tokens, self.null.clone())
    }
}

/// Look up a text backend by its configured name.
pub fn text_backend(
    name: &str,
    ps: &mut ParamStore,
    prefix: &str,
    text_len: usize,
    text_dim: usize,
) -> Result<Box<dyn TextEncoder>> {
    match name {
        "hash_stub" => Ok(Box::new(HashEmbedStub::new(ps, prefix, text_len, text_dim)?)),
        other => Err(Error::BackendUnavailable(other.to_string(), "hash_stub".into())),
    }
}

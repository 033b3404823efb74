//! Checkpoint files: named tensors plus string metadata in the safetensors
//! container, written atomically (temp file, then rename). Every file
//! carries a format version, a kind tag, the step counter, and the
//! serialized config that produced it, so a checkpoint is self-describing
//! and resumable without the original config file.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Keys the writer always fills in.
pub const META_FORMAT_VERSION: &str = "format_version";
pub const META_KIND: &str = "kind";
pub const META_STEP: &str = "step";
pub const META_CONFIG: &str = "config";

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            let data = flat.to_vec1::<f32>()?;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            Ok((Dtype::F32, shape, bytes))
        }
        DType::F64 => {
            let data = flat.to_vec1::<f64>()?;
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            Ok((Dtype::F64, shape, bytes))
        }
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

/// Serialize tensors + metadata to safetensors bytes. `format_version` is
/// stamped automatically.
///
/// The container is assembled by hand rather than through the library
/// writer: that writer emits the `__metadata__` object in hash-map order,
/// which varies from process to process and breaks byte-for-byte
/// reproducibility of otherwise identical runs. Here every map in the
/// header is sorted, tensors are laid out in name order with contiguous
/// offsets, and the header is space-padded to an 8-byte boundary, so the
/// bytes are a pure function of the content. Standard readers accept any
/// key order, so the files stay ordinary safetensors.
pub fn encode_checkpoint(
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let jerr = |e: serde_json::Error| Error::Checkpoint(format!("header serialization: {e}"));

    let mut meta = metadata.clone();
    meta.insert(META_FORMAT_VERSION.into(), CHECKPOINT_FORMAT_VERSION.to_string());
    let mut header = serde_json::Map::new();
    header.insert("__metadata__".into(), serde_json::to_value(&meta).map_err(jerr)?);

    let mut payload = Vec::new();
    for (name, t) in tensors {
        let (dtype, shape, bytes) = tensor_bytes(t)?;
        let dtype = match dtype {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        let start = payload.len();
        payload.extend_from_slice(&bytes);
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": dtype,
                "shape": shape,
                "data_offsets": [start, payload.len()],
            }),
        );
    }

    let mut header_bytes =
        serde_json::to_vec(&serde_json::Value::Object(header)).map_err(jerr)?;
    let pad = (8 - header_bytes.len() % 8) % 8;
    header_bytes.extend(std::iter::repeat(b' ').take(pad));

    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse checkpoint bytes into tensors + metadata, validating the format
/// version and restricting dtypes to F32/F64. This is the single decode
/// path for untrusted checkpoint bytes.
pub fn parse_checkpoint(
    bytes: &[u8],
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Checkpoint(format!("not a valid checkpoint container: {e}")))?;
    let (_, meta_block) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
    let metadata: BTreeMap<String, String> = meta_block
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    match metadata.get(META_FORMAT_VERSION) {
        None => return Err(Error::Checkpoint("missing format_version".into())),
        Some(v) if v.parse::<u32>().ok() != Some(CHECKPOINT_FORMAT_VERSION) => {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {v}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        Some(_) => {}
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let vals: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(vals, shape, device)?
            }
            Dtype::F64 => {
                let vals: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect();
                Tensor::from_vec(vals, shape, device)?
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has unsupported dtype {other:?}"
                )));
            }
        };
        let finite = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !finite.is_finite() {
            return Err(Error::Checkpoint(format!("tensor {name} contains non-finite values")));
        }
        tensors.insert(name, t);
    }
    Ok((tensors, metadata))
}

/// Write a checkpoint atomically: serialize, write to a sibling temp file,
/// rename into place.
pub fn save_checkpoint(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_checkpoint(tensors, metadata)?;
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    parse_checkpoint(&bytes, device)
}

/// Hex SHA-256 over a tensor's shape and little-endian payload — a stable
/// identity for "these exact weights/values".
pub fn tensor_checksum(t: &Tensor) -> Result<String> {
    let (dtype, shape, bytes) = tensor_bytes(t)?;
    let mut hasher = Sha256::new();
    hasher.update(format!("{dtype:?}:{shape:?}:").as_bytes());
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

/// Checksum over a whole named tensor map (names included), so any change
/// to any weight changes the digest.
pub fn map_checksum(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(tensor_checksum(t)?.as_bytes());
        hasher.update(b";");
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

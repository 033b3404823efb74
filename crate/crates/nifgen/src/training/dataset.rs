//! Training data sources. Everything implements one small trait: indexed,
//! deterministic access to an RGB image plus a prompt string. The built-in
//! procedural dataset keeps the whole test suite self-contained; the
//! directory dataset reads PNG files with optional `.txt` prompt sidecars.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::load_png;
use crate::rng::{fnv1a, stream_rng, Stream};

pub struct Sample {
    /// `(3, H, W)` f32 in `[0, 1]`.
    pub image: Tensor,
    pub prompt: String,
}

pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fetch one sample. Must be deterministic in `index`.
    fn get(&self, index: usize, device: &Device) -> Result<Sample>;

    /// Stable identity of the data, stored alongside statistics computed
    /// over it.
    fn fingerprint(&self) -> String;
}

const COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.18, 0.15]),
    ("green", [0.18, 0.70, 0.25]),
    ("blue", [0.20, 0.32, 0.85]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("purple", [0.60, 0.25, 0.70]),
    ("orange", [0.95, 0.55, 0.12]),
];

const BACKGROUNDS: &[(&str, [f32; 3], [f32; 3])] = &[
    ("dark", [0.10, 0.10, 0.14], [0.22, 0.22, 0.28]),
    ("light", [0.90, 0.90, 0.86], [0.74, 0.76, 0.72]),
    ("teal", [0.08, 0.40, 0.45], [0.16, 0.55, 0.58]),
    ("gray", [0.40, 0.40, 0.42], [0.58, 0.58, 0.60]),
];

const SHAPES: &[&str] = &["circle", "square", "diamond", "ring"];

/// Procedurally drawn shapes on gradient backgrounds, with template
/// prompts. Every sample is a pure function of `(seed, index)`.
pub struct SyntheticShapes {
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
}

impl SyntheticShapes {
    pub fn new(count: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if count == 0 || height < 8 || width < 8 {
            return Err(Error::Config(format!(
                "synthetic dataset needs count >= 1 and size >= 8x8, got {count} at {height}x{width}"
            )));
        }
        Ok(Self { count, height, width, seed })
    }
}

impl Dataset for SyntheticShapes {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize, device: &Device) -> Result<Sample> {
        if index >= self.count {
            return Err(Error::Config(format!(
                "index {index} out of range for dataset of {}",
                self.count
            )));
        }
        let mut rng = stream_rng(self.seed, Stream::Dataset, index as u64);
        let (h, w) = (self.height, self.width);
        let color_idx = rng.gen_range(0..COLORS.len());
        let bg_idx = rng.gen_range(0..BACKGROUNDS.len());
        let shape_idx = rng.gen_range(0..SHAPES.len());
        let cx = rng.gen_range(0.30..0.70) * w as f64;
        let cy = rng.gen_range(0.30..0.70) * h as f64;
        let radius = rng.gen_range(0.16..0.34) * h.min(w) as f64;

        let (_, fg) = COLORS[color_idx];
        let (_, bg_a, bg_b) = BACKGROUNDS[bg_idx];
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                // Diagonal gradient background.
                let g = (x as f32 / w.max(2) as f32 + y as f32 / h.max(2) as f32) / 2.0;
                let px = (x as f64 + 0.5) - cx;
                let py = (y as f64 + 0.5) - cy;
                // Signed distance to the shape boundary, negative inside.
                let d = match SHAPES[shape_idx] {
                    "circle" => (px * px + py * py).sqrt() - radius,
                    "square" => px.abs().max(py.abs()) - radius,
                    "diamond" => (px.abs() + py.abs()) - radius * std::f64::consts::SQRT_2,
                    _ => ((px * px + py * py).sqrt() - radius).abs() - radius * 0.30, // ring
                };
                // 1.5-pixel soft edge keeps the drawing band-limited.
                let alpha = ((0.5 - d / 1.5).clamp(0.0, 1.0)) as f32;
                for c in 0..3 {
                    let base = bg_a[c] * (1.0 - g) + bg_b[c] * g;
                    data[c * h * w + y * w + x] = base * (1.0 - alpha) + fg[c] * alpha;
                }
            }
        }
        let image = Tensor::from_vec(data, (3, h, w), device)?;
        let prompt = format!(
            "a {} {} on a {} background",
            COLORS[color_idx].0, SHAPES[shape_idx], BACKGROUNDS[bg_idx].0
        );
        Ok(Sample { image, prompt })
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:{}x{}x{}:seed{}", self.count, self.height, self.width, self.seed)
    }
}

/// A directory of `.png` images in filename order; a sibling `<stem>.txt`
/// holds the prompt, absent sidecars mean an empty prompt.
pub struct DirDataset {
    images: Vec<PathBuf>,
}

impl DirDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        images.sort();
        if images.is_empty() {
            return Err(Error::Config(format!("no .png files in {}", dir.display())));
        }
        Ok(Self { images })
    }
}

impl Dataset for DirDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn get(&self, index: usize, device: &Device) -> Result<Sample> {
        let path = self.images.get(index).ok_or_else(|| {
            Error::Config(format!("index {index} out of range for dataset of {}", self.images.len()))
        })?;
        let image = load_png(path, device)?;
        let sidecar = path.with_extension("txt");
        let prompt = match std::fs::read_to_string(&sidecar) {
            Ok(text) => text.trim().to_string(),
            Err(_) => String::new(),
        };
        Ok(Sample { image, prompt })
    }

    fn fingerprint(&self) -> String {
        let mut acc: u64 = 0xcbf29ce484222325;
        for p in &self.images {
            acc ^= fnv1a(&p.to_string_lossy());
            acc = acc.wrapping_mul(0x100000001b3);
        }
        format!("dir:{}:{acc:016x}", self.images.len())
    }
}

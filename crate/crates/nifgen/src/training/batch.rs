//! Multi-resolution supervision pairs. Each pair is a high-resolution crop
//! (the rendering target) plus its antialiased downsample to the fixed
//! encoder input size, so the renderer learns to reconstruct detail above
//! the encoder's resolution.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CoordGrid;
use crate::image_io::resize_bilinear;

/// One supervision pair. A training batch is a slice of these; target
/// sizes vary per element, so they are not stacked.
pub struct Stage1Batch {
    /// Encoder input at the fixed `(H0, W0)`.
    pub x_in: Tensor,
    /// Rendering target: a crop of `round(r·H0) × round(r·W0)` pixels.
    pub x_tar: Tensor,
    /// Query grid spanning the full crop.
    pub grid: CoordGrid,
    /// Crop scale drawn for this pair.
    pub r: f64,
    /// Whether the source was too small and had to be upscaled first.
    pub upscaled: bool,
}

/// Draw a scale, crop the source at a uniform random position, and
/// downsample the crop back to the encoder input size. `round` is
/// round-half-to-even. Sources smaller than the crop are bilinearly
/// upscaled just enough to fit (the `upscaled` flag records this).
pub fn make_stage1_batch(
    image: &Tensor,
    h0: usize,
    w0: usize,
    scale_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Batch> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let (lo, hi) = scale_range;
    if !(lo.is_finite() && hi.is_finite()) || lo < 1.0 || hi < lo {
        return Err(Error::Config(format!(
            "scale range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
        )));
    }
    let r = rng.gen_range(lo..=hi);
    let target_h = (r * h0 as f64).round_ties_even() as usize;
    let target_w = (r * w0 as f64).round_ties_even() as usize;

    let (source, upscaled) = if h < target_h || w < target_w {
        let f = (target_h as f64 / h as f64).max(target_w as f64 / w as f64);
        let new_h = ((h as f64 * f).ceil() as usize).max(target_h);
        let new_w = ((w as f64 * f).ceil() as usize).max(target_w);
        (resize_bilinear(image, new_h, new_w)?, true)
    } else {
        (image.clone(), false)
    };
    let (_, sh, sw) = source.dims3()?;
    let oy = rng.gen_range(0..=sh - target_h);
    let ox = rng.gen_range(0..=sw - target_w);
    let x_tar = source.narrow(1, oy, target_h)?.narrow(2, ox, target_w)?.contiguous()?;
    let x_in = resize_bilinear(&x_tar, h0, w0)?;
    let grid = CoordGrid::new(target_h, target_w)?;
    Ok(Stage1Batch { x_in, x_tar, grid, r, upscaled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::training::dataset::{Dataset, SyntheticShapes};
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    fn test_image(h: usize, w: usize) -> Tensor {
        let ds = SyntheticShapes::new(1, h.max(8), w.max(8), 5).unwrap();
        let img = ds.get(0, &dev()).unwrap().image;
        img.narrow(1, 0, h).unwrap().narrow(2, 0, w).unwrap().contiguous().unwrap()
    }

    fn pixels(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn unit_scale_makes_input_equal_target() {
        let img = test_image(48, 48);
        let mut rng = stream_rng(0, Stream::BatchCrop, 0);
        let b = make_stage1_batch(&img, 16, 16, (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(b.r, 1.0);
        assert_eq!(b.x_tar.dims(), &[3, 16, 16]);
        assert_eq!(pixels(&b.x_in), pixels(&b.x_tar));
        assert!(!b.upscaled);
        assert_eq!(b.grid.cell(), (2.0 / 16.0, 2.0 / 16.0));
    }

    #[test]
    fn double_scale_grid_cell_is_one_sixteenth() {
        let img = test_image(64, 64);
        let mut rng = stream_rng(0, Stream::BatchCrop, 1);
        let b = make_stage1_batch(&img, 16, 16, (2.0, 2.0), &mut rng).unwrap();
        assert_eq!(b.x_tar.dims(), &[3, 32, 32]);
        assert_eq!(b.x_in.dims(), &[3, 16, 16]);
        // cell = (2/32, 2/32): half-cell spacing of 1/16 on each axis.
        let (cy, cx) = b.grid.cell();
        assert_eq!((cy / 2.0, cx / 2.0), (1.0 / 32.0, 1.0 / 32.0));
        assert_eq!(cy, 1.0 / 16.0);
        assert_eq!(cx, 1.0 / 16.0);
    }

    #[test]
    fn rounding_is_half_to_even() {
        let img = test_image(40, 40);
        // 10 * 1.25 = 12.5 rounds to 12; 10 * 1.35 = 13.5 rounds to 14.
        let mut rng = stream_rng(0, Stream::BatchCrop, 2);
        let b = make_stage1_batch(&img, 10, 10, (1.25, 1.25), &mut rng).unwrap();
        assert_eq!(b.x_tar.dims(), &[3, 12, 12]);
        let mut rng = stream_rng(0, Stream::BatchCrop, 3);
        let b = make_stage1_batch(&img, 10, 10, (1.35, 1.35), &mut rng).unwrap();
        assert_eq!(b.x_tar.dims(), &[3, 14, 14]);
    }

    #[test]
    fn same_rng_seed_reproduces_the_batch() {
        let img = test_image(64, 48);
        let run = || {
            let mut rng = stream_rng(9, Stream::BatchCrop, 4);
            make_stage1_batch(&img, 16, 16, (1.0, 2.0), &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.r, b.r);
        assert_eq!(pixels(&a.x_tar), pixels(&b.x_tar));
        assert_eq!(pixels(&a.x_in), pixels(&b.x_in));
    }

    #[test]
    fn crops_vary_with_the_stream_position() {
        let img = test_image(64, 64);
        let mut rng = stream_rng(9, Stream::BatchCrop, 5);
        let a = make_stage1_batch(&img, 16, 16, (1.0, 2.0), &mut rng).unwrap();
        let b = make_stage1_batch(&img, 16, 16, (1.0, 2.0), &mut rng).unwrap();
        // Different draws from the same stream: r or position differs.
        assert!(a.r != b.r || pixels(&a.x_tar) != pixels(&b.x_tar));
    }

    #[test]
    fn small_sources_are_upscaled_then_cropped() {
        let img = test_image(20, 20);
        let mut rng = stream_rng(0, Stream::BatchCrop, 6);
        let b = make_stage1_batch(&img, 16, 16, (1.5, 1.5), &mut rng).unwrap();
        assert!(b.upscaled);
        assert_eq!(b.x_tar.dims(), &[3, 24, 24]);
        assert_eq!(b.x_in.dims(), &[3, 16, 16]);
        // Exactly-fitting sources are not upscaled.
        let img = test_image(24, 24);
        let mut rng = stream_rng(0, Stream::BatchCrop, 7);
        let b = make_stage1_batch(&img, 16, 16, (1.5, 1.5), &mut rng).unwrap();
        assert!(!b.upscaled);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let img = test_image(32, 32);
        let mut rng = stream_rng(0, Stream::BatchCrop, 8);
        assert!(make_stage1_batch(&img, 16, 16, (0.5, 1.0), &mut rng).is_err());
        assert!(make_stage1_batch(&img, 16, 16, (2.0, 1.0), &mut rng).is_err());
        let gray = Tensor::zeros((1usize, 32, 32), candle_core::DType::F32, &dev()).unwrap();
        assert!(make_stage1_batch(&gray, 16, 16, (1.0, 1.0), &mut rng).is_err());
    }
}

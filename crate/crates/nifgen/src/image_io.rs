//! Image files and resampling. Tensors cross this boundary as rank-3
//! `(3, H, W)` f32 in `[0, 1]`; files are 8-bit RGB PNG. Quantization is
//! `round(255 * clamp(v, 0, 1))`, so values survive a save/load roundtrip
//! to within 1/510.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};

/// Quantize one channel value to its 8-bit code.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Convert a `(3, H, W)` tensor in `[0, 1]` to packed 8-bit RGB rows.
pub fn tensor_to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = image.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(data[0][y][x]),
                quantize(data[1][y][x]),
                quantize(data[2][y][x]),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let rgb = tensor_to_rgb8(image)?;
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Decode image bytes (PNG and the other formats the decoder sniffs) into a
/// `(3, H, W)` f32 tensor in `[0, 1]`. Single decode path for untrusted
/// image bytes.
pub fn decode_image_bytes(bytes: &[u8], device: &Device) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    rgb8_to_tensor(&img, device)
}

pub fn load_png(path: &Path, device: &Device) -> Result<Tensor> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    rgb8_to_tensor(&img, device)
}

pub fn rgb8_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Shape(format!("empty image {w}x{h}")));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for ch in 0..3 {
            data[ch * h * w + y * w + x] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?)
}

/// Resampling weights for one axis as a dense `(out, in)` matrix. Triangle
/// (tent) kernel; when shrinking, the kernel support is widened by the
/// scale factor so the result averages over the source footprint instead of
/// point-sampling (the usual antialiasing rule). Rows sum to exactly 1.
fn resample_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    let mut weights = vec![0f64; out_len * in_len];
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).ceil() as i64;
        let hi = (center + support).floor() as i64;
        let mut sum = 0.0;
        let row = &mut weights[i * in_len..(i + 1) * in_len];
        for j in lo..=hi {
            let t = 1.0 - ((j as f64 - center) / support).abs();
            if t <= 0.0 {
                continue;
            }
            // Clamp out-of-range taps to the edge sample.
            let src = j.clamp(0, in_len as i64 - 1) as usize;
            row[src] += t;
            sum += t;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    let m = Tensor::from_vec(weights, (out_len, in_len), device)?;
    Ok(m.to_dtype(dtype)?)
}

/// Resize a `(C, H, W)` tensor to `(C, out_h, out_w)` with a separable
/// triangle filter. Exact identity when the size is unchanged; antialiased
/// (footprint-averaging) when shrinking; ordinary bilinear when growing.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_h}x{out_w}")));
    }
    if out_h == h && out_w == w {
        return Ok(image.clone());
    }
    let rows = resample_matrix(h, out_h, image.dtype(), image.device())?;
    let cols = resample_matrix(w, out_w, image.dtype(), image.device())?
        .t()?
        .contiguous()?;
    // (C, out_h, W) then (C, out_h, out_w).
    let x = rows.broadcast_matmul(image)?;
    Ok(x.broadcast_matmul(&cols)?)
}

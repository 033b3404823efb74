//! Continuous coordinate system shared by the renderer, trainer, and
//! inference pipeline.
//!
//! Conventions, fixed here and relied on everywhere else:
//! - Axis order is (vertical, horizontal) — index `i`/coordinate `y` first —
//!   and storage is row-major.
//! - A grid of `H × W` pixels covers `[-1, 1]²`; pixel `(i, j)` is centered
//!   at `((2i+1)/H − 1, (2j+1)/W − 1)` and the extent of every pixel (its
//!   cell) is `(2/H, 2/W)`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Per-output-pixel coordinates and cell extents for one render request.
#[derive(Debug, Clone)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    row_centers: Vec<f64>,
    col_centers: Vec<f64>,
}

impl CoordGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "coordinate grid dimensions must be positive, got {height}x{width}"
            )));
        }
        let centers = |n: usize| {
            (0..n)
                .map(|i| (2 * i + 1) as f64 / n as f64 - 1.0)
                .collect::<Vec<_>>()
        };
        Ok(Self {
            height,
            width,
            row_centers: centers(height),
            col_centers: centers(width),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Normalized extent of one pixel, `(2/H, 2/W)`; identical for every
    /// pixel of the grid.
    pub fn cell(&self) -> (f64, f64) {
        (2.0 / self.height as f64, 2.0 / self.width as f64)
    }

    pub fn row_centers(&self) -> &[f64] {
        &self.row_centers
    }

    pub fn col_centers(&self) -> &[f64] {
        &self.col_centers
    }

    /// Center of pixel `(i, j)` as `(y, x)`.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.row_centers[i], self.col_centers[j])
    }

    /// All centers as an `(H·W, 2)` tensor in row-major order, `(y, x)` per
    /// row.
    pub fn coords_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut v = Vec::with_capacity(self.height * self.width * 2);
        for y in &self.row_centers {
            for x in &self.col_centers {
                v.push(*y);
                v.push(*x);
            }
        }
        let t = Tensor::from_vec(v, (self.height * self.width, 2), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Geometry of one query grid relative to a latent grid: which latent cell
/// is nearest to each query, the offset to that cell's center, and the
/// query cell extent expressed in latent-grid units.
///
/// Both the nearest index and the offset factor separably over axes because
/// the L∞ nearest center minimizes each axis independently.
#[derive(Debug, Clone)]
pub struct QueryGeometry {
    latent_height: usize,
    latent_width: usize,
    nearest_rows: Vec<usize>,
    nearest_cols: Vec<usize>,
    delta_q_rows: Vec<f64>,
    delta_q_cols: Vec<f64>,
    delta_c: (f64, f64),
}

impl QueryGeometry {
    pub fn latent_dims(&self) -> (usize, usize) {
        (self.latent_height, self.latent_width)
    }

    /// Latent cell `(row, col)` nearest to query pixel `(i, j)`.
    pub fn nearest_index(&self, i: usize, j: usize) -> (usize, usize) {
        (self.nearest_rows[i], self.nearest_cols[j])
    }

    /// Offset `q − q*` from the nearest latent center, `(y, x)`.
    pub fn delta_q(&self, i: usize, j: usize) -> (f64, f64) {
        (self.delta_q_rows[i], self.delta_q_cols[j])
    }

    /// Query cell extent in latent-grid units: `(c_h·H, c_w·W)` where
    /// `(c_h, c_w)` is the query grid's cell. Equals `(2, 2)` when the query
    /// grid matches the latent resolution, and shrinks as the requested
    /// resolution grows.
    pub fn delta_c(&self) -> (f64, f64) {
        self.delta_c
    }

    /// Flat row-major latent indices (`row·W + col`) for every query pixel,
    /// as a `(H'·W',)` tensor of u32, for gathering latent features.
    pub fn nearest_flat_tensor(&self, device: &Device) -> Result<Tensor> {
        let w = self.latent_width as u32;
        let mut v = Vec::with_capacity(self.nearest_rows.len() * self.nearest_cols.len());
        for &r in &self.nearest_rows {
            for &c in &self.nearest_cols {
                v.push(r as u32 * w + c as u32);
            }
        }
        Ok(Tensor::from_vec(v, self.nearest_rows.len() * self.nearest_cols.len(), device)?)
    }

    /// Per-query `(Δq_y, Δq_x, Δc_y, Δc_x)` rows as a `(H'·W', 4)` tensor.
    pub fn offsets_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (dc_y, dc_x) = self.delta_c;
        let h = self.delta_q_rows.len();
        let w = self.delta_q_cols.len();
        let mut v = Vec::with_capacity(h * w * 4);
        for &dy in &self.delta_q_rows {
            for &dx in &self.delta_q_cols {
                v.push(dy);
                v.push(dx);
                v.push(dc_y);
                v.push(dc_x);
            }
        }
        let t = Tensor::from_vec(v, (h * w, 4), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Nearest center index along one axis for a query coordinate, with ties
/// broken toward the lower index.
fn nearest_on_axis(q: f64, n: usize) -> (usize, f64) {
    // Centers are (2k+1)/n − 1; invert for a candidate, then let the
    // neighbor check settle floating-point edge cases. Strict `<` keeps the
    // lower index on exact ties.
    let guess = (((q + 1.0) * n as f64 - 1.0) / 2.0).round() as isize;
    let mut best = guess.clamp(0, n as isize - 1) as usize;
    let center = |k: usize| (2 * k + 1) as f64 / n as f64 - 1.0;
    for cand in [best.saturating_sub(1), best, (best + 1).min(n - 1)] {
        if (q - center(cand)).abs() < (q - center(best)).abs() {
            best = cand;
        }
    }
    // Tie between best and the cell below it: prefer the lower index.
    if best > 0 && (q - center(best - 1)).abs() == (q - center(best)).abs() {
        best -= 1;
    }
    (best, q - center(best))
}

/// Relate a query grid to a latent grid of `latent_height × latent_width`.
pub fn query_geometry(
    grid: &CoordGrid,
    latent_height: usize,
    latent_width: usize,
) -> Result<QueryGeometry> {
    if latent_height == 0 || latent_width == 0 {
        return Err(Error::Config(format!(
            "latent dimensions must be positive, got {latent_height}x{latent_width}"
        )));
    }
    let mut nearest_rows = Vec::with_capacity(grid.height());
    let mut delta_q_rows = Vec::with_capacity(grid.height());
    for &y in grid.row_centers() {
        let (k, d) = nearest_on_axis(y, latent_height);
        nearest_rows.push(k);
        delta_q_rows.push(d);
    }
    let mut nearest_cols = Vec::with_capacity(grid.width());
    let mut delta_q_cols = Vec::with_capacity(grid.width());
    for &x in grid.col_centers() {
        let (k, d) = nearest_on_axis(x, latent_width);
        nearest_cols.push(k);
        delta_q_cols.push(d);
    }
    let (c_h, c_w) = grid.cell();
    Ok(QueryGeometry {
        latent_height,
        latent_width,
        nearest_rows,
        nearest_cols,
        delta_q_rows,
        delta_q_cols,
        delta_c: (c_h * latent_height as f64, c_w * latent_width as f64),
    })
}

/// Cyclically roll a `(B, H, W, D)` tensor up-left by `(shift_h, shift_w)`:
/// output position `(i, j)` takes input `((i + shift_h) mod H, (j + shift_w)
/// mod W)`. `unroll` with the same shifts inverts it.
pub fn cyclic_shift(x: &Tensor, shift_h: usize, shift_w: usize) -> Result<Tensor> {
    let roll = |t: &Tensor, dim: usize, s: usize| -> Result<Tensor> {
        let n = t.dim(dim)?;
        let s = s % n;
        if s == 0 {
            return Ok(t.clone());
        }
        Ok(Tensor::cat(&[&t.narrow(dim, s, n - s)?, &t.narrow(dim, 0, s)?], dim)?)
    };
    let x = roll(x, 1, shift_h)?;
    roll(&x, 2, shift_w)
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift(x: &Tensor, shift_h: usize, shift_w: usize) -> Result<Tensor> {
    let h = x.dim(1)?;
    let w = x.dim(2)?;
    cyclic_shift(x, (h - shift_h % h) % h, (w - shift_w % w) % w)
}

/// Token grid split into attention windows, together with the additive mask
/// that confines attention to pre-shift windows.
#[derive(Debug)]
pub struct WindowPartition {
    /// `(B·num_windows, window², D)` window batches.
    pub windows: Tensor,
    /// `(num_windows, window², window²)` additive mask: 0 where a pair may
    /// attend, −∞ where it may not. `None` when no masking is needed (no
    /// shift and no padding). Shared by every batch element.
    pub mask: Option<Tensor>,
    batch: usize,
    padded_h: usize,
    padded_w: usize,
    orig_h: usize,
    orig_w: usize,
    window: usize,
    shift: usize,
}

impl WindowPartition {
    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    /// Undo the partition: regroup `(B·num_windows, window², D)` back into
    /// `(B, H, W, D)`, reversing the cyclic shift and cropping any padding.
    pub fn merge(&self, windows: &Tensor) -> Result<Tensor> {
        let d = windows.dim(2)?;
        let (nh, nw) = (self.padded_h / self.window, self.padded_w / self.window);
        let x = windows
            .reshape((self.batch, nh, nw, self.window, self.window, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((self.batch, self.padded_h, self.padded_w, d))?;
        let x = if self.shift > 0 {
            cyclic_unshift(&x, self.shift, self.shift)?
        } else {
            x
        };
        Ok(x.narrow(1, 0, self.orig_h)?.narrow(2, 0, self.orig_w)?)
    }
}

/// Split a `(B, H, W, D)` token grid into `window × window` attention
/// windows, optionally after a cyclic shift.
///
/// The grid is zero-padded on the bottom/right to a multiple of `window`
/// first. Tokens are labeled by the window they occupy *before* the shift;
/// the mask blocks attention between tokens with different labels, so
/// windows that wrap around after the shift cannot mix, and padded tokens
/// (which get a unique label each) attend only to themselves — keeping every
/// softmax row finite — and are cropped away by [`WindowPartition::merge`].
pub fn partition_windows(tokens: &Tensor, window: usize, shift: usize) -> Result<WindowPartition> {
    if window < 1 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    if shift != 0 && shift != window / 2 {
        return Err(Error::Config(format!(
            "shift must be 0 or window/2, got shift {shift} for window {window}"
        )));
    }
    let (batch, h, w, d) = tokens.dims4().map_err(|_| {
        Error::Shape(format!(
            "partition_windows expects (batch, height, width, dim) tokens, got {:?}",
            tokens.shape()
        ))
    })?;
    let padded_h = h.div_ceil(window) * window;
    let padded_w = w.div_ceil(window) * window;

    let mut x = tokens.clone();
    if padded_h != h {
        let pad = Tensor::zeros((batch, padded_h - h, w, d), tokens.dtype(), tokens.device())?;
        x = Tensor::cat(&[&x, &pad], 1)?;
    }
    if padded_w != w {
        let pad = Tensor::zeros((batch, padded_h, padded_w - w, d), tokens.dtype(), tokens.device())?;
        x = Tensor::cat(&[&x, &pad], 2)?;
    }
    if shift > 0 {
        x = cyclic_shift(&x, shift, shift)?;
    }

    let (nh, nw) = (padded_h / window, padded_w / window);
    let windows = x
        .reshape((batch, nh, window, nw, window, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((batch * nh * nw, window * window, d))?
        .contiguous()?;

    let padded = padded_h != h || padded_w != w;
    let mask = if shift > 0 || padded {
        Some(window_attention_mask(
            h, w, padded_h, padded_w, window, shift,
            tokens.dtype(),
            tokens.device(),
        )?)
    } else {
        None
    };

    Ok(WindowPartition {
        windows,
        mask,
        batch,
        padded_h,
        padded_w,
        orig_h: h,
        orig_w: w,
        window,
        shift,
    })
}

/// Label every padded-grid position with its pre-shift window id; padding
/// gets a unique negative label per position.
fn window_labels(
    orig_h: usize,
    orig_w: usize,
    padded_h: usize,
    padded_w: usize,
    window: usize,
) -> Vec<i64> {
    let nwc = padded_w / window;
    let mut labels = Vec::with_capacity(padded_h * padded_w);
    for r in 0..padded_h {
        for c in 0..padded_w {
            if r < orig_h && c < orig_w {
                labels.push(((r / window) * nwc + c / window) as i64);
            } else {
                labels.push(-1 - (r * padded_w + c) as i64);
            }
        }
    }
    labels
}

/// Additive attention mask for all windows of a (possibly shifted, possibly
/// padded) token grid: `(num_windows, window², window²)` with 0 for pairs
/// sharing a pre-shift window and −∞ otherwise.
fn window_attention_mask(
    orig_h: usize,
    orig_w: usize,
    padded_h: usize,
    padded_w: usize,
    window: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let labels = window_labels(orig_h, orig_w, padded_h, padded_w, window);
    // Roll the labels exactly the way the tokens were rolled.
    let rolled: Vec<i64> = (0..padded_h * padded_w)
        .map(|p| {
            let (r, c) = (p / padded_w, p % padded_w);
            labels[((r + shift) % padded_h) * padded_w + (c + shift) % padded_w]
        })
        .collect();

    let (nh, nw) = (padded_h / window, padded_w / window);
    let t = window * window;
    let mut mask = Vec::with_capacity(nh * nw * t * t);
    for wr in 0..nh {
        for wc in 0..nw {
            let mut ids = Vec::with_capacity(t);
            for r in 0..window {
                for c in 0..window {
                    ids.push(rolled[(wr * window + r) * padded_w + wc * window + c]);
                }
            }
            for a in 0..t {
                for b in 0..t {
                    mask.push(if ids[a] == ids[b] { 0.0f64 } else { f64::NEG_INFINITY });
                }
            }
        }
    }
    let m = Tensor::from_vec(mask, (nh * nw, t, t), device)?;
    Ok(m.to_dtype(dtype)?)
}

//! Single-band elevation rasters, validity masks and the per-pixel operations
//! every other module builds on.
//!
//! Nodata is stored in-band as a non-finite value; a [`Mask`] can always be
//! re-derived from a [`Grid`] with [`Grid::validity`].

pub mod fgrid;
pub mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ground threshold for the `|s - g| < alpha` mask, in meters.
pub const DEFAULT_ALPHA_METERS: f64 = 0.25;

/// A north-up raster of elevations (meters) or unitless per-pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    pixel_size: f64,
    origin: (f64, f64),
    values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_georef(width, height, 1.0, (0.0, 0.0), values)
    }

    pub fn with_georef(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin: (f64, f64),
        values: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            origin,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("positive dimensions")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                values.push(f(row, col));
            }
        }
        Self::new(width, height, values).expect("positive dimensions")
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    #[inline]
    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn is_valid_at(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Copy of `self` with the same georeferencing but new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Grid> {
        Grid::with_georef(self.width, self.height, self.pixel_size, self.origin, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_shape(other, "zip_map")?;
        Ok(Grid {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn validity(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|v| v.is_finite()).collect(),
        }
    }

    /// Min and max over finite pixels, `None` when nothing is valid.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .filter(|v| v.is_finite())
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Sub-window starting at (`row0`, `col0`). Georeferencing follows the window.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Grid> {
        if row0 + height > self.height || col0 + width > self.width || width == 0 || height == 0
        {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height} at ({row0}, {col0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(width * height);
        for r in row0..row0 + height {
            let start = r * self.width + col0;
            values.extend_from_slice(&self.values[start..start + width]);
        }
        Grid::with_georef(
            width,
            height,
            self.pixel_size,
            (
                self.origin.0 + col0 as f64 * self.pixel_size,
                self.origin.1 - row0 as f64 * self.pixel_size,
            ),
            values,
        )
    }

    /// Replace pixels where `mask` is false with NaN.
    pub fn masked(&self, mask: &Mask) -> Result<Grid> {
        mask.check_grid(self)?;
        Ok(Grid {
            values: self
                .values
                .iter()
                .zip(&mask.bits)
                .map(|(&v, &b)| if b { v } else { f64::NAN })
                .collect(),
            ..self.clone()
        })
    }

    /// Bilinear value at fractional pixel coordinates (col, row), clamped to
    /// the pixel-centre hull. Returns NaN when any contributing pixel is invalid.
    pub fn bilinear_at(&self, col: f64, row: f64) -> f64 {
        let cx = col.clamp(0.0, (self.width - 1) as f64);
        let cy = row.clamp(0.0, (self.height - 1) as f64);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        let mut acc = 0.0;
        for (r, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (c, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let v = self.get(r, c);
                if !v.is_finite() {
                    return f64::NAN;
                }
                acc += w * v;
            }
        }
        acc
    }

    /// Bilinear value at world coordinates; `None` outside the raster extent.
    pub fn sample_world(&self, x: f64, y: f64) -> Option<f64> {
        let (x0, y0) = self.origin;
        let w = self.width as f64 * self.pixel_size;
        let h = self.height as f64 * self.pixel_size;
        if !(x >= x0 && x <= x0 + w && y <= y0 && y >= y0 - h) {
            return None;
        }
        let col = (x - x0) / self.pixel_size - 0.5;
        let row = (y0 - y) / self.pixel_size - 0.5;
        Some(self.bilinear_at(col, row))
    }

    /// World coordinates of the centre of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.pixel_size,
            self.origin.1 - (row as f64 + 0.5) * self.pixel_size,
        )
    }
}

/// Per-pixel boolean layer. Meaning (valid / ground) depends on context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.width == grid.width() && self.height == grid.height() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs grid {}x{}",
                self.width,
                self.height,
                grid.width(),
                grid.height()
            )))
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("mask and".into()));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Mask> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::InvalidArgument("mask crop out of bounds".into()));
        }
        Ok(Mask::from_fn(width, height, |r, c| self.get(row0 + r, col0 + c)))
    }

    /// 0/1 grid view, used for previews and file export.
    pub fn to_grid(&self) -> Grid {
        Grid::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are positive")
    }
}

/// Min-max bounds used to map elevations into `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub lo: f64,
    pub hi: f64,
}

impl NormParams {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::EmptyRaster);
        }
        if hi <= lo {
            return Err(Error::DegenerateRange);
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0
    }

    #[inline]
    pub fn invert(&self, x: f64) -> f64 {
        (x + 1.0) * 0.5 * (self.hi - self.lo) + self.lo
    }

    /// Convert a length in meters (e.g. the ground threshold) to normalized units.
    #[inline]
    pub fn scale_length(&self, meters: f64) -> f64 {
        2.0 * meters / (self.hi - self.lo)
    }
}

fn valid_bounds(x: &Grid, m: &Mask, acc: &mut Option<(f64, f64)>) {
    for (&v, &b) in x.values().iter().zip(m.bits()) {
        if b && v.is_finite() {
            *acc = Some(match *acc {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }
}

fn apply_norm(x: &Grid, m: &Mask, p: &NormParams) -> Grid {
    let values = x
        .values()
        .iter()
        .zip(m.bits())
        .map(|(&v, &b)| if b && v.is_finite() { p.apply(v) } else { 0.0 })
        .collect();
    x.with_values(values).expect("same shape")
}

/// Min-max normalize a DSM (and optionally its DTM) into `[-1, 1]` using bounds
/// from valid pixels of both rasters. Invalid pixels become exactly 0.
pub fn normalize(s: &Grid, g: Option<&Grid>, m: &Mask) -> Result<(Grid, Option<Grid>, NormParams)> {
    let params = NormMode::MinMax.params(s, g, m)?;
    let s_norm = apply_norm(s, m, &params);
    let g_norm = g.map(|g| apply_norm(g, m, &params));
    Ok((s_norm, g_norm, params))
}

/// How per-sample normalization bounds are chosen. Every mode is an affine
/// map `x -> (x - c) / h`, stored as `NormParams { lo: c - h, hi: c + h }`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormMode {
    /// Min-max over valid pixels of `s` (and `g` when given).
    #[default]
    MinMax,
    /// Corpus-wide z-score.
    Global { mean: f64, std: f64 },
    /// Per-sample mean shift of the DSM, no rescaling. Stand-in for data
    /// localization.
    MeanShift,
}

impl NormMode {
    pub fn params(&self, s: &Grid, g: Option<&Grid>, m: &Mask) -> Result<NormParams> {
        m.check_grid(s)?;
        match *self {
            NormMode::MinMax => {
                let mut bounds = None;
                valid_bounds(s, m, &mut bounds);
                if let Some(g) = g {
                    s.check_shape(g, "normalize")?;
                    valid_bounds(g, m, &mut bounds);
                }
                let (lo, hi) = bounds.ok_or(Error::EmptyRaster)?;
                NormParams::new(lo, hi)
            }
            NormMode::Global { mean, std } => NormParams::new(mean - std, mean + std),
            NormMode::MeanShift => {
                let (sum, n) = s
                    .values()
                    .iter()
                    .zip(m.bits())
                    .filter(|(v, &b)| b && v.is_finite())
                    .fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
                if n == 0 {
                    return Err(Error::EmptyRaster);
                }
                let c = sum / n as f64;
                NormParams::new(c - 1.0, c + 1.0)
            }
        }
    }

    /// Global z-score parameters over the valid pixels of all grids.
    pub fn fit_global<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> Result<NormMode> {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for g in grids {
            for &v in g.values().iter().filter(|v| v.is_finite()) {
                n += 1;
                let d = v - mean;
                mean += d / n as f64;
                m2 += d * (v - mean);
            }
        }
        if n == 0 {
            return Err(Error::EmptyRaster);
        }
        let std = (m2 / n as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::DegenerateRange);
        }
        Ok(NormMode::Global { mean, std })
    }
}

/// Normalize with explicit parameters; invalid pixels become exactly 0.
pub fn normalize_with(x: &Grid, m: &Mask, p: &NormParams) -> Result<Grid> {
    m.check_grid(x)?;
    Ok(apply_norm(x, m, p))
}

/// Inverse of [`normalize`]. Non-finite pixels stay non-finite.
pub fn denormalize(x: &Grid, p: &NormParams) -> Grid {
    x.map(|v| if v.is_finite() { p.invert(v) } else { v })
}

/// [`denormalize`] that also restores nodata where `m` is false.
pub fn denormalize_masked(x: &Grid, p: &NormParams, m: &Mask) -> Result<Grid> {
    m.check_grid(x)?;
    let values = x
        .values()
        .iter()
        .zip(m.bits())
        .map(|(&v, &b)| if b && v.is_finite() { p.invert(v) } else { f64::NAN })
        .collect();
    x.with_values(values)
}

/// Ground indicator: true iff both pixels are valid and `|s - g| < alpha`.
pub fn ground_mask(s: &Grid, g: &Grid, alpha: f64) -> Result<Mask> {
    s.check_shape(g, "ground_mask")?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let bits = s
        .values()
        .iter()
        .zip(g.values())
        .map(|(&a, &b)| a.is_finite() && b.is_finite() && (a - b).abs() < alpha)
        .collect();
    Mask::new(s.width(), s.height(), bits)
}

/// Forward-difference partial derivatives with edge replication. The last
/// column (row) reuses the difference of the previous one; a missing axis
/// contributes zero.
pub(crate) fn forward_diff_index(i: usize, n: usize) -> Option<(usize, usize)> {
    if n < 2 {
        None
    } else if i + 1 < n {
        Some((i, i + 1))
    } else {
        Some((n - 2, n - 1))
    }
}

/// Per-pixel `sqrt(dx^2 + dy^2)` in value units per meter.
pub fn grad_magnitude(x: &Grid) -> Grid {
    let (w, h) = (x.width(), x.height());
    let inv = 1.0 / x.pixel_size();
    let values = x.values();
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let dx = forward_diff_index(c, w)
                .map(|(a, b)| values[r * w + b] - values[r * w + a])
                .unwrap_or(0.0);
            let dy = forward_diff_index(r, h)
                .map(|(a, b)| values[b * w + c] - values[a * w + c])
                .unwrap_or(0.0);
            if !values[r * w + c].is_finite() {
                out.push(f64::NAN);
                continue;
            }
            let (dx, dy) = (dx * inv, dy * inv);
            out.push((dx * dx + dy * dy).sqrt());
        }
    }
    x.with_values(out).expect("same shape")
}

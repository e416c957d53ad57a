//! Evaluation metrics and Laplacian post-smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

/// Angles below this (degrees) are floating-point noise and count as zero.
pub const ANGLE_FLOOR_DEG: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub e_t1: f64,
    pub e_t2: f64,
    pub e_tot: f64,
    /// Literal `e_t1 + e_t2`.
    pub e_sum: f64,
    pub med: Option<f64>,
    pub mad: f64,
}

pub const REPORT_CSV_HEADER: &str = "rmse,mae,e_t1,e_t2,e_tot,e_sum,med,mad";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let med = self.med.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{med},{}",
            self.rmse, self.mae, self.e_t1, self.e_t2, self.e_tot, self.e_sum, self.mad
        )
    }
}

/// `(rmse, mae)` over pixels valid in `m` where both rasters are finite.
pub fn regression_metrics(pred: &Grid, truth: &Grid, m: &Mask) -> Result<(f64, f64)> {
    pred.check_shape(truth, "regression metrics")?;
    m.check_grid(pred)?;
    let (mut n, mut se, mut ae) = (0usize, 0.0, 0.0);
    for ((&p, &t), &ok) in pred.values().iter().zip(truth.values()).zip(m.bits()) {
        if ok && p.is_finite() && t.is_finite() {
            let d = p - t;
            n += 1;
            se += d * d;
            ae += d.abs();
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(((se / n as f64).sqrt(), ae / n as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassErrors {
    /// Percent of non-ground pixels predicted ground.
    pub e_t1: f64,
    /// Percent of ground pixels predicted non-ground.
    pub e_t2: f64,
    /// Percent of all pixels misclassified.
    pub e_tot: f64,
    pub e_sum: f64,
    /// Set when the class was absent and its error reported as 0.
    pub no_nonground: bool,
    pub no_ground: bool,
}

pub fn classification_errors(prob: &Grid, gt_ground: &Mask, m: &Mask, threshold: f64) -> Result<ClassErrors> {
    gt_ground.check_grid(prob)?;
    m.check_grid(prob)?;
    let (mut ground, mut nonground, mut fn_, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for ((&p, &gt), &ok) in prob.values().iter().zip(gt_ground.bits()).zip(m.bits()) {
        if !ok || !p.is_finite() {
            continue;
        }
        let pred_ground = p >= threshold;
        if gt {
            ground += 1;
            fn_ += usize::from(!pred_ground);
        } else {
            nonground += 1;
            fp += usize::from(pred_ground);
        }
    }
    if ground + nonground == 0 {
        return Err(Error::EmptyMask);
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let e_t1 = pct(fp, nonground);
    let e_t2 = pct(fn_, ground);
    Ok(ClassErrors {
        e_t1,
        e_t2,
        e_tot: pct(fp + fn_, ground + nonground),
        e_sum: e_t1 + e_t2,
        no_nonground: nonground == 0,
        no_ground: ground == 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedResult {
    pub med: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean vertical distance from world points `(x, y, z)` to the bilinear
/// surface of `pred`. Points outside the raster or over nodata are skipped.
pub fn med(pred: &Grid, points: &[(f64, f64, f64)]) -> Result<MedResult> {
    let (mut sum, mut used) = (0.0, 0usize);
    for &(x, y, z) in points {
        if let Some(v) = pred.sample_world(x, y).filter(|v| v.is_finite()) {
            sum += (z - v).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no points inside the raster".into()));
    }
    Ok(MedResult {
        med: sum / used as f64,
        used,
        skipped: points.len() - used,
    })
}

fn slope(v: &[f64], i: usize, n: usize, stride: usize, ps: f64) -> f64 {
    let (a, b, span) = if i == 0 {
        (0, 1, 1.0)
    } else if i + 1 == n {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    };
    (v[b * stride] - v[a * stride]) / (span * ps)
}

fn normals(x: &Grid) -> Vec<Option<[f64; 3]>> {
    let (w, h, ps) = (x.width(), x.height(), x.pixel_size());
    let v = x.values();
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let zx = slope(&v[r * w..], c, w, 1, ps);
            let zy = slope(&v[c..], r, h, w, ps);
            if !(zx.is_finite() && zy.is_finite()) {
                out.push(None);
                continue;
            }
            let len = (zx * zx + zy * zy + 1.0).sqrt();
            out.push(Some([-zx / len, -zy / len, 1.0 / len]));
        }
    }
    out
}

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let deg = sin.atan2(cos).to_degrees();
    if deg < ANGLE_FLOOR_DEG {
        0.0
    } else {
        deg
    }
}

/// Mean angle in degrees between surface normals of 4-neighbour pixel pairs.
pub fn mad(pred: &Grid) -> Result<f64> {
    let (w, h) = (pred.width(), pred.height());
    if w < 3 || h < 3 {
        return Err(Error::InvalidArgument("mean angular deviation needs at least 3x3 pixels".into()));
    }
    let n = normals(pred);
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            let Some(a) = n[r * w + c] else { continue };
            if c + 1 < w {
                if let Some(b) = n[r * w + c + 1] {
                    sum += angle_deg(a, b);
                    count += 1;
                }
            }
            if r + 1 < h {
                if let Some(b) = n[(r + 1) * w + c] {
                    sum += angle_deg(a, b);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyRaster);
    }
    Ok(sum / count as f64)
}

/// Boundary handling for [`laplacian_smooth_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Replicate,
    Periodic,
}

/// `x <- x + factor * (mean of 4 neighbours - x)`, repeated. Edge neighbours
/// are replicated; invalid pixels are skipped as neighbours and left as is.
/// An axis of length 1 contributes no neighbours.
pub fn laplacian_smooth(x: &Grid, iterations: usize, factor: f64) -> Grid {
    laplacian_smooth_with(x, iterations, factor, Edge::Replicate)
}

pub fn laplacian_smooth_with(x: &Grid, iterations: usize, factor: f64, edge: Edge) -> Grid {
    let (w, h) = (x.width(), x.height());
    let mut cur = x.values().to_vec();
    let mut next = cur.clone();
    let wrap = |i: isize, n: usize| -> usize {
        match edge {
            Edge::Replicate => i.clamp(0, n as isize - 1) as usize,
            Edge::Periodic => i.rem_euclid(n as isize) as usize,
        }
    };
    for _ in 0..iterations {
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if !cur[i].is_finite() {
                    continue;
                }
                let mut sum = 0.0;
                let mut k = 0usize;
                let mut visit = |rr: usize, cc: usize| {
                    let v = cur[rr * w + cc];
                    if v.is_finite() {
                        sum += v;
                        k += 1;
                    }
                };
                if w > 1 {
                    visit(r, wrap(c as isize - 1, w));
                    visit(r, wrap(c as isize + 1, w));
                }
                if h > 1 {
                    visit(wrap(r as isize - 1, h), c);
                    visit(wrap(r as isize + 1, h), c);
                }
                next[i] = if k == 0 {
                    cur[i]
                } else {
                    cur[i] + factor * (sum / k as f64 - cur[i])
                };
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    x.with_values(cur).expect("same shape")
}

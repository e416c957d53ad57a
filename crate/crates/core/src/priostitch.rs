//! Large-raster inference: a global low-resolution prior, overlapping tiles
//! refined from that prior, and weighted or selection blending.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::resample::resize_bilinear;
use crate::raster::{Grid, NormMode, NormParams};
use crate::sampler::{sample, Denoise, InitMode, Sampled};
use crate::schedule::DiffusionSchedule;

/// Measured seconds per reverse step used by [`estimate_runtime`] by default.
pub const DEFAULT_STEP_SECONDS: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub stride: usize,
    pub nx: usize,
    pub ny: usize,
    /// `(row0, col0)` of every tile, row-major.
    pub tiles: Vec<(usize, usize)>,
}

fn axis_origins(n: usize, p: usize, s: usize) -> Vec<usize> {
    let count = (n - p).div_ceil(s) + 1;
    (0..count).map(|k| (k * s).min(n - p)).collect()
}

/// `N = ceil((W - P) / S) + 1` tiles per axis; the last tile is clamped to
/// the raster edge.
pub fn tile_grid(width: usize, height: usize, tile: usize, stride: usize) -> Result<TileLayout> {
    if tile == 0 || stride == 0 || stride > tile {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= stride <= tile, got tile {tile}, stride {stride}"
        )));
    }
    if tile > width || tile > height {
        return Err(Error::TileTooLarge(format!("{width}x{height} raster, tile {tile}")));
    }
    let cols = axis_origins(width, tile, stride);
    let rows = axis_origins(height, tile, stride);
    let tiles = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileLayout {
        width,
        height,
        tile,
        stride,
        nx: cols.len(),
        ny: rows.len(),
        tiles,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Mean,
    #[default]
    Min,
    Max,
    Linear,
    Cosine,
    Exp,
}

impl BlendMode {
    pub const ALL: [BlendMode; 6] = [
        BlendMode::Mean,
        BlendMode::Min,
        BlendMode::Max,
        BlendMode::Linear,
        BlendMode::Cosine,
        BlendMode::Exp,
    ];

    fn is_selection(self) -> bool {
        matches!(self, BlendMode::Min | BlendMode::Max)
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => BlendMode::Mean,
            "min" => BlendMode::Min,
            "max" => BlendMode::Max,
            "linear" => BlendMode::Linear,
            "cosine" => BlendMode::Cosine,
            "exp" => BlendMode::Exp,
            other => return Err(Error::InvalidArgument(format!("unknown blend mode {other:?}"))),
        })
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlendMode::Mean => "mean",
            BlendMode::Min => "min",
            BlendMode::Max => "max",
            BlendMode::Linear => "linear",
            BlendMode::Cosine => "cosine",
            BlendMode::Exp => "exp",
        })
    }
}

/// Per-axis weight at distance `d` from the nearest tile edge with overlap `o`.
/// Distances beyond the overlap saturate.
fn axis_weight(mode: BlendMode, d: usize, o: usize) -> f64 {
    let x = (d + 1).min(o + 1) as f64 / (o + 1) as f64;
    match mode {
        BlendMode::Linear => x,
        BlendMode::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * x).cos()),
        BlendMode::Exp => 1.0 - (-4.0 * x).exp(),
        BlendMode::Mean | BlendMode::Min | BlendMode::Max => 1.0,
    }
}

/// `P x P` weight field of a tile whose four edges are all overlapped.
pub fn blend_weights(mode: BlendMode, tile: usize, stride: usize) -> Result<Grid> {
    if stride == 0 || stride > tile {
        return Err(Error::InvalidArgument("need 1 <= stride <= tile".into()));
    }
    let o = tile - stride;
    let axis: Vec<f64> = (0..tile)
        .map(|i| {
            if o == 0 {
                1.0
            } else {
                axis_weight(mode, i.min(tile - 1 - i), o)
            }
        })
        .collect();
    Ok(Grid::from_fn(tile, tile, |r, c| axis[r] * axis[c]))
}

/// Per-tile random stream; stream 0 is reserved for the prior.
pub fn tile_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Global prior: downsample to `P x P`, sample from the noisy DSM, upsample
/// back. Rasters smaller than `P` on either axis pass through unchanged.
pub fn build_prior<D: Denoise + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    s: &Grid,
    tile: usize,
    norm: &NormMode,
    t_r: usize,
    seed: u64,
) -> Result<Grid> {
    if s.width() < tile || s.height() < tile {
        return Ok(s.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = (s.width(), s.height()) == (tile, tile);
    let small = if full { s.clone() } else { resize_bilinear(s, tile, tile) };
    let out = sample(sched, model, &small, norm, &InitMode::NoisyDsm, t_r, &mut rng)?.dtm;
    if full {
        return Ok(out);
    }
    let up = resize_bilinear(&out, s.width(), s.height());
    s.with_values(up.into_values())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub tile: usize,
    pub stride: usize,
    pub blend: BlendMode,
    pub use_prior: bool,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stitched {
    pub dtm: Grid,
    pub ground_prob: Grid,
    pub prior: Option<Grid>,
    pub layout: TileLayout,
}

/// Tile, refine and blend. Tile `i` draws from [`tile_rng`]`(seed, i)`.
pub fn stitch<D: Denoise + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    s: &Grid,
    norm: &NormMode,
    cfg: &StitchConfig,
) -> Result<Stitched> {
    let layout = tile_grid(s.width(), s.height(), cfg.tile, cfg.stride)?;
    let prior = if cfg.use_prior {
        Some(build_prior(sched, model, s, cfg.tile, norm, cfg.steps, cfg.seed)?)
    } else {
        None
    };
    let p = cfg.tile;
    let fallback = flat_tile_norm(norm, s)?;
    let outputs: Vec<Result<Sampled>> = layout
        .tiles
        .par_iter()
        .enumerate()
        .map(|(i, &(r0, c0))| {
            let run = || -> Result<Sampled> {
                let crop = s.crop(r0, c0, p, p)?;
                let mode = match &prior {
                    Some(pr) => InitMode::PriorDtm(pr.crop(r0, c0, p, p)?),
                    None => InitMode::NoisyDsm,
                };
                if crop.values().iter().all(|v| !v.is_finite()) {
                    let nodata = crop.map(|_| f64::NAN);
                    return Ok(Sampled {
                        dtm: nodata.clone(),
                        ground_prob: nodata,
                        params: NormParams::new(-1.0, 1.0)?,
                    });
                }
                let out = sample(sched, model, &crop, norm, &mode, cfg.steps, &mut tile_rng(cfg.seed, i));
                match (out, &fallback) {
                    (Err(Error::DegenerateRange), Some(f)) => {
                        sample(sched, model, &crop, f, &mode, cfg.steps, &mut tile_rng(cfg.seed, i))
                    }
                    (out, _) => out,
                }
            };
            run().map_err(|e| Error::Tile {
                index: i,
                source: Box::new(e),
            })
        })
        .collect();
    let tiles = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let weights = blend_weights(cfg.blend, p, cfg.stride)?;
    let (dtm, ground_prob) = blend(&layout, &tiles, &weights, cfg.blend, s)?;
    Ok(Stitched {
        dtm,
        ground_prob,
        prior,
        layout,
    })
}

/// A flat tile has no min-max range of its own. It borrows the bounds of the
/// whole raster, expressed as the equivalent fixed affine map.
fn flat_tile_norm(norm: &NormMode, s: &Grid) -> Result<Option<NormMode>> {
    if *norm != NormMode::MinMax {
        return Ok(None);
    }
    match NormMode::MinMax.params(s, None, &s.validity()) {
        Ok(p) => Ok(Some(NormMode::Global {
            mean: 0.5 * (p.lo + p.hi),
            std: 0.5 * (p.hi - p.lo),
        })),
        Err(Error::DegenerateRange | Error::EmptyRaster) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Merge tile outputs in tile order. Pixels no valid tile covers are nodata.
fn blend(layout: &TileLayout, tiles: &[Sampled], weights: &Grid, mode: BlendMode, like: &Grid) -> Result<(Grid, Grid)> {
    let (w, p) = (layout.width, layout.tile);
    let n = layout.width * layout.height;
    let mut acc = vec![0.0; n];
    let mut wsum = vec![0.0; n];
    let mut sel = vec![f64::NAN; n];
    let mut pacc = vec![0.0; n];
    let mut psum = vec![0.0; n];
    // Single-coverage pixels copy the tile value so w * x / w rounding never
    // touches them.
    let mut count = vec![0u32; n];
    let mut first = vec![(0.0, 0.0); n];
    let selection = mode.is_selection();
    for (&(r0, c0), t) in layout.tiles.iter().zip(tiles) {
        for r in 0..p {
            for c in 0..p {
                let v = t.dtm.get(r, c);
                if !v.is_finite() {
                    continue;
                }
                let i = (r0 + r) * w + c0 + c;
                let wt = if selection { 1.0 } else { weights.get(r, c) };
                if selection {
                    sel[i] = match (mode, sel[i].is_nan()) {
                        (_, true) => v,
                        (BlendMode::Min, false) => sel[i].min(v),
                        _ => sel[i].max(v),
                    };
                } else {
                    acc[i] += wt * v;
                    wsum[i] += wt;
                }
                let pv = t.ground_prob.get(r, c);
                count[i] += 1;
                if count[i] == 1 {
                    first[i] = (v, pv);
                }
                if pv.is_finite() {
                    pacc[i] += wt * pv;
                    psum[i] += wt;
                }
            }
        }
    }
    let ratio = |a: f64, s: f64| if s > 0.0 { a / s } else { f64::NAN };
    let mut dtm = Vec::with_capacity(n);
    let mut prob = Vec::with_capacity(n);
    for i in 0..n {
        if count[i] == 1 {
            dtm.push(first[i].0);
            prob.push(if first[i].1.is_finite() { first[i].1 } else { f64::NAN });
            continue;
        }
        dtm.push(if selection { sel[i] } else { ratio(acc[i], wsum[i]) });
        prob.push(ratio(pacc[i], psum[i]));
    }
    Ok((like.with_values(dtm)?, like.with_values(prob)?))
}

/// `N_x N_y T step_seconds`.
pub fn estimate_runtime(width: usize, height: usize, tile: usize, stride: usize, steps: usize, step_seconds: f64) -> Result<f64> {
    let l = tile_grid(width, height, tile, stride)?;
    Ok((l.nx * l.ny) as f64 * step_seconds * steps as f64)
}

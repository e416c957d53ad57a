//! Procedural (DSM, DTM, ground mask) triplets.
//!
//! Bare earth is a sum of randomly oriented cosine octaves whose high-frequency
//! energy grows with `terrain_roughness`. Buildings are flat-roofed boxes
//! raised above the highest ground under their footprint and trees are
//! truncated Gaussian blobs, so the surface model never dips below the terrain
//! unless sensor noise is requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub pixel_size: f64,
    pub terrain_roughness: f64,
    pub building_count: usize,
    pub tree_count: usize,
    pub max_building_height: f64,
    pub max_tree_height: f64,
    /// Zero-mean Gaussian noise added to the DSM after ground truth is fixed.
    #[serde(default)]
    pub sensor_noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            pixel_size: 1.0,
            terrain_roughness: 0.5,
            building_count: 4,
            tree_count: 6,
            max_building_height: 15.0,
            max_tree_height: 12.0,
            sensor_noise_sigma: 0.0,
        }
    }
}

impl SceneSpec {
    /// A randomized scene whose structure counts scale with area, as used for
    /// training corpora.
    pub fn randomized(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5cee_e000_0001);
        let area = (size * size) as f64 / (64.0 * 64.0);
        let buildings = (rng.random_range(1.0..5.0) * area).round() as usize;
        let trees = (rng.random_range(2.0..8.0) * area).round() as usize;
        Self {
            seed,
            size,
            terrain_roughness: rng.random_range(0.1..0.9),
            building_count: buildings,
            tree_count: trees,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("scene size {} < 16", self.size)));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::InvalidArgument("pixel size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.terrain_roughness) {
            return Err(Error::InvalidArgument("roughness must lie in [0, 1]".into()));
        }
        if self.max_building_height < 0.0 || self.max_tree_height < 0.0 || self.sensor_noise_sigma < 0.0
        {
            return Err(Error::InvalidArgument("heights and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub nonground_fraction: f64,
    pub building_pixels: usize,
    pub tree_pixels: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub dsm: Grid,
    pub dtm: Grid,
    pub gt_ground: Mask,
    pub stats: SceneStats,
}

fn terrain(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.size;
    let extent = n as f64 * spec.pixel_size;
    let base = rng.random_range(20.0..200.0);
    let relief = 3.0 + 12.0 * spec.terrain_roughness;
    let persistence = 0.3 + 0.35 * spec.terrain_roughness;
    let mut waves = Vec::new();
    let mut amp = relief;
    let mut wavelength = extent * 1.6;
    for _ in 0..6 {
        for _ in 0..3 {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            waves.push((k * theta.cos(), k * theta.sin(), phase, amp / 3.0));
        }
        amp *= persistence;
        wavelength *= 0.5;
    }
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let x = c as f64 * spec.pixel_size;
            let y = r as f64 * spec.pixel_size;
            let z: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).cos())
                .sum();
            out.push(base + z);
        }
    }
    out
}

/// Build a scene. Deterministic in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dtm = terrain(spec, &mut rng);
    let mut dsm = dtm.clone();

    let mut building_pixels = 0;
    let max_side = (n / 5).max(6);
    for _ in 0..spec.building_count {
        let bw = rng.random_range(4..=max_side);
        let bh = rng.random_range(4..=max_side);
        let r0 = rng.random_range(0..=n - bh);
        let c0 = rng.random_range(0..=n - bw);
        let height = if spec.max_building_height > 3.0 {
            rng.random_range(3.0..=spec.max_building_height)
        } else {
            spec.max_building_height
        };
        if height <= 0.0 {
            continue;
        }
        let mut top = f64::NEG_INFINITY;
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                top = top.max(dtm[r * n + c]);
            }
        }
        let roof = top + height;
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                let v = &mut dsm[r * n + c];
                if roof > *v {
                    *v = roof;
                }
            }
        }
        building_pixels += bw * bh;
    }

    let mut tree_pixels = 0;
    for _ in 0..spec.tree_count {
        let sigma = rng.random_range(1.5..3.5) / spec.pixel_size.max(1e-9);
        let cr = rng.random_range(0.0..n as f64);
        let cc = rng.random_range(0.0..n as f64);
        let lo = (0.5 * spec.max_tree_height).max(2.0).min(spec.max_tree_height);
        let height = if spec.max_tree_height > lo {
            rng.random_range(lo..=spec.max_tree_height)
        } else {
            spec.max_tree_height
        };
        if height <= 0.0 {
            continue;
        }
        let reach = 2.0 * sigma;
        let r_lo = (cr - reach).floor().max(0.0) as usize;
        let r_hi = ((cr + reach).ceil() as usize).min(n - 1);
        let c_lo = (cc - reach).floor().max(0.0) as usize;
        let c_hi = ((cc + reach).ceil() as usize).min(n - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                let crown = dtm[r * n + c] + height * (-d2 / (2.0 * sigma * sigma)).exp();
                let v = &mut dsm[r * n + c];
                if crown > *v {
                    *v = crown;
                }
                tree_pixels += 1;
            }
        }
    }

    let bits: Vec<bool> = dsm.iter().zip(&dtm).map(|(a, b)| a == b).collect();
    let nonground = bits.iter().filter(|&&b| !b).count();
    let max_residual = dsm
        .iter()
        .zip(&dtm)
        .map(|(a, b)| a - b)
        .fold(0.0f64, f64::max);

    if spec.sensor_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sensor_noise_sigma).expect("positive sigma");
        for v in dsm.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let origin = (0.0, n as f64 * spec.pixel_size);
    Ok(Scene {
        dsm: Grid::with_georef(n, n, spec.pixel_size, origin, dsm)?,
        dtm: Grid::with_georef(n, n, spec.pixel_size, origin, dtm)?,
        gt_ground: Mask::new(n, n, bits)?,
        stats: SceneStats {
            nonground_fraction: nonground as f64 / (n * n) as f64,
            building_pixels,
            tree_pixels,
            max_residual,
        },
    })
}

/// `count` randomized scenes with seeds derived from `base_seed`.
pub fn corpus(base_seed: u64, count: usize, size: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| generate(&SceneSpec::randomized(base_seed.wrapping_mul(1_000_003).wrapping_add(i), size)))
        .collect()
}

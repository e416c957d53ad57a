//! Confidence gate fusing the DSM with the residual-corrected surface.

use super::{DenoiserModel, Target};
use crate::error::Result;
use crate::nn::Real;
use crate::raster::Grid;

/// Which fusion rule applies to the raw network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateMode {
    pub target: Target,
    pub gating: bool,
}

impl Default for GateMode {
    fn default() -> Self {
        Self {
            target: Target::Residual,
            gating: true,
        }
    }
}

/// Logistic function without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn fuse(mode: GateMode, r: f64, l: f64, s: f64) -> f64 {
    match (mode.target, mode.gating) {
        (Target::Residual, true) => s - (1.0 - sigmoid(l)) * r,
        (Target::Residual, false) => s - r,
        (Target::Absolute, true) => {
            let p = sigmoid(l);
            p * s + (1.0 - p) * r
        }
        (Target::Absolute, false) => r,
    }
}

/// Pixelwise fusion into `out`.
pub fn gate_slices(mode: GateMode, r_hat: &[f64], logits: &[f64], s: &[f64], out: &mut [f64]) {
    for (((o, &r), &l), &sv) in out.iter_mut().zip(r_hat).zip(logits).zip(s) {
        *o = fuse(mode, r, l, sv);
    }
}

/// `s - (1 - sigmoid(l)) * r_hat`, i.e. `sigmoid(l) s + (1 - sigmoid(l)) (s - r_hat)`.
pub fn gate(r_hat: &Grid, logits: &Grid, s: &Grid) -> Result<Grid> {
    gate_with(GateMode::default(), r_hat, logits, s)
}

pub fn gate_with(mode: GateMode, r_hat: &Grid, logits: &Grid, s: &Grid) -> Result<Grid> {
    r_hat.check_shape(s, "gate residual")?;
    logits.check_shape(s, "gate logits")?;
    let mut out = vec![0.0; s.len()];
    gate_slices(mode, r_hat.values(), logits.values(), s.values(), &mut out);
    s.with_values(out)
}

/// Gradients of the fused output with respect to `(r_hat, logits)`.
pub fn gate_backward(
    mode: GateMode,
    r_hat: &[f64],
    logits: &[f64],
    s: &[f64],
    d_out: &[f64],
    d_rhat: &mut [f64],
    d_logits: &mut [f64],
) {
    for i in 0..d_out.len() {
        let d = d_out[i];
        let (dr, dl) = match (mode.target, mode.gating) {
            (Target::Residual, true) => {
                let p = sigmoid(logits[i]);
                (-(1.0 - p) * d, p * (1.0 - p) * r_hat[i] * d)
            }
            (Target::Residual, false) => (-d, 0.0),
            (Target::Absolute, true) => {
                let p = sigmoid(logits[i]);
                ((1.0 - p) * d, p * (1.0 - p) * (s[i] - r_hat[i]) * d)
            }
            (Target::Absolute, false) => (d, 0.0),
        };
        d_rhat[i] = dr;
        d_logits[i] = dl;
    }
}

/// Gated estimate of the clean terrain plus the raw logits.
pub fn gated_predict<T: Real>(model: &DenoiserModel<T>, g_t: &Grid, s: &Grid, t: usize) -> Result<(Grid, Grid)> {
    let (r_hat, logits) = model.forward(g_t, s, t)?;
    let g0 = gate_with(model.arch().gate_mode(), &r_hat, &logits, s)?;
    Ok((g0, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchSpec;
    use proptest::prelude::*;

    fn g1(v: f64) -> Grid {
        Grid::filled(1, 1, v)
    }

    #[test]
    fn limits_and_midpoint() {
        let out = gate(&g1(4.0), &g1(0.0), &g1(10.0)).unwrap();
        assert_eq!(out.values()[0], 8.0);
        let out = gate(&g1(4.0), &g1(1e4), &g1(10.0)).unwrap();
        assert_eq!(out.values()[0], 10.0);
        let out = gate(&g1(4.0), &g1(-1e4), &g1(10.0)).unwrap();
        assert_eq!(out.values()[0], 6.0);
    }

    #[test]
    fn ungated_ignores_logits() {
        let mode = GateMode {
            target: Target::Residual,
            gating: false,
        };
        let out = gate_with(mode, &g1(3.0), &g1(5.0), &g1(10.0)).unwrap();
        assert_eq!(out.values()[0], 7.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_init_model_is_identity() {
        let arch = ArchSpec {
            base_channels: 4,
            timestep_embed_dim: 8,
            ..ArchSpec::default()
        };
        let m = DenoiserModel::<f32>::new(arch, 3).unwrap();
        let s = Grid::from_fn(8, 8, |r, c| (r as f64 - c as f64) * 0.1);
        let g = Grid::filled(8, 8, 0.25);
        let (g0, _) = gated_predict(&m, &g, &s, 2).unwrap();
        assert_eq!(g0, s);
    }

    #[test]
    fn backward_matches_finite_difference() {
        for target in [Target::Residual, Target::Absolute] {
            for gating in [true, false] {
                let mode = GateMode { target, gating };
                let (r, l, s) = (0.7, -0.4, 1.3);
                let mut dr = [0.0];
                let mut dl = [0.0];
                gate_backward(mode, &[r], &[l], &[s], &[1.0], &mut dr, &mut dl);
                let h = 1e-6;
                let fr = (fuse(mode, r + h, l, s) - fuse(mode, r - h, l, s)) / (2.0 * h);
                let fl = (fuse(mode, r, l + h, s) - fuse(mode, r, l - h, s)) / (2.0 * h);
                assert!((dr[0] - fr).abs() < 1e-8);
                assert!((dl[0] - fl).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn output_is_convex_combination(r in -50.0..50.0f64, l in -30.0..30.0f64, s in -100.0..100.0f64) {
            let out = fuse(GateMode::default(), r, l, s);
            let (lo, hi) = if r >= 0.0 { (s - r, s) } else { (s, s - r) };
            prop_assert!(out >= lo - 1e-9 && out <= hi + 1e-9);
        }

        #[test]
        fn zero_residual_is_identity(l in -1e3..1e3f64, s in -100.0..100.0f64) {
            prop_assert_eq!(fuse(GateMode::default(), 0.0, l, s), s);
        }
    }
}

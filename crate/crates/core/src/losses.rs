//! Training objective: L1 + L2 + gradient-magnitude + confidence BCE, each a
//! mean over valid pixels, with analytic gradients for the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{forward_diff_index, Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_grad: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_grad: 0.1,
            lambda_c: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda_grad, self.lambda_c];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub lgrad: f64,
    pub lc: f64,
    pub total: f64,
}

pub const CSV_HEADER: &str = "step,l1,l2,lgrad,lc,total,lr";

impl LossBreakdown {
    fn weighted(l1: f64, l2: f64, lgrad: f64, lc: f64, w: &LossWeights) -> Self {
        Self {
            l1,
            l2,
            lgrad,
            lc,
            total: w.lambda1 * l1 + w.lambda2 * l2 + w.lambda_grad * lgrad + w.lambda_c * lc,
        }
    }

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{lr}",
            self.l1, self.l2, self.lgrad, self.lc, self.total
        )
    }

    /// Running mean helper for per-batch logging.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            l1: self.l1 * k,
            l2: self.l2 * k,
            lgrad: self.lgrad * k,
            lc: self.lc * k,
            total: self.total * k,
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.l1 += o.l1;
        self.l2 += o.l2;
        self.lgrad += o.lgrad;
        self.lc += o.lc;
        self.total += o.total;
    }
}

/// `d total / d g_hat` and `d total / d logits`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub d_ghat: Grid,
    pub d_logits: Grid,
}

fn check(a: &Grid, b: &Grid, m: &Mask) -> Result<usize> {
    a.check_shape(b, "loss inputs")?;
    m.check_grid(a)?;
    match m.count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

/// Mean `|g_hat - g|` and `(g_hat - g)^2` over valid pixels.
pub fn regression_losses(g_hat: &Grid, g: &Grid, m: &Mask) -> Result<(f64, f64)> {
    let n = check(g_hat, g, m)? as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for ((&a, &b), &ok) in g_hat.values().iter().zip(g.values()).zip(m.bits()) {
        if ok {
            let d = a - b;
            l1 += d.abs();
            l2 += d * d;
        }
    }
    Ok((l1 / n, l2 / n))
}

/// Stable `-y ln sigmoid(l) - (1 - y) ln(1 - sigmoid(l))`.
#[inline]
pub fn bce_with_logits(l: f64, y: f64) -> f64 {
    l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()
}

pub fn confidence_loss(logits: &Grid, m_alpha: &Mask, m: &Mask) -> Result<f64> {
    m.check_grid(logits)?;
    m_alpha.check_grid(logits)?;
    let n = m.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = logits
        .values()
        .iter()
        .zip(m_alpha.bits())
        .zip(m.bits())
        .filter(|(_, &ok)| ok)
        .map(|((&l, &y), _)| bce_with_logits(l, if y { 1.0 } else { 0.0 }))
        .sum();
    Ok(sum / n as f64)
}

struct GradTerm {
    /// Per-pixel forward differences `(dx, dy)` and magnitude; `None` where
    /// the pixel does not contribute.
    mag: Vec<Option<(f64, f64, f64)>>,
}

fn grad_terms(x: &Grid, m: &Mask) -> GradTerm {
    let (w, h) = (x.width(), x.height());
    let inv = 1.0 / x.pixel_size();
    let v = x.values();
    let bits = m.bits();
    let mut mag = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (xa, xb) = forward_diff_index(c, w).expect("width >= 2");
            let (ya, yb) = forward_diff_index(r, h).expect("height >= 2");
            let (xa, xb, ya, yb) = (r * w + xa, r * w + xb, ya * w + c, yb * w + c);
            if !(bits[i] && bits[xa] && bits[xb] && bits[ya] && bits[yb]) {
                mag.push(None);
                continue;
            }
            let dx = (v[xb] - v[xa]) * inv;
            let dy = (v[yb] - v[ya]) * inv;
            mag.push(Some((dx, dy, (dx * dx + dy * dy).sqrt())));
        }
    }
    GradTerm { mag }
}

fn grad_loss_impl(g_hat: &Grid, g: &Grid, m: &Mask, mut d_ghat: Option<&mut [f64]>, scale: f64) -> Result<f64> {
    let n = check(g_hat, g, m)?;
    let (w, h) = (g_hat.width(), g_hat.height());
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument("gradient loss needs at least 2x2 pixels".into()));
    }
    let a = grad_terms(g_hat, m);
    let b = grad_terms(g, m);
    let inv = 1.0 / g_hat.pixel_size();
    let coef = scale / n as f64;
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (Some((dx, dy, ga)), Some((_, _, gb))) = (a.mag[i], b.mag[i]) else {
                continue;
            };
            let diff = ga - gb;
            sum += diff.abs();
            if let Some(out) = d_ghat.as_deref_mut() {
                if diff == 0.0 || ga == 0.0 {
                    continue;
                }
                let k = coef * diff.signum() / ga * inv;
                let (xa, xb) = forward_diff_index(c, w).unwrap();
                let (ya, yb) = forward_diff_index(r, h).unwrap();
                out[r * w + xb] += k * dx;
                out[r * w + xa] -= k * dx;
                out[yb * w + c] += k * dy;
                out[ya * w + c] -= k * dy;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Mean `| |grad g_hat| - |grad g| |`. Pixels whose difference stencil
/// touches an invalid pixel are skipped; the mean is over all valid pixels.
pub fn grad_loss(g_hat: &Grid, g: &Grid, m: &Mask) -> Result<f64> {
    grad_loss_impl(g_hat, g, m, None, 0.0)
}

pub fn total_loss(
    g_hat: &Grid,
    g: &Grid,
    logits: &Grid,
    m_alpha: &Mask,
    m: &Mask,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let (l1, l2) = regression_losses(g_hat, g, m)?;
    let lgrad = grad_loss(g_hat, g, m)?;
    let lc = confidence_loss(logits, m_alpha, m)?;
    Ok(LossBreakdown::weighted(l1, l2, lgrad, lc, w))
}

/// Loss plus its gradient with respect to `g_hat` and `logits`.
pub fn total_loss_with_grad(
    g_hat: &Grid,
    g: &Grid,
    logits: &Grid,
    m_alpha: &Mask,
    m: &Mask,
    w: &LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    let n = check(g_hat, g, m)?;
    logits.check_shape(g, "loss logits")?;
    m_alpha.check_grid(g)?;
    let inv_n = 1.0 / n as f64;
    let mut d_ghat = vec![0.0; g.len()];
    let mut d_logits = vec![0.0; g.len()];
    let (mut l1, mut l2, mut lc) = (0.0, 0.0, 0.0);
    let iter = g_hat
        .values()
        .iter()
        .zip(g.values())
        .zip(logits.values())
        .zip(m_alpha.bits())
        .zip(m.bits())
        .enumerate();
    for (i, ((((&a, &b), &l), &y), &ok)) in iter {
        if !ok {
            continue;
        }
        let d = a - b;
        l1 += d.abs();
        l2 += d * d;
        let y = if y { 1.0 } else { 0.0 };
        lc += bce_with_logits(l, y);
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_ghat[i] = inv_n * (w.lambda1 * sign + w.lambda2 * 2.0 * d);
        d_logits[i] = inv_n * w.lambda_c * (crate::denoiser::gate::sigmoid(l) - y);
    }
    let lgrad = grad_loss_impl(g_hat, g, m, Some(&mut d_ghat), w.lambda_grad)?;
    let breakdown = LossBreakdown::weighted(l1 * inv_n, l2 * inv_n, lgrad, lc * inv_n, w);
    Ok((
        breakdown,
        LossGradients {
            d_ghat: g.with_values(d_ghat)?,
            d_logits: g.with_values(d_logits)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all(n: usize) -> Mask {
        Mask::filled(n, n, true)
    }

    #[test]
    fn regression_examples() {
        let g = Grid::from_fn(4, 4, |r, c| (r * c) as f64);
        assert_eq!(regression_losses(&g, &g, &all(4)).unwrap(), (0.0, 0.0));
        let g2 = g.map(|v| v + 2.0);
        assert_eq!(regression_losses(&g2, &g, &all(4)).unwrap(), (2.0, 4.0));
        let single = Mask::from_fn(4, 4, |r, c| r == 1 && c == 2);
        let g3 = g.map(|v| v - 3.0);
        assert_eq!(regression_losses(&g3, &g, &single).unwrap(), (3.0, 9.0));
        assert!(matches!(
            regression_losses(&g, &g, &Mask::filled(4, 4, false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn grad_loss_examples() {
        let g = Grid::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 5) as f64);
        assert_eq!(grad_loss(&g, &g, &all(5)).unwrap(), 0.0);
        assert_eq!(grad_loss(&g.map(|v| v + 9.0), &g, &all(5)).unwrap(), 0.0);
        let plane = Grid::from_fn(5, 5, |_, c| c as f64);
        let flat = Grid::filled(5, 5, 3.0);
        assert!((grad_loss(&plane, &flat, &all(5)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_examples() {
        let l = Grid::filled(3, 3, 0.0);
        let y = Mask::from_fn(3, 3, |r, _| r == 0);
        let v = confidence_loss(&l, &y, &all(3)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = Grid::from_fn(3, 3, |r, _| if r == 0 { 20.0 } else { -20.0 });
        assert!(confidence_loss(&sat, &y, &all(3)).unwrap() < 1e-8);
        let flipped = confidence_loss(&sat, &y.not(), &all(3)).unwrap();
        assert!((flipped - 20.0).abs() < 1e-6);
        let huge = Grid::filled(3, 3, 1e6);
        assert!(confidence_loss(&huge, &y.not(), &all(3)).unwrap().is_finite());
    }

    #[test]
    fn total_examples() {
        let g = Grid::from_fn(4, 4, |r, c| (r + c) as f64);
        let y = Mask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        let sat = Grid::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 30.0 } else { -30.0 });
        let b = total_loss(&g, &g, &sat, &y, &all(4), &LossWeights::default()).unwrap();
        assert!(b.total < 1e-8);

        let ghat = Grid::from_fn(4, 4, |r, c| (r * c) as f64 * 0.5);
        let l = Grid::from_fn(4, 4, |r, c| r as f64 - c as f64);
        let only_l1 = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda_grad: 0.0,
            lambda_c: 0.0,
        };
        let b = total_loss(&ghat, &g, &l, &y, &all(4), &only_l1).unwrap();
        assert_eq!(b.total, b.l1);

        let w = LossWeights::default();
        let b = total_loss(&ghat, &g, &l, &y, &all(4), &w).unwrap();
        let expect = b.l1 + b.l2 + 0.1 * b.lgrad + 0.1 * b.lc;
        assert_eq!(b.total, expect);
        let (b2, _) = total_loss_with_grad(&ghat, &g, &l, &y, &all(4), &w).unwrap();
        for (x, y) in [(b.l1, b2.l1), (b.l2, b2.l2), (b.lgrad, b2.lgrad), (b.lc, b2.lc)] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_grad: 0.0,
            lambda_c: 0.0,
        };
        assert!(zero.validate().is_err());
    }

    fn random_case(seed: u64) -> (Grid, Grid, Grid, Mask, Mask) {
        let f = |k: u64| move |r: usize, c: usize| 2.0 * ((r * 31 + c * 17) as f64 * 0.731 + k as f64 * 1.37).sin();
        let gh = Grid::from_fn(8, 8, f(seed));
        let g = Grid::from_fn(8, 8, f(seed + 7));
        let l = Grid::from_fn(8, 8, f(seed + 13));
        let y = Mask::from_fn(8, 8, |r, c| (r + 2 * c + seed as usize).is_multiple_of(3));
        let m = Mask::from_fn(8, 8, |r, c| !(r * c + seed as usize).is_multiple_of(7));
        (gh, g, l, y, m)
    }

    proptest! {
        #[test]
        fn analytic_gradient_matches_finite_difference(seed in 0u64..1000) {
            let (gh, g, l, y, m) = random_case(seed);
            let w = LossWeights::default();
            let (_, grads) = total_loss_with_grad(&gh, &g, &l, &y, &m, &w).unwrap();
            let h = 1e-6;
            for i in 0..64 {
                let mut p = gh.values().to_vec();
                p[i] += h;
                let up = total_loss(&gh.with_values(p.clone()).unwrap(), &g, &l, &y, &m, &w).unwrap().total;
                p[i] -= 2.0 * h;
                let dn = total_loss(&gh.with_values(p).unwrap(), &g, &l, &y, &m, &w).unwrap().total;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.d_ghat.values()[i];
                prop_assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "ghat {i}: {fd} vs {an}");

                let mut q = l.values().to_vec();
                q[i] += h;
                let up = total_loss(&gh, &g, &l.with_values(q.clone()).unwrap(), &y, &m, &w).unwrap().total;
                q[i] -= 2.0 * h;
                let dn = total_loss(&gh, &g, &l.with_values(q).unwrap(), &y, &m, &w).unwrap().total;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.d_logits.values()[i];
                prop_assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "logit {i}: {fd} vs {an}");
            }
        }

        #[test]
        fn invalid_pixels_do_not_contribute(seed in 0u64..1000, v in -50.0..50.0f64) {
            let (gh, g, l, y, m) = random_case(seed);
            let w = LossWeights::default();
            let base = total_loss(&gh, &g, &l, &y, &m, &w).unwrap();
            let i = m.bits().iter().position(|&b| !b).unwrap();
            let mut p = gh.values().to_vec();
            p[i] = v;
            let mut q = l.values().to_vec();
            q[i] = -v;
            let after = total_loss(&gh.with_values(p).unwrap(), &g, &l.with_values(q).unwrap(), &y, &m, &w).unwrap();
            prop_assert_eq!(base, after);
        }

        #[test]
        fn total_is_non_negative(seed in 0u64..1000) {
            let (gh, g, l, y, m) = random_case(seed);
            prop_assert!(total_loss(&gh, &g, &l, &y, &m, &LossWeights::default()).unwrap().total >= 0.0);
        }
    }
}

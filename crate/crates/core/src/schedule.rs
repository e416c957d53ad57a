//! Variance schedules and the closed-form forward (corruption) process.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Grid;

pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Which family the per-step betas come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas follow a half-cosine ease from `beta_min` to `beta_max`.
    #[default]
    CosineBeta,
    /// `alpha_bar` follows the squared-cosine curve with offset 0.008.
    CosineAlphaBar,
}

/// Per-step `beta`, `alpha = 1 - beta` and cumulative `alpha_bar`.
///
/// Steps are 1-based: `beta(t)` for `t in 1..=steps`, and `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Posterior coefficients for one reverse step from `t` to `t - 1`.
    pub fn posterior(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        Ok(PosteriorCoefficients::between(
            self.alpha_bar(t - 1),
            self.alpha_bar(t),
        ))
    }

    /// CSV table `t,beta,alpha,alpha_bar` for `t = 1..=steps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{t},{:.17e},{:.17e},{:.17e}",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t)
            );
        }
        out
    }
}

/// Mean weights and variance of `q(g_{t-1} | g_t, g_0)`:
/// `mu = pred * g0_hat + current * g_t`, `g_{t-1} = mu + sqrt(variance) * eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub pred: f64,
    pub current: f64,
    pub variance: f64,
}

impl PosteriorCoefficients {
    /// Coefficients for a jump between two cumulative products. With
    /// `alpha_bar_prev == 1` this collapses to `mu = g0_hat`, zero variance;
    /// with equal products it is the identity step.
    pub fn between(alpha_bar_prev: f64, alpha_bar_t: f64) -> Self {
        let alpha = alpha_bar_t / alpha_bar_prev;
        let beta = 1.0 - alpha;
        let denom = 1.0 - alpha_bar_t;
        Self {
            pred: beta * alpha_bar_prev.sqrt() / denom,
            current: (1.0 - alpha_bar_prev) * alpha.sqrt() / denom,
            variance: (beta * (1.0 - alpha_bar_prev) / denom).max(0.0),
        }
    }
}

/// Betas on a half-cosine ease: `beta_min + (beta_max - beta_min) * (1 - cos(pi t / T)) / 2`.
pub fn make_cosine_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = (1..=steps)
        .map(|t| {
            let ease = (1.0 - (std::f64::consts::PI * t as f64 / steps as f64).cos()) / 2.0;
            beta_min + (beta_max - beta_min) * ease
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

/// Squared-cosine `alpha_bar` schedule, betas clipped to `max_beta`.
pub fn make_alpha_bar_cosine_schedule(steps: usize, max_beta: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let offset = 0.008;
    let f = |t: f64| {
        ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    let betas = (1..=steps)
        .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-12, max_beta))
        .collect();
    DiffusionSchedule::from_betas(betas)
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    match kind {
        ScheduleKind::CosineBeta => make_cosine_schedule(steps, beta_min, beta_max),
        ScheduleKind::CosineAlphaBar => make_alpha_bar_cosine_schedule(steps, 0.999),
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_cosine_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// `g_t = sqrt(alpha_bar_t) g0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(sched: &DiffusionSchedule, g0: &Grid, t: usize, eps: &Grid) -> Result<Grid> {
    sched.check_step(t)?;
    g0.check_shape(eps, "forward_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    g0.zip_map(eps, |x, e| a * x + b * e)
}

/// Slice form of [`forward_sample`] used on the training hot path.
pub fn forward_sample_into(sched: &DiffusionSchedule, g0: &[f64], t: usize, eps: &[f64], out: &mut Vec<f64>) {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    out.clear();
    out.extend(g0.iter().zip(eps).map(|(x, e)| a * x + b * e));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule_is_beta_max() {
        let s = make_cosine_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas().len(), 1);
        assert!((s.beta(1) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn degenerate_range_is_constant() {
        let s = make_cosine_schedule(7, 0.05, 0.05).unwrap();
        assert!(s.betas().iter().all(|&b| (b - 0.05).abs() < 1e-15));
    }

    #[test]
    fn default_schedule_increases_to_beta_max() {
        let s = make_cosine_schedule(10, 1e-4, 0.02).unwrap();
        for t in 2..=10 {
            assert!(s.beta(t) > s.beta(t - 1));
        }
        assert!((s.beta(10) - 0.02).abs() < 1e-15);
        for t in 1..=10 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        }
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = make_cosine_schedule(25, 1e-4, 0.3).unwrap();
        for t in 1..=25 {
            let direct: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
            assert!((direct - s.alpha_bar(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(make_cosine_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_cosine_schedule(10, 0.0, 0.02).is_err());
        assert!(make_cosine_schedule(10, 0.03, 0.02).is_err());
        assert!(make_cosine_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_hand_example() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.5]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.alpha_bar(3) - 0.36).abs() < 1e-15);
        let g0 = Grid::new(3, 1, vec![1.0, -2.0, 5.0]).unwrap();
        let zero = Grid::filled(3, 1, 0.0);
        let gt = forward_sample(&s, &g0, 3, &zero).unwrap();
        for (a, b) in gt.values().iter().zip(g0.values()) {
            assert!((a - 0.6 * b).abs() < 1e-12);
        }
        let eps = Grid::new(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let gt = forward_sample(&s, &zero, 2, &eps).unwrap();
        for (a, e) in gt.values().iter().zip(eps.values()) {
            assert!((a - 0.28f64.sqrt() * e).abs() < 1e-12);
        }
        assert!(forward_sample(&s, &g0, 0, &zero).is_err());
        assert!(forward_sample(&s, &g0, 4, &zero).is_err());
    }

    #[test]
    fn tiny_betas_leave_signal_nearly_intact() {
        let s = DiffusionSchedule::from_betas(vec![1e-12; 4]).unwrap();
        let g0 = Grid::new(2, 1, vec![3.0, -4.0]).unwrap();
        let eps = Grid::new(2, 1, vec![1.0, 1.0]).unwrap();
        let gt = forward_sample(&s, &g0, 4, &eps).unwrap();
        assert!((gt.get(0, 0) - 3.0).abs() < 1e-5);
    }

    #[test]
    fn posterior_hand_example() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.5]).unwrap();
        let p = s.posterior(2).unwrap();
        assert!((p.pred - 0.2 * 0.9f64.sqrt() / 0.28).abs() < 1e-12);
        assert!((p.current - 0.1 * 0.8f64.sqrt() / 0.28).abs() < 1e-12);
        assert!((p.pred - 0.6776).abs() < 1e-4);
        assert!((p.current - 0.3194).abs() < 1e-4);
        assert!((p.variance - 0.07143).abs() < 1e-4);
        let last = s.posterior(1).unwrap();
        assert!((last.pred - 1.0).abs() < 1e-12);
        assert_eq!(last.current, 0.0);
        assert_eq!(last.variance, 0.0);
        assert!(s.posterior(0).is_err());
    }

    #[test]
    fn noiseless_trajectory_is_a_fixed_line() {
        let s = make_cosine_schedule(10, 1e-4, 0.02).unwrap();
        let g0 = 0.73;
        for t in 1..=10 {
            let p = s.posterior(t).unwrap();
            let mu = p.pred * g0 + p.current * s.alpha_bar(t).sqrt() * g0;
            assert!((mu - s.alpha_bar(t - 1).sqrt() * g0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_bar_cosine_is_valid() {
        let s = make_alpha_bar_cosine_schedule(10, 0.999).unwrap();
        for t in 1..=10 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = DiffusionSchedule::default().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 11);
    }
}

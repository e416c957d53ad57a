//! Reverse diffusion: initial states, the posterior step and the full
//! generation loop, including respacing when sampling with fewer or more
//! steps than the model was trained with.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::gate::sigmoid;
use crate::denoiser::{gated_predict, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::Real;
use crate::raster::{denormalize_masked, normalize_with, Grid, Mask, NormMode, NormParams};
use crate::schedule::{DiffusionSchedule, PosteriorCoefficients};

/// Anything that maps `(g_t, s, t)` to a gated clean estimate and logits, on
/// normalized grids.
pub trait Denoise: Sync {
    fn predict(&self, g_t: &Grid, s: &Grid, t: usize) -> Result<(Grid, Grid)>;

    /// `false` for single-pass models that ignore `g_t`.
    fn is_diffusion(&self) -> bool {
        true
    }
}

impl<T: Real> Denoise for DenoiserModel<T> {
    fn predict(&self, g_t: &Grid, s: &Grid, t: usize) -> Result<(Grid, Grid)> {
        gated_predict(self, g_t, s, t)
    }

    fn is_diffusion(&self) -> bool {
        self.arch().diffusion
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    GaussianNoise,
    Dsm,
    NoisyDsm,
    /// A prior terrain estimate, in the same (normalized) domain as `s`.
    PriorDtm(Grid),
}

/// Serializable tag of an [`InitMode`] without the prior payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    GaussianNoise,
    Dsm,
    #[default]
    NoisyDsm,
}

impl From<InitKind> for InitMode {
    fn from(k: InitKind) -> Self {
        match k {
            InitKind::GaussianNoise => InitMode::GaussianNoise,
            InitKind::Dsm => InitMode::Dsm,
            InitKind::NoisyDsm => InitMode::NoisyDsm,
        }
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "gaussian_noise" | "gaussian-noise" => Ok(InitKind::GaussianNoise),
            "dsm" => Ok(InitKind::Dsm),
            "noisy-dsm" | "noisy_dsm" => Ok(InitKind::NoisyDsm),
            other => Err(Error::InvalidArgument(format!("unknown init mode {other:?}"))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::GaussianNoise => "noise",
            InitKind::Dsm => "dsm",
            InitKind::NoisyDsm => "noisy-dsm",
        })
    }
}

fn normal_grid<R: Rng + ?Sized>(like: &Grid, rng: &mut R) -> Grid {
    let values = (0..like.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    like.with_values(values).expect("same shape")
}

/// `g_T` for the chosen mode; `s` is the normalized DSM.
pub fn init_state<R: Rng + ?Sized>(mode: &InitMode, s: &Grid, rng: &mut R) -> Result<Grid> {
    match mode {
        InitMode::GaussianNoise => Ok(normal_grid(s, rng)),
        InitMode::Dsm => Ok(s.clone()),
        InitMode::NoisyDsm => s.zip_map(&normal_grid(s, rng), |a, e| a + e),
        InitMode::PriorDtm(prior) => {
            prior.check_shape(s, "prior DTM")?;
            Ok(prior.clone())
        }
    }
}

fn apply_step(c: &PosteriorCoefficients, g0_hat: &Grid, g_t: &Grid, eps: Option<&Grid>) -> Result<Grid> {
    let mu = g0_hat.zip_map(g_t, |p, x| c.pred * p + c.current * x)?;
    match eps {
        Some(eps) if c.variance > 0.0 => {
            let sd = c.variance.sqrt();
            mu.zip_map(eps, |m, e| m + sd * e)
        }
        _ => Ok(mu),
    }
}

/// One reverse step `t -> t - 1` on the trained schedule.
pub fn posterior_step<D: Denoise + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    g_t: &Grid,
    s: &Grid,
    t: usize,
    eps: &Grid,
) -> Result<Grid> {
    let c = sched.posterior(t)?;
    eps.check_shape(g_t, "posterior noise")?;
    let (g0_hat, _) = model.predict(g_t, s, t)?;
    apply_step(&c, &g0_hat, g_t, Some(eps))
}

/// Trained-schedule indices visited when sampling with `t_r` steps:
/// `tau_k = ceil(k T / t_r)` for `k = 1..=t_r`. Identical to `1..=T` when
/// `t_r == T`; repeats indices (identity steps) when `t_r > T`.
pub fn respaced_steps(steps: usize, t_r: usize) -> Vec<usize> {
    (1..=t_r).map(|k| (k * steps).div_ceil(t_r)).collect()
}

/// Law of the reverse chain's state when every prediction is exact:
/// `g_t = a_t g_0 + c_t s + sqrt(v_t) eps`. Started from the forward
/// marginal at `T` it reproduces `q(g_t | g_0)`; started from a DSM-based
/// init it shows how much of the DSM the chain still carries at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMarginals {
    /// Indexed by `t`; entry 0 is unused.
    coeffs: Vec<(f64, f64, f64)>,
}

impl ChainMarginals {
    /// Start from `g_T = a g_0 + c s + sqrt(v) eps`.
    pub fn from_start(sched: &DiffusionSchedule, a: f64, c: f64, v: f64) -> Result<Self> {
        let steps = sched.steps();
        let mut coeffs = vec![(0.0, 0.0, 0.0); steps + 1];
        coeffs[steps] = (a, c, v);
        for t in (2..=steps).rev() {
            let p = sched.posterior(t)?;
            let (a, c, v) = coeffs[t];
            coeffs[t - 1] = (p.pred + p.current * a, p.current * c, p.current * p.current * v + p.variance);
        }
        Ok(Self { coeffs })
    }

    pub fn for_init(sched: &DiffusionSchedule, init: InitKind) -> Result<Self> {
        let (c, v) = match init {
            InitKind::GaussianNoise => (0.0, 1.0),
            InitKind::Dsm => (1.0, 0.0),
            InitKind::NoisyDsm => (1.0, 1.0),
        };
        Self::from_start(sched, 0.0, c, v)
    }

    pub fn at(&self, t: usize) -> (f64, f64, f64) {
        self.coeffs[t]
    }

    /// Draw `g_t` for normalized `g0` and `s`.
    pub fn corrupt(&self, t: usize, g0: &[f64], s: &[f64], eps: &[f64], out: &mut Vec<f64>) {
        let (a, c, v) = self.coeffs[t];
        let sd = v.sqrt();
        out.clear();
        out.extend(g0.iter().zip(s).zip(eps).map(|((&g, &s), &e)| a * g + c * s + sd * e));
    }
}

/// Result of [`sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    /// Terrain estimate in meters; nodata where the DSM was invalid.
    pub dtm: Grid,
    /// `sigmoid(logits)` of the final denoiser call.
    pub ground_prob: Grid,
    pub params: NormParams,
}

/// Reverse loop on an already normalized DSM. Returns the normalized clean
/// estimate and the final logits.
pub fn sample_normalized<D: Denoise + ?Sized, R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    s: &Grid,
    mode: &InitMode,
    t_r: usize,
    rng: &mut R,
) -> Result<(Grid, Grid)> {
    if t_r == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let mut g = init_state(mode, s, rng)?;
    if !model.is_diffusion() {
        return model.predict(&g, s, sched.steps());
    }
    let taus = respaced_steps(sched.steps(), t_r);
    let mut logits = None;
    for k in (1..=t_r).rev() {
        let tau = taus[k - 1];
        let prev = if k == 1 { 0 } else { taus[k - 2] };
        let c = PosteriorCoefficients::between(sched.alpha_bar(prev), sched.alpha_bar(tau));
        if tau == prev {
            continue;
        }
        let (g0_hat, l) = model.predict(&g, s, tau)?;
        let eps = if c.variance > 0.0 { Some(normal_grid(s, rng)) } else { None };
        g = apply_step(&c, &g0_hat, &g, eps.as_ref())?;
        logits = Some(l);
    }
    Ok((g, logits.expect("at least one non-identity step")))
}

/// Normalize `dsm`, run the reverse loop and map the estimate back to meters.
/// A [`InitMode::PriorDtm`] payload is given in meters and normalized with
/// the DSM's parameters.
pub fn sample<D: Denoise + ?Sized, R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    dsm: &Grid,
    norm: &NormMode,
    mode: &InitMode,
    t_r: usize,
    rng: &mut R,
) -> Result<Sampled> {
    let m = dsm.validity();
    sample_masked(sched, model, dsm, &m, norm, mode, t_r, rng)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_masked<D: Denoise + ?Sized, R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    model: &D,
    dsm: &Grid,
    m: &Mask,
    norm: &NormMode,
    mode: &InitMode,
    t_r: usize,
    rng: &mut R,
) -> Result<Sampled> {
    let params = norm.params(dsm, None, m)?;
    let s = normalize_with(dsm, m, &params)?;
    let mode = match mode {
        InitMode::PriorDtm(p) => InitMode::PriorDtm(normalize_with(p, &m.and(&p.validity())?, &params)?),
        other => other.clone(),
    };
    let (g0, logits) = sample_normalized(sched, model, &s, &mode, t_r, rng)?;
    let dtm = denormalize_masked(&g0, &params, m)?;
    let prob = logits
        .values()
        .iter()
        .zip(m.bits())
        .map(|(&l, &ok)| if ok { sigmoid(l) } else { f64::NAN })
        .collect();
    Ok(Sampled {
        dtm,
        ground_prob: dsm.with_values(prob)?,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_from_forward_marginal_is_the_forward_marginal() {
        let sched = DiffusionSchedule::default();
        let ab = sched.alpha_bar(10);
        let chain = ChainMarginals::from_start(&sched, ab.sqrt(), 0.0, 1.0 - ab).unwrap();
        for t in 1..=10 {
            let (a, c, v) = chain.at(t);
            assert!((a - sched.alpha_bar(t).sqrt()).abs() < 1e-12, "t={t}");
            assert_eq!(c, 0.0);
            assert!((v - (1.0 - sched.alpha_bar(t))).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn dsm_chain_fades_towards_the_last_step() {
        let sched = DiffusionSchedule::default();
        let chain = ChainMarginals::for_init(&sched, InitKind::NoisyDsm).unwrap();
        assert_eq!(chain.at(10), (0.0, 1.0, 1.0));
        for t in 2..=10 {
            assert!(chain.at(t - 1).1 < chain.at(t).1);
        }
        let (_, _, v) = chain.at(1);
        assert!(v.is_finite() && v >= 0.0);
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Returns a fixed clean estimate regardless of input.
    struct Oracle(Grid);

    impl Denoise for Oracle {
        fn predict(&self, _g_t: &Grid, _s: &Grid, _t: usize) -> Result<(Grid, Grid)> {
            Ok((self.0.clone(), self.0.map(|_| 3.0)))
        }
    }

    fn sched3() -> DiffusionSchedule {
        DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.5]).unwrap()
    }

    #[test]
    fn init_modes() {
        let s = Grid::from_fn(4, 4, |r, c| (r + c) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(init_state(&InitMode::Dsm, &s, &mut rng).unwrap(), s);
        let bad = InitMode::PriorDtm(Grid::filled(3, 4, 0.0));
        assert!(init_state(&bad, &s, &mut rng).is_err());
        let p = Grid::filled(4, 4, 0.5);
        assert_eq!(init_state(&InitMode::PriorDtm(p.clone()), &s, &mut rng).unwrap(), p);
    }

    #[test]
    fn gaussian_init_statistics() {
        let s = Grid::filled(400, 250, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = init_state(&InitMode::GaussianNoise, &s, &mut rng).unwrap();
        let n = x.len() as f64;
        let mean = x.values().iter().sum::<f64>() / n;
        let var = x.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt());
    }

    #[test]
    fn last_step_returns_estimate() {
        let g0 = Grid::from_fn(4, 4, |r, c| (r * c) as f64 * 0.05);
        let oracle = Oracle(g0.clone());
        let g1 = Grid::filled(4, 4, 7.0);
        let eps = Grid::filled(4, 4, 1.0);
        let out = posterior_step(&sched3(), &oracle, &g1, &g1, 1, &eps).unwrap();
        assert_eq!(out, g0);
        assert!(posterior_step(&sched3(), &oracle, &g1, &g1, 0, &eps).is_err());
    }

    #[test]
    fn respacing() {
        assert_eq!(respaced_steps(10, 10), (1..=10).collect::<Vec<_>>());
        assert_eq!(respaced_steps(10, 5), vec![2, 4, 6, 8, 10]);
        assert_eq!(respaced_steps(10, 1), vec![10]);
        assert_eq!(respaced_steps(10, 20)[..4], [1, 1, 2, 2]);
    }

    #[test]
    fn oracle_reaches_target_from_every_mode() {
        let dsm = Grid::from_fn(8, 8, |r, c| 100.0 + (r * 3 + c) as f64 * 0.7);
        let m = dsm.validity();
        let p = NormMode::MinMax.params(&dsm, None, &m).unwrap();
        let truth = dsm.map(|v| v - 1.5);
        let oracle = Oracle(normalize_with(&truth, &m, &p).unwrap());
        let sched = DiffusionSchedule::default();
        for mode in [InitMode::GaussianNoise, InitMode::Dsm, InitMode::NoisyDsm] {
            for t_r in [1, 5, 10] {
                let mut rng = ChaCha8Rng::seed_from_u64(t_r as u64);
                let out = sample(&sched, &oracle, &dsm, &NormMode::MinMax, &mode, t_r, &mut rng).unwrap();
                for (a, b) in out.dtm.values().iter().zip(truth.values()) {
                    assert!((a - b).abs() <= 1e-6);
                }
                assert!(out.ground_prob.values().iter().all(|&v| v == sigmoid(3.0)));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let dsm = Grid::from_fn(8, 8, |r, c| ((r + c) as f64).sin());
        let oracle = Oracle(Grid::from_fn(8, 8, |r, _| r as f64 * 0.1));
        let sched = DiffusionSchedule::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample(&sched, &oracle, &dsm, &NormMode::MinMax, &InitMode::NoisyDsm, 10, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_pixels_stay_nodata() {
        let mut v: Vec<f64> = (0..64).map(|i| i as f64).collect();
        v[9] = f64::NAN;
        let dsm = Grid::new(8, 8, v).unwrap();
        let oracle = Oracle(Grid::filled(8, 8, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample(&DiffusionSchedule::default(), &oracle, &dsm, &NormMode::MinMax, &InitMode::Dsm, 3, &mut rng).unwrap();
        assert!(out.dtm.values()[9].is_nan());
        assert!(out.ground_prob.values()[9].is_nan());
        assert!(out.dtm.values()[10].is_finite());
    }

    #[test]
    fn init_kind_parsing() {
        assert_eq!("noise".parse::<InitKind>().unwrap(), InitKind::GaussianNoise);
        assert_eq!("noisy-dsm".parse::<InitKind>().unwrap(), InitKind::NoisyDsm);
        assert!("bogus".parse::<InitKind>().is_err());
        assert_eq!(InitKind::NoisyDsm.to_string(), "noisy-dsm");
    }
}

//! Training: augmentation, AdamW with warmup-cosine learning rate, the
//! per-batch update and the early-stopped fit loop.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::gate::{gate_backward, gate_slices};
use crate::denoiser::{checkpoint, ArchSpec, DenoiserModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, LossBreakdown, LossWeights, CSV_HEADER};
use crate::metrics::regression_metrics;
use crate::nn::{Real, Tensor};
use crate::raster::resample::{
    flip_horizontal, flip_horizontal_mask, flip_vertical, flip_vertical_mask, resize_bilinear, resize_nearest,
    rotate90, rotate90_mask, rotate_bilinear, rotate_nearest_mask,
};
use crate::raster::{ground_mask, normalize_with, Grid, Mask, NormMode, DEFAULT_ALPHA_METERS};
use crate::sampler::{sample_masked, ChainMarginals, Denoise, InitKind};
use crate::schedule::{forward_sample_into, make_schedule, DiffusionSchedule, ScheduleKind};
use crate::synth::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_rot90: f64,
    pub p_jitter: f64,
    pub jitter_deg: f64,
    pub p_scale: f64,
    /// Resize targets as multiples of the patch size.
    pub scale_factors: Vec<f64>,
    pub p_hflip: f64,
    pub p_vflip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rot90: 0.5,
            p_jitter: 0.5,
            jitter_deg: 5.0,
            p_scale: 0.5,
            scale_factors: vec![1.0, 2.0, 4.0],
            p_hflip: 0.5,
            p_vflip: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            p_rot90: 0.0,
            p_jitter: 0.0,
            p_scale: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            ..Self::default()
        }
    }
}

/// Normalization family; `Global` statistics are fitted on the training set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    MinMax,
    Global,
    MeanShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Optimizer-step horizon; the cosine decay reaches 0 here.
    pub max_steps: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Ground threshold in meters.
    pub alpha: f64,
    pub patch: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Validate every this many steps; 0 means once per epoch.
    pub val_every: usize,
    pub val_init: InitKind,
    /// Probability that a sample's `g_t` is drawn from the exact-prediction
    /// reverse chain started at `val_init` rather than from `q(g_t | g_0)`.
    /// 0 trains on the forward process only. With the default schedule
    /// `q(g_T | g_0)` is close to the clean DTM, so a pure forward-process
    /// model learns to trust `g_t` and then keeps buildings when sampling
    /// starts from the DSM.
    pub chain_mix: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    pub norm: NormKind,
    pub augment: AugmentConfig,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 500,
            max_epochs: 1000,
            max_steps: 5000,
            batch_size: 16,
            timesteps: 10,
            schedule: ScheduleKind::CosineBeta,
            beta_min: crate::schedule::DEFAULT_BETA_MIN,
            beta_max: crate::schedule::DEFAULT_BETA_MAX,
            alpha: DEFAULT_ALPHA_METERS,
            patch: 64,
            seed: 0,
            early_stop_patience: 10,
            val_every: 0,
            val_init: InitKind::NoisyDsm,
            chain_mix: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            norm: NormKind::MinMax,
            augment: AugmentConfig::default(),
            arch: ArchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if self.max_epochs == 0 || self.max_steps == 0 || self.batch_size == 0 || self.timesteps == 0 {
            return bad("max_epochs, max_steps, batch_size and timesteps must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(0.0..=1.0).contains(&self.chain_mix) {
            return bad("chain_mix must lie in [0, 1]");
        }
        if self.arch.timesteps != self.timesteps {
            return bad("arch.timesteps must equal timesteps");
        }
        self.arch.validate()?;
        self.arch.check_input(self.patch, self.patch)?;
        self.loss.validate()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule, self.timesteps, self.beta_min, self.beta_max)
    }

    /// Total optimizer steps for a training set of `n` examples.
    pub fn horizon(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        self.max_steps.min(self.max_epochs.saturating_mul(per_epoch))
    }
}

/// Linear warmup to `lr` over `warmup_steps`, then cosine decay to 0 at `horizon`.
pub fn lr_at(step: usize, lr: f64, warmup_steps: usize, horizon: usize) -> f64 {
    if step < warmup_steps {
        return lr * step as f64 / warmup_steps as f64;
    }
    if step >= horizon {
        return 0.0;
    }
    let span = (horizon - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected AdamW update with decoupled weight decay:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer state size".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let p = params[i].as_f64();
            params[i] = T::of(p * decay - lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        Ok(())
    }
}

/// A raw training pair in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub dsm: Grid,
    pub dtm: Grid,
    pub valid: Mask,
}

impl Example {
    pub fn new(dsm: Grid, dtm: Grid) -> Result<Self> {
        dsm.check_shape(&dtm, "example")?;
        let valid = dsm.validity().and(&dtm.validity())?;
        Ok(Self { dsm, dtm, valid })
    }
}

impl From<&Scene> for Example {
    fn from(s: &Scene) -> Self {
        Example::new(s.dsm.clone(), s.dtm.clone()).expect("scene rasters share a shape")
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Random geometric augmentation applied identically to `s`, `g` and `m`,
/// returning a `patch x patch` crop.
pub fn augment<R: Rng + ?Sized>(
    s: &Grid,
    g: &Grid,
    m: &Mask,
    patch: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Grid, Grid, Mask)> {
    s.check_shape(g, "augment")?;
    m.check_grid(s)?;
    let (mut s, mut g, mut m) = (s.clone(), g.clone(), m.clone());
    if uniform(rng) < cfg.p_rot90 {
        let k = rng.random_range(0..4usize);
        s = rotate90(&s, k);
        g = rotate90(&g, k);
        m = rotate90_mask(&m, k);
    }
    if uniform(rng) < cfg.p_jitter {
        let deg = (2.0 * uniform(rng) - 1.0) * cfg.jitter_deg;
        s = rotate_bilinear(&s, deg);
        g = rotate_bilinear(&g, deg);
        m = rotate_nearest_mask(&m, deg);
    }
    if uniform(rng) < cfg.p_scale && !cfg.scale_factors.is_empty() {
        let f = cfg.scale_factors[rng.random_range(0..cfg.scale_factors.len())];
        let n = ((patch as f64 * f).round() as usize).max(1);
        if (n, n) != (s.width(), s.height()) {
            s = resize_bilinear(&s, n, n);
            g = resize_bilinear(&g, n, n);
            m = resize_nearest(&m, n, n);
        }
    }
    if s.width() < patch || s.height() < patch {
        s = resize_bilinear(&s, patch, patch);
        g = resize_bilinear(&g, patch, patch);
        m = resize_nearest(&m, patch, patch);
    }
    let r0 = rng.random_range(0..=s.height() - patch);
    let c0 = rng.random_range(0..=s.width() - patch);
    if (s.width(), s.height()) != (patch, patch) {
        s = s.crop(r0, c0, patch, patch)?;
        g = g.crop(r0, c0, patch, patch)?;
        m = m.crop(r0, c0, patch, patch)?;
    }
    if uniform(rng) < cfg.p_hflip {
        s = flip_horizontal(&s);
        g = flip_horizontal(&g);
        m = flip_horizontal_mask(&m);
    }
    if uniform(rng) < cfg.p_vflip {
        s = flip_vertical(&s);
        g = flip_vertical(&g);
        m = flip_vertical_mask(&m);
    }
    let m = m.and(&s.validity())?.and(&g.validity())?;
    Ok((s, g, m))
}

/// A normalized training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub s: Grid,
    pub g: Grid,
    pub valid: Mask,
    pub ground: Mask,
}

/// Normalize a pair and derive the ground labels with `alpha` (meters)
/// scaled into normalized units.
pub fn prepare_sample(s: &Grid, g: &Grid, m: &Mask, norm: &NormMode, alpha: f64) -> Result<TrainSample> {
    let p = norm.params(s, Some(g), m)?;
    let s_n = normalize_with(s, m, &p)?;
    let g_n = normalize_with(g, m, &p)?;
    let ground = ground_mask(&s_n, &g_n, p.scale_length(alpha))?.and(m)?;
    Ok(TrainSample {
        s: s_n,
        g: g_n,
        valid: m.clone(),
        ground,
    })
}

/// Per-sample loss and parameter gradient for a corrupted input `g_t` at step `t`.
pub fn sample_loss_grad<T: Real>(
    model: &DenoiserModel<T>,
    sched: &DiffusionSchedule,
    sample: &TrainSample,
    t: usize,
    g_t: &[f64],
    weights: &LossWeights,
    grads: &mut [T],
) -> Result<LossBreakdown> {
    sched.check_step(t)?;
    let (input, t_eff) = model.prepare_input(g_t, &sample.s, t)?;
    let (out, trace) = model.forward_tensor(input, t_eff);
    let n = out.plane();
    let r_hat: Vec<f64> = out.data[..n].iter().map(|v| v.as_f64()).collect();
    let logits: Vec<f64> = out.data[n..].iter().map(|v| v.as_f64()).collect();
    let mode = model.arch().gate_mode();
    let mut g0 = vec![0.0; n];
    gate_slices(mode, &r_hat, &logits, sample.s.values(), &mut g0);
    let g0 = sample.s.with_values(g0)?;
    let logits_grid = sample.s.with_values(logits)?;
    let (loss, lg) = total_loss_with_grad(&g0, &sample.g, &logits_grid, &sample.ground, &sample.valid, weights)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss at t={t}")));
    }
    let mut d_r = vec![0.0; n];
    let mut d_l_gate = vec![0.0; n];
    gate_backward(
        mode,
        &r_hat,
        logits_grid.values(),
        sample.s.values(),
        lg.d_ghat.values(),
        &mut d_r,
        &mut d_l_gate,
    );
    let data = d_r
        .iter()
        .copied()
        .chain(d_l_gate.iter().zip(lg.d_logits.values()).map(|(a, b)| a + b))
        .map(T::of)
        .collect();
    let d_out = Tensor::from_vec(2, out.h, out.w, data);
    model.backward_tensor(&trace, &d_out, grads);
    Ok(loss)
}

/// Everything mutable during training.
pub struct Trainer<T: Real = f32> {
    pub cfg: TrainConfig,
    pub sched: DiffusionSchedule,
    pub model: DenoiserModel<T>,
    pub opt: OptimizerState,
    pub step: usize,
    pub horizon: usize,
    noise_rng: ChaCha8Rng,
    chain: ChainMarginals,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, model: DenoiserModel<T>, horizon: usize) -> Result<Self> {
        cfg.validate()?;
        if model.arch() != &cfg.arch {
            return Err(Error::InvalidArgument("model architecture differs from config".into()));
        }
        let sched = cfg.schedule()?;
        let opt = OptimizerState::new(model.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(1);
        let chain = ChainMarginals::for_init(&sched, cfg.val_init)?;
        Ok(Self {
            chain,
            cfg,
            sched,
            model,
            opt,
            step: 0,
            horizon,
            noise_rng,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step + 1, self.cfg.lr, self.cfg.warmup_steps, self.horizon)
    }

    /// Mean loss and gradient over a batch, without updating.
    pub fn batch_gradient(&mut self, batch: &[TrainSample]) -> Result<(LossBreakdown, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mix = self.cfg.chain_mix;
        let draws: Vec<(usize, Vec<f64>)> = batch
            .iter()
            .map(|s| {
                let t = self.noise_rng.random_range(1..=self.sched.steps());
                let eps: Vec<f64> = (0..s.g.len()).map(|_| self.noise_rng.sample(StandardNormal)).collect();
                let from_chain = mix > 0.0 && self.noise_rng.random::<f64>() < mix;
                let mut g_t = Vec::with_capacity(eps.len());
                if from_chain {
                    self.chain.corrupt(t, s.g.values(), s.s.values(), &eps, &mut g_t);
                } else {
                    forward_sample_into(&self.sched, s.g.values(), t, &eps, &mut g_t);
                }
                (t, g_t)
            })
            .collect();
        let (model, sched, w) = (&self.model, &self.sched, &self.cfg.loss);
        let parts: Vec<Result<(LossBreakdown, Vec<T>)>> = batch
            .par_iter()
            .zip(draws.par_iter())
            .map(|(s, (t, g_t))| {
                let mut g = vec![T::zero(); model.param_count()];
                let loss = sample_loss_grad(model, sched, s, *t, g_t, w, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        let k = 1.0 / batch.len() as f64;
        let mut grads = vec![0.0; self.model.param_count()];
        let mut mean = LossBreakdown::default();
        for part in parts {
            let (loss, g) = part?;
            mean.add(&loss.scaled(k));
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v.as_f64() * k;
            }
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        Ok((mean, grads))
    }

    /// One AdamW update on `batch`; returns the mean loss breakdown.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<LossBreakdown> {
        let (loss, grads) = self.batch_gradient(batch)?;
        let lr = self.current_lr();
        self.opt
            .update(self.model.params_mut(), &grads, lr, self.cfg.weight_decay)?;
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub step: usize,
    pub rmse: f64,
}

pub struct FitOutcome<T: Real = f32> {
    /// Parameters with the lowest validation RMSE.
    pub best: DenoiserModel<T>,
    pub best_rmse: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValRow>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.loss.csv_row(r.step, r.lr));
        out.push('\n');
    }
    out
}

/// Resolve a [`NormKind`] into concrete parameters for a training set.
pub fn norm_mode(kind: NormKind, train: &[Example]) -> Result<NormMode> {
    Ok(match kind {
        NormKind::MinMax => NormMode::MinMax,
        NormKind::MeanShift => NormMode::MeanShift,
        NormKind::Global => NormMode::fit_global(train.iter().flat_map(|e| [&e.dsm, &e.dtm]))?,
    })
}

/// Aggregate scores of a model over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// RMSE pooled over all valid pixels of all examples.
    pub rmse: f64,
    pub mae: f64,
    pub e_t1: f64,
    pub e_t2: f64,
    pub e_tot: f64,
    /// RMSE(dsm, dtm) over the same pixels.
    pub identity_rmse: f64,
}

/// Sample every example with its own seed `seed + index` and pool errors.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<D: Denoise + ?Sized>(
    model: &D,
    sched: &DiffusionSchedule,
    set: &[Example],
    norm: &NormMode,
    init: InitKind,
    t_r: usize,
    alpha: f64,
    seed: u64,
) -> Result<EvalSummary> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let per: Vec<Result<(f64, f64, f64, usize, [usize; 4])>> = set
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let out = sample_masked(sched, model, &ex.dsm, &ex.valid, norm, &init.into(), t_r, &mut rng)?;
            let (rmse, mae) = regression_metrics(&out.dtm, &ex.dtm, &ex.valid)?;
            let (id, _) = regression_metrics(&ex.dsm, &ex.dtm, &ex.valid)?;
            let n = ex.valid.count();
            let gt = ground_mask(&ex.dsm, &ex.dtm, alpha)?;
            let mut c = [0usize; 4];
            for ((&p, &g), &ok) in out.ground_prob.values().iter().zip(gt.bits()).zip(ex.valid.bits()) {
                if ok {
                    let k = if g { 2 } else { 0 };
                    c[k + 1] += 1;
                    c[k] += usize::from((p >= 0.5) != g);
                }
            }
            Ok((rmse * rmse * n as f64, mae * n as f64, id * id * n as f64, n, c))
        })
        .collect();
    let (mut se, mut ae, mut ise, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut c = [0usize; 4];
    for p in per {
        let (a, b, d, k, cc) = p?;
        se += a;
        ae += b;
        ise += d;
        n += k;
        for j in 0..4 {
            c[j] += cc[j];
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok(EvalSummary {
        rmse: (se / n as f64).sqrt(),
        mae: ae / n as f64,
        e_t1: pct(c[0], c[1]),
        e_t2: pct(c[2], c[3]),
        e_tot: pct(c[0] + c[2], c[1] + c[3]),
        identity_rmse: (ise / n as f64).sqrt(),
    })
}

/// Train with early stopping on validation RMSE (full reverse sampling at
/// `T_r = T`). When `ckpt_dir` is given, `best.fckp` is rewritten at every
/// improvement and `last.fckp` at the end, so a divergence leaves the best
/// checkpoint on disk.
pub fn fit<T: Real>(
    model: DenoiserModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<FitOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let norm = norm_mode(cfg.norm, train)?;
    let horizon = cfg.horizon(train.len());
    let mut trainer = Trainer::new(cfg.clone(), model, horizon)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let val_every = if cfg.val_every == 0 { per_epoch } else { cfg.val_every };
    let val_seed = cfg.seed ^ 0x5eed_0f_0a1;

    let mut best = trainer.model.clone();
    let mut best_rmse = f64::INFINITY;
    let mut best_step = 0;
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let mut validation = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    while trainer.step < horizon {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut data_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = order[cursor..end]
            .iter()
            .map(|&i| {
                let ex = &train[i];
                let (s, g, m) = augment(&ex.dsm, &ex.dtm, &ex.valid, cfg.patch, &cfg.augment, &mut data_rng)?;
                prepare_sample(&s, &g, &m, &norm, cfg.alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        cursor = end;
        let lr = trainer.current_lr();
        let loss = trainer.train_step(&batch)?;
        log.push(LogRow {
            step: trainer.step,
            lr,
            loss,
        });
        if trainer.step % val_every == 0 || trainer.step == horizon {
            let summary = evaluate(
                &trainer.model,
                &trainer.sched,
                val,
                &norm,
                cfg.val_init,
                cfg.timesteps,
                cfg.alpha,
                val_seed,
            )?;
            info!(
                "step {} loss {:.5} val rmse {:.4} (identity {:.4})",
                trainer.step, loss.total, summary.rmse, summary.identity_rmse
            );
            validation.push(ValRow {
                step: trainer.step,
                rmse: summary.rmse,
            });
            if summary.rmse < best_rmse {
                best_rmse = summary.rmse;
                best_step = trainer.step;
                best = trainer.model.clone();
                since_best = 0;
                if let Some(dir) = ckpt_dir {
                    checkpoint::save(dir.join("best.fckp"), &best)?;
                }
            } else {
                since_best += 1;
            }
            if since_best > cfg.early_stop_patience || (cfg.early_stop_patience == 0 && validation.len() == 1) {
                stopped_early = trainer.step < horizon;
                break;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        checkpoint::save(dir.join("last.fckp"), &trainer.model)?;
    }
    Ok(FitOutcome {
        best,
        best_rmse,
        best_step,
        steps: trainer.step,
        stopped_early,
        log,
        validation,
    })
}

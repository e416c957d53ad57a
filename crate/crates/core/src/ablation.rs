//! Controlled comparisons: each axis trains a handful of variants on the same
//! synthetic corpus with the same seeds and step budget, then scores them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserModel, Target};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::regression_metrics;
use crate::priostitch::{stitch, BlendMode, StitchConfig};
use crate::sampler::InitKind;
use crate::synth::{generate, SceneSpec};
use crate::trainer::{evaluate, fit, norm_mode, EvalSummary, Example, NormKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NoDiffusionUnet,
    AbsoluteTarget,
    NoGating,
    InitMode,
    LossSubset,
    Normalization,
    Timesteps,
    BlendMode,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::NoDiffusionUnet,
        Axis::AbsoluteTarget,
        Axis::NoGating,
        Axis::InitMode,
        Axis::LossSubset,
        Axis::Normalization,
        Axis::Timesteps,
        Axis::BlendMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::NoDiffusionUnet => "no_diffusion_unet",
            Axis::AbsoluteTarget => "absolute_target",
            Axis::NoGating => "no_gating",
            Axis::InitMode => "init_mode",
            Axis::LossSubset => "loss_subset",
            Axis::Normalization => "normalization",
            Axis::Timesteps => "timesteps",
            Axis::BlendMode => "blend_mode",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation axis {s:?}")))
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: Axis,
    pub seed: u64,
    /// Optimizer steps per trained variant.
    pub budget: usize,
    /// Settings shared by every variant; the axis overrides one field.
    pub base: TrainConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene_size: usize,
    /// Training step counts for the timesteps axis.
    pub t_f: Vec<usize>,
    /// Sampling step counts for the timesteps axis.
    pub t_r: Vec<usize>,
    /// Side of the scene used by the blend-mode axis.
    pub stitch_size: usize,
}

impl AblationSpec {
    pub fn new(axis: Axis, seed: u64, budget: usize) -> Self {
        Self {
            axis,
            seed,
            budget,
            base: TrainConfig::default(),
            train_scenes: 200,
            val_scenes: 40,
            scene_size: 64,
            t_f: vec![10],
            t_r: vec![1, 2, 5, 10, 20],
            stitch_size: 256,
        }
    }
}

/// Training corpus shared by all variants. Validation seeds are offset so
/// the two sets never overlap.
pub fn desk_corpus(seed: u64, train: usize, val: usize, size: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    let make = |s: u64| generate(&SceneSpec::randomized(s, size)).map(|sc| Example::from(&sc));
    let base = seed.wrapping_mul(1_000_003);
    let tr = (0..train as u64).map(|i| make(base.wrapping_add(i))).collect::<Result<_>>()?;
    let va = (0..val as u64).map(|i| make(base.wrapping_add(500_000 + i))).collect::<Result<_>>()?;
    Ok((tr, va))
}

#[derive(Clone, Debug, PartialEq)]
enum Scoring {
    Sample { init: InitKind, t_r: usize },
    Stitch { blend: BlendMode },
}

#[derive(Clone, Debug)]
struct Arm {
    label: String,
    cfg: TrainConfig,
    scores: Vec<(String, Scoring)>,
}

fn arms(spec: &AblationSpec) -> Vec<Arm> {
    let mut base = spec.base.clone();
    base.max_steps = spec.budget;
    base.seed = spec.seed;
    let t = base.timesteps;
    let default_score = || vec![(String::new(), Scoring::Sample { init: base.val_init, t_r: t })];
    let one = |label: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        let t_r = if cfg.arch.diffusion { cfg.timesteps } else { 1 };
        Arm {
            label: label.into(),
            scores: vec![(String::new(), Scoring::Sample { init: cfg.val_init, t_r })],
            cfg,
        }
    };
    match spec.axis {
        Axis::NoDiffusionUnet => vec![
            one("diffusion", &|_| {}),
            one("single_pass_unet", &|c| c.arch.diffusion = false),
        ],
        Axis::AbsoluteTarget => vec![
            one("residual_target", &|_| {}),
            one("absolute_target", &|c| c.arch.target = Target::Absolute),
        ],
        Axis::NoGating => vec![one("gated", &|_| {}), one("ungated", &|c| c.arch.gating = false)],
        Axis::InitMode => vec![Arm {
            label: String::new(),
            cfg: base.clone(),
            scores: [InitKind::GaussianNoise, InitKind::Dsm, InitKind::NoisyDsm]
                .into_iter()
                .map(|init| (format!("init_{init}"), Scoring::Sample { init, t_r: t }))
                .collect(),
        }],
        Axis::LossSubset => {
            let w = base.loss;
            let subset = |l2: bool, lg: bool| LossWeights {
                lambda2: if l2 { w.lambda2 } else { 0.0 },
                lambda_grad: if lg { w.lambda_grad } else { 0.0 },
                ..w
            };
            vec![
                one("l1", &|c| c.loss = subset(false, false)),
                one("l1_l2", &|c| c.loss = subset(true, false)),
                one("l1_l2_lgrad", &|c| c.loss = subset(true, true)),
            ]
        }
        Axis::Normalization => vec![
            one("minmax", &|c| c.norm = NormKind::MinMax),
            one("global_standardization", &|c| c.norm = NormKind::Global),
            one("mean_shift_localization_stand_in", &|c| c.norm = NormKind::MeanShift),
        ],
        Axis::Timesteps => spec
            .t_f
            .iter()
            .map(|&tf| {
                let mut cfg = base.clone();
                cfg.timesteps = tf;
                cfg.arch.timesteps = tf;
                Arm {
                    label: format!("t_f={tf}"),
                    scores: spec
                        .t_r
                        .iter()
                        .map(|&t_r| (format!("t_r={t_r}"), Scoring::Sample { init: cfg.val_init, t_r }))
                        .collect(),
                    cfg,
                }
            })
            .collect(),
        Axis::BlendMode => vec![Arm {
            label: String::new(),
            cfg: base.clone(),
            scores: BlendMode::ALL
                .into_iter()
                .map(|blend| (format!("blend_{blend}"), Scoring::Stitch { blend }))
                .collect(),
        }],
    }
    .into_iter()
    .map(|a| if a.scores.is_empty() { Arm { scores: default_score(), ..a } } else { a })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub variant: String,
    pub rmse: f64,
    pub mae: f64,
    pub e_t1: f64,
    pub e_t2: f64,
    pub e_tot: f64,
    pub identity_rmse: f64,
    pub steps: usize,
    /// False when the trained model does not beat the identity baseline on
    /// validation, which at these budgets means training did not converge.
    pub converged: bool,
}

pub const ABLATION_CSV_HEADER: &str = "axis,variant,rmse,mae,e_t1,e_t2,e_tot,identity_rmse,steps,status";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6},{},{}",
            self.axis,
            self.variant,
            self.rmse,
            self.mae,
            self.e_t1,
            self.e_t2,
            self.e_tot,
            self.identity_rmse,
            self.steps,
            if self.converged { "converged" } else { "non-converged" }
        )
    }
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// A trained variant.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: DenoiserModel,
    pub steps: usize,
    pub val: EvalSummary,
}

/// Trained models keyed by their full configuration, so axes that share a
/// baseline train it once.
#[derive(Default)]
pub struct ModelCache {
    models: HashMap<String, Trained>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn train(&mut self, cfg: &TrainConfig, train: &[Example], val: &[Example]) -> Result<&Trained> {
        let key = serde_json::to_string(cfg)?;
        if !self.models.contains_key(&key) {
            info!("training variant {key}");
            let model = DenoiserModel::<f32>::new(cfg.arch.clone(), cfg.seed)?;
            let out = fit(model, train, val, cfg, None)?;
            let sched = cfg.schedule()?;
            let norm = norm_mode(cfg.norm, train)?;
            let t_r = if cfg.arch.diffusion { cfg.timesteps } else { 1 };
            let summary = evaluate(&out.best, &sched, val, &norm, cfg.val_init, t_r, cfg.alpha, cfg.seed)?;
            self.models.insert(
                key.clone(),
                Trained {
                    model: out.best,
                    steps: out.steps,
                    val: summary,
                },
            );
        }
        Ok(&self.models[&key])
    }
}

/// Train and score every variant of `spec.axis` on a fresh corpus.
pub fn run_ablation(spec: &AblationSpec) -> Result<Vec<AblationRow>> {
    let (train, val) = desk_corpus(spec.seed, spec.train_scenes, spec.val_scenes, spec.scene_size)?;
    run_ablation_with(spec, &train, &val, &mut ModelCache::new())
}

pub fn run_ablation_with(
    spec: &AblationSpec,
    train: &[Example],
    val: &[Example],
    cache: &mut ModelCache,
) -> Result<Vec<AblationRow>> {
    if spec.budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let mut rows = Vec::new();
    for arm in arms(spec) {
        let cfg = &arm.cfg;
        let trained = cache.train(cfg, train, val)?.clone();
        let converged = trained.val.rmse < trained.val.identity_rmse;
        let sched = cfg.schedule()?;
        let norm = norm_mode(cfg.norm, train)?;
        for (suffix, scoring) in &arm.scores {
            let variant = match (arm.label.is_empty(), suffix.is_empty()) {
                (false, false) => format!("{}/{}", arm.label, suffix),
                (false, true) => arm.label.clone(),
                _ => suffix.clone(),
            };
            let s = match scoring {
                Scoring::Sample { init, t_r } => {
                    evaluate(&trained.model, &sched, val, &norm, *init, *t_r, cfg.alpha, spec.seed)?
                }
                Scoring::Stitch { blend } => {
                    let scene = generate(&SceneSpec::randomized(spec.seed ^ 0x57_17c4, spec.stitch_size))?;
                    let sc = StitchConfig {
                        tile: cfg.patch,
                        stride: cfg.patch / 2,
                        blend: *blend,
                        use_prior: true,
                        steps: cfg.timesteps,
                        seed: spec.seed,
                    };
                    let out = stitch(&sched, &trained.model, &scene.dsm, &norm, &sc)?;
                    let valid = scene.dsm.validity();
                    let (rmse, mae) = regression_metrics(&out.dtm, &scene.dtm, &valid)?;
                    let (id, _) = regression_metrics(&scene.dsm, &scene.dtm, &valid)?;
                    EvalSummary {
                        rmse,
                        mae,
                        identity_rmse: id,
                        ..Default::default()
                    }
                }
            };
            rows.push(AblationRow {
                axis: spec.axis,
                variant,
                rmse: s.rmse,
                mae: s.mae,
                e_t1: s.e_t1,
                e_t2: s.e_t2,
                e_tot: s.e_tot,
                identity_rmse: s.identity_rmse,
                steps: trained.steps,
                converged,
            });
        }
    }
    Ok(rows)
}

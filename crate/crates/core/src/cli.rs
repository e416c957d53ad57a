//! Command-line front end: argument parsing, flat config files, run
//! manifests and exit-code mapping. `main` only forwards to [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ablation::{desk_corpus, rows_csv, run_ablation_with, AblationSpec, Axis, ModelCache};
use crate::denoiser::{checkpoint, DenoiserModel};
use crate::error::{Error, Result};
use crate::metrics::{classification_errors, mad, med, regression_metrics, MetricsReport, REPORT_CSV_HEADER};
use crate::priostitch::{estimate_runtime, stitch, BlendMode, StitchConfig, DEFAULT_STEP_SECONDS};
use crate::raster::{fgrid, Grid, Mask, NormMode};
use crate::sampler::{sample, InitKind};
use crate::schedule::{make_schedule, ScheduleKind, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::synth::{generate, SceneSpec};
use crate::trainer::{fit, log_csv, norm_mode, Example, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_SOFTWARE: i32 = 70;
pub const SEED_ENV: &str = "TERRAINDIFF_SEED";

#[derive(Parser, Debug)]
#[command(name = "terraindiff", version, about = "DSM to DTM conversion with gated conditional diffusion")]
pub struct Cli {
    /// Where to write the run manifest (default: inside the output directory).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic DSM/DTM/ground-mask triplets.
    Synth(SynthArgs),
    /// Train a denoiser from a synth manifest.
    Train(TrainArgs),
    /// Run the reverse sampler on one DSM.
    Infer(InferArgs),
    /// Tiled inference for large rasters.
    Stitch(StitchArgs),
    /// Score a predicted DTM against ground truth.
    Eval(EvalArgs),
    /// Train and compare variants along one ablation axis.
    Ablate(AblateArgs),
    /// Print the beta / alpha / alpha-bar table as CSV.
    ScheduleDump(ScheduleArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of training scenes.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Number of additional validation scenes.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON-lines manifest written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub dsm: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "noisy-dsm")]
    pub init: InitKind,
    /// Reverse steps `T_r`; defaults to the trained `T`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    pub preview: bool,
}

#[derive(Args, Debug)]
pub struct StitchArgs {
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Raster size `WxH` for `--estimate-only` without a DSM.
    #[arg(long, value_name = "WxH")]
    pub size: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long, default_value_t = 128)]
    pub stride: usize,
    #[arg(long, default_value = "min")]
    pub blend: BlendMode,
    #[arg(long)]
    pub no_prior: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub estimate_only: bool,
    #[arg(long, default_value_t = DEFAULT_STEP_SECONDS)]
    pub step_seconds: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub preview: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub prob: Option<PathBuf>,
    /// Ground-truth ground mask as an FGRID of 0/1.
    #[arg(long)]
    pub gt_mask: Option<PathBuf>,
    /// CSV of `x,y,z` points for MED.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Per-pixel signed error raster.
    #[arg(long)]
    pub error_grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub axis: Vec<Axis>,
    /// Optimizer steps per trained variant.
    #[arg(long, default_value_t = 1000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub train_scenes: usize,
    #[arg(long, default_value_t = 40)]
    pub val_scenes: usize,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub timesteps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_MIN)]
    pub beta_min: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_MAX)]
    pub beta_max: f64,
    #[arg(long, default_value = "cosine_beta")]
    pub kind: String,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parsed config file: key -> (value, line). Later duplicates win.
pub type ConfigMap = BTreeMap<String, (String, usize)>;

/// Parse `key=value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected key=value, got {body:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config {
                line,
                message: "empty key".into(),
            });
        }
        if let Some((_, prev)) = map.insert(k.to_string(), (v.to_string(), line)) {
            warn!("config key {k:?} on line {line} overrides line {prev}");
        }
    }
    Ok(map)
}

pub fn load_config(path: &Path) -> Result<ConfigMap> {
    parse_config(&fs::read_to_string(path)?)
}

fn alias(key: &str) -> &str {
    match key {
        "T" | "t_f" => "timesteps",
        "batch" => "batch_size",
        "epochs" => "max_epochs",
        "warmup" => "warmup_steps",
        "attention" => "use_bottleneck_attention",
        other => other,
    }
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Set one key on a config. Keys name a field of [`TrainConfig`] or of its
/// `loss`, `augment` or `arch` sections; `section.field` also works.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str, line: usize) -> Result<()> {
    let err = |message: String| Error::Config { line, message };
    let mut doc = serde_json::to_value(&*cfg)?;
    let key = alias(key);
    let root = doc.as_object_mut().expect("struct serializes to an object");
    let slot = if let Some((section, field)) = key.split_once('.') {
        root.get_mut(section)
            .and_then(Value::as_object_mut)
            .and_then(|o| o.get_mut(field))
    } else if root.contains_key(key) {
        root.get_mut(key)
    } else {
        root.values_mut()
            .filter_map(Value::as_object_mut)
            .find_map(|o| o.get_mut(key))
    };
    let slot = slot.ok_or_else(|| err(format!("unknown key {key:?}")))?;
    *slot = match slot {
        Value::String(_) => Value::String(value.to_string()),
        Value::Object(o) if o.contains_key("kind") => serde_json::json!({ "kind": value }),
        _ => parse_value(value),
    };
    let mut next: TrainConfig = serde_json::from_value(doc).map_err(|e| err(format!("{key}: {e}")))?;
    if key == "timesteps" {
        next.arch.timesteps = next.timesteps;
    }
    next.validate().map_err(|e| err(e.to_string()))?;
    *cfg = next;
    Ok(())
}

pub fn config_from_map(map: &ConfigMap) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut entries: Vec<_> = map.iter().collect();
    entries.sort_by_key(|(_, (_, line))| *line);
    for (k, (v, line)) in entries {
        apply_key(&mut cfg, k, v, *line)?;
    }
    Ok(cfg)
}

/// File, then flags, then the seed environment variable.
fn resolve_config(file: Option<&Path>, flags: &[(&str, String)]) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => config_from_map(&load_config(p)?)?,
        None => TrainConfig::default(),
    };
    for (k, v) in flags {
        apply_key(&mut cfg, k, v, 0)?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={seed:?} is not an integer")))?;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
    /// Hex SHA-256 of every output file, keyed by path.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Run {
    command: &'static str,
    config: Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_dir: PathBuf,
}

impl Run {
    fn new(command: &'static str, seed: u64, manifest_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            config: Value::Null,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_dir: manifest_dir.into(),
        }
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{}: no such file", p.display()),
            )));
        }
        self.inputs.push(p.to_path_buf());
        Ok(())
    }

    fn grid(&mut self, p: &Path) -> Result<Grid> {
        self.input(p)?;
        fgrid::read(p)
    }

    fn write_grid(&mut self, p: PathBuf, g: &Grid) -> Result<()> {
        write_atomic(&p, &fgrid::encode(g))?;
        self.outputs.push(p);
        Ok(())
    }

    fn write_bytes(&mut self, p: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&p, bytes)?;
        self.outputs.push(p);
        Ok(())
    }

    fn finish(self, argv: &[String], started: Instant, explicit: Option<&Path>) -> Result<PathBuf> {
        let mut checksums = BTreeMap::new();
        for p in &self.outputs {
            checksums.insert(p.display().to_string(), sha256_file(p)?);
        }
        let m = RunManifest {
            command: self.command.into(),
            argv: argv.to_vec(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_seconds: started.elapsed().as_secs_f64(),
            checksums,
        };
        let path = explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.manifest_dir.join(format!("{}.manifest.json", self.command)));
        write_atomic(&path, &serde_json::to_vec_pretty(&m)?)?;
        Ok(path)
    }
}

/// One line of the synth data manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub size: usize,
    pub dsm: PathBuf,
    pub dtm: PathBuf,
    pub gt_ground: PathBuf,
    pub nonground_fraction: f64,
    pub building_pixels: usize,
    pub tree_pixels: usize,
    pub max_residual: f64,
}

pub const DATA_MANIFEST: &str = "manifest.jsonl";

/// Scene `i` uses seed `seed * 1_000_003 + i`; validation scenes follow the
/// training scenes in the same sequence.
fn cmd_synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    if a.count + a.val == 0 {
        return Err(Error::InvalidArgument("nothing to generate".into()));
    }
    fs::create_dir_all(&a.out)?;
    let mut lines = String::new();
    for i in 0..a.count + a.val {
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = generate(&SceneSpec::randomized(seed, a.size))?;
        let id = format!("scene_{i:05}");
        let split = if i < a.count { "train" } else { "val" };
        let files = ["dsm", "dtm", "gt"].map(|k| format!("{id}_{k}.fgrid"));
        run.write_grid(a.out.join(&files[0]), &scene.dsm)?;
        run.write_grid(a.out.join(&files[1]), &scene.dtm)?;
        run.write_grid(a.out.join(&files[2]), &scene.gt_ground.to_grid())?;
        let rec = SceneRecord {
            id,
            split: split.into(),
            seed,
            size: a.size,
            dsm: files[0].clone().into(),
            dtm: files[1].clone().into(),
            gt_ground: files[2].clone().into(),
            nonground_fraction: scene.stats.nonground_fraction,
            building_pixels: scene.stats.building_pixels,
            tree_pixels: scene.stats.tree_pixels,
            max_residual: scene.stats.max_residual,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    run.write_bytes(a.out.join(DATA_MANIFEST), lines.as_bytes())?;
    run.config = serde_json::json!({ "size": a.size, "count": a.count, "val": a.val });
    println!("wrote {} scenes to {}", a.count + a.val, a.out.display());
    Ok(())
}

/// Read a data manifest. Without explicit validation records the last
/// sixth of the scenes (at least one) is held out.
pub fn read_data_manifest(path: &Path) -> Result<(Vec<Example>, Vec<Example>)> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Config {
            line: i + 1,
            message: e.to_string(),
        })?;
        let ex = Example::new(fgrid::read(dir.join(&rec.dsm))?, fgrid::read(dir.join(&rec.dtm))?)?;
        if rec.split == "val" {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    if val.is_empty() && train.len() > 1 {
        let k = (train.len() / 6).max(1);
        val = train.split_off(train.len() - k);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} needs at least two scenes",
            path.display()
        )));
    }
    Ok((train, val))
}

pub const NORM_FILE: &str = "norm.json";

fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    run.input(&a.data)?;
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = a.lr {
        flags.push(("lr", v.to_string()));
    }
    if let Some(v) = a.max_steps {
        flags.push(("max_steps", v.to_string()));
    }
    if let Some(v) = a.batch_size {
        flags.push(("batch_size", v.to_string()));
    }
    if let Some(v) = a.seed {
        flags.push(("seed", v.to_string()));
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k, v.to_string()));
    }
    let cfg = resolve_config(a.config.as_deref(), &flags)?;
    run.seed = cfg.seed;
    run.config = serde_json::to_value(&cfg)?;
    let (train, val) = read_data_manifest(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let norm = norm_mode(cfg.norm, &train)?;
    run.write_bytes(a.out.join(NORM_FILE), &serde_json::to_vec_pretty(&norm)?)?;
    let model = DenoiserModel::<f32>::new(cfg.arch.clone(), cfg.seed)?;
    info!("training {} parameters on {} scenes", model.param_count(), train.len());
    let out = fit(model, &train, &val, &cfg, Some(&a.out))?;
    run.outputs.push(a.out.join("best.fckp"));
    run.outputs.push(a.out.join("last.fckp"));
    run.write_bytes(a.out.join("train_log.csv"), log_csv(&out.log).as_bytes())?;
    let mut vcsv = String::from("step,val_rmse\n");
    for v in &out.validation {
        vcsv.push_str(&format!("{},{:.6}\n", v.step, v.rmse));
    }
    run.write_bytes(a.out.join("val_log.csv"), vcsv.as_bytes())?;
    println!(
        "trained {} steps; best val rmse {:.4} at step {}",
        out.steps, out.best_rmse, out.best_step
    );
    Ok(())
}

fn load_model(run: &mut Run, ckpt: &Path) -> Result<(DenoiserModel, NormMode)> {
    run.input(ckpt)?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let side = ckpt.parent().unwrap_or(Path::new(".")).join(NORM_FILE);
    let norm = if side.exists() {
        run.inputs.push(side.clone());
        serde_json::from_slice(&fs::read(&side)?)?
    } else {
        NormMode::MinMax
    };
    Ok((model, norm))
}

fn model_schedule(model: &DenoiserModel) -> Result<crate::schedule::DiffusionSchedule> {
    make_schedule(ScheduleKind::CosineBeta, model.arch().timesteps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
}

fn cmd_infer(a: &InferArgs, run: &mut Run) -> Result<()> {
    let dsm = run.grid(&a.dsm)?;
    let (model, norm) = load_model(run, &a.ckpt)?;
    let sched = model_schedule(&model)?;
    let steps = a.steps.unwrap_or(sched.steps());
    run.config = serde_json::json!({ "init": a.init.to_string(), "steps": steps, "norm": norm });
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let out = sample(&sched, &model, &dsm, &norm, &a.init.into(), steps, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    run.write_grid(a.out.join("dtm.fgrid"), &out.dtm)?;
    run.write_grid(a.out.join("ground_prob.fgrid"), &out.ground_prob)?;
    if a.preview {
        run.write_bytes(a.out.join("dtm.pgm"), &fgrid::encode_pgm(&out.dtm))?;
        run.write_bytes(a.out.join("ground_prob.pgm"), &fgrid::encode_pgm(&out.ground_prob))?;
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("--size expects WxH, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn cmd_stitch(a: &StitchArgs, run: &mut Run) -> Result<()> {
    if a.estimate_only {
        let (w, h) = match (&a.dsm, &a.size) {
            (_, Some(s)) => parse_size(s)?,
            (Some(p), None) => {
                let g = run.grid(p)?;
                (g.width(), g.height())
            }
            (None, None) => return Err(Error::InvalidArgument("--estimate-only needs --dsm or --size".into())),
        };
        let steps = a.steps.unwrap_or(DEFAULT_STEPS);
        let secs = estimate_runtime(w, h, a.tile, a.stride, steps, a.step_seconds)?;
        run.config = serde_json::json!({ "width": w, "height": h, "tile": a.tile, "stride": a.stride, "steps": steps });
        println!("{secs:.1} s");
        return Ok(());
    }
    let (Some(dsm_path), Some(ckpt)) = (&a.dsm, &a.ckpt) else {
        return Err(Error::InvalidArgument("stitch needs --dsm and --ckpt".into()));
    };
    let dsm = run.grid(dsm_path)?;
    let (model, norm) = load_model(run, ckpt)?;
    let sched = model_schedule(&model)?;
    let cfg = StitchConfig {
        tile: a.tile,
        stride: a.stride,
        blend: a.blend,
        use_prior: !a.no_prior,
        steps: a.steps.unwrap_or(sched.steps()),
        seed: a.seed,
    };
    run.config = serde_json::to_value(&cfg)?;
    let out = stitch(&sched, &model, &dsm, &norm, &cfg)?;
    fs::create_dir_all(&a.out)?;
    run.write_grid(a.out.join("dtm.fgrid"), &out.dtm)?;
    run.write_grid(a.out.join("ground_prob.fgrid"), &out.ground_prob)?;
    if let Some(p) = &out.prior {
        run.write_grid(a.out.join("prior.fgrid"), p)?;
    }
    if a.preview {
        run.write_bytes(a.out.join("dtm.pgm"), &fgrid::encode_pgm(&out.dtm))?;
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<f64> = match line.split(',').map(|v| v.trim().parse::<f64>()).collect() {
            Ok(f) => f,
            // A header row.
            Err(_) if pts.is_empty() && i == 0 => continue,
            Err(e) => {
                return Err(Error::Config {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        };
        if f.len() != 3 {
            return Err(Error::Config {
                line: i + 1,
                message: "expected x,y,z".into(),
            });
        }
        pts.push((f[0], f[1], f[2]));
    }
    Ok(pts)
}

fn cmd_eval(a: &EvalArgs, run: &mut Run) -> Result<()> {
    let pred = run.grid(&a.pred)?;
    let truth = run.grid(&a.truth)?;
    let m = pred.validity().and(&truth.validity())?;
    let (rmse, mae) = regression_metrics(&pred, &truth, &m)?;
    let mut report = MetricsReport {
        rmse,
        mae,
        mad: mad(&pred)?,
        ..Default::default()
    };
    if let (Some(pp), Some(gp)) = (&a.prob, &a.gt_mask) {
        let prob = run.grid(pp)?;
        let gt = run.grid(gp)?;
        let gt_mask = Mask::from_fn(gt.width(), gt.height(), |r, c| gt.get(r, c) >= 0.5);
        let m2 = m.and(&prob.validity())?;
        let ce = classification_errors(&prob, &gt_mask, &m2, a.threshold)?;
        report.e_t1 = ce.e_t1;
        report.e_t2 = ce.e_t2;
        report.e_tot = ce.e_tot;
        report.e_sum = ce.e_sum;
    }
    if let Some(pp) = &a.points {
        run.input(pp)?;
        let r = med(&pred, &read_points(pp)?)?;
        if r.skipped > 0 {
            warn!("{} points outside the raster were skipped", r.skipped);
        }
        report.med = Some(r.med);
    }
    let csv = format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row());
    print!("{csv}");
    run.write_bytes(a.out.clone(), csv.as_bytes())?;
    if let Some(ep) = &a.error_grid {
        let err = pred.zip_map(&truth, |p, t| p - t)?;
        run.write_grid(ep.clone(), &err)?;
    }
    run.config = serde_json::json!({ "threshold": a.threshold });
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, run: &mut Run) -> Result<()> {
    let axes = if a.axis.is_empty() { Axis::ALL.to_vec() } else { a.axis.clone() };
    let base = resolve_config(a.config.as_deref(), &[])?;
    let seed = std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(a.seed);
    run.seed = seed;
    fs::create_dir_all(&a.out)?;
    let mut cache = ModelCache::new();
    let mut corpus: Option<(Vec<Example>, Vec<Example>)> = None;
    for axis in axes {
        let mut spec = AblationSpec::new(axis, seed, a.budget);
        spec.base = base.clone();
        spec.train_scenes = a.train_scenes;
        spec.val_scenes = a.val_scenes;
        spec.scene_size = base.patch;
        if corpus.is_none() {
            corpus = Some(desk_corpus(seed, spec.train_scenes, spec.val_scenes, spec.scene_size)?);
        }
        let (train, val) = corpus.as_ref().expect("built above");
        let rows = run_ablation_with(&spec, train, val, &mut cache)?;
        let csv = rows_csv(&rows);
        print!("{csv}");
        run.write_bytes(a.out.join(format!("{axis}.csv")), csv.as_bytes())?;
    }
    run.config = serde_json::json!({ "budget": a.budget, "base": base });
    Ok(())
}

fn cmd_schedule(a: &ScheduleArgs, run: &mut Run) -> Result<()> {
    let kind: ScheduleKind = serde_json::from_value(Value::String(a.kind.clone()))
        .map_err(|_| Error::InvalidArgument(format!("unknown schedule kind {:?}", a.kind)))?;
    let sched = make_schedule(kind, a.timesteps, a.beta_min, a.beta_max)?;
    let csv = sched.to_csv();
    run.config = serde_json::json!({ "timesteps": a.timesteps, "beta_min": a.beta_min, "beta_max": a.beta_max, "kind": kind });
    match &a.out {
        Some(p) => run.write_bytes(p.clone(), csv.as_bytes())?,
        None => {
            io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}

/// Map an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::PadOrResize(_) | Error::InvalidArgument(_) | Error::Config { .. } | Error::TileTooLarge(_) => {
            EXIT_USAGE
        }
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => EXIT_NO_INPUT,
        Error::Divergence(_) => EXIT_SOFTWARE,
        Error::Tile { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let (mut run, result) = match &cli.command {
        Command::Synth(a) => {
            let mut r = Run::new("synth", a.seed, &a.out);
            let res = cmd_synth(a, &mut r);
            (r, res)
        }
        Command::Train(a) => {
            let mut r = Run::new("train", 0, &a.out);
            let res = cmd_train(a, &mut r);
            (r, res)
        }
        Command::Infer(a) => {
            let mut r = Run::new("infer", a.seed, &a.out);
            let res = cmd_infer(a, &mut r);
            (r, res)
        }
        Command::Stitch(a) => {
            let mut r = Run::new("stitch", a.seed, &a.out);
            let res = cmd_stitch(a, &mut r);
            (r, res)
        }
        Command::Eval(a) => {
            let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut r = Run::new("eval", 0, if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir });
            let res = cmd_eval(a, &mut r);
            (r, res)
        }
        Command::Ablate(a) => {
            let mut r = Run::new("ablate", a.seed, &a.out);
            let res = cmd_ablate(a, &mut r);
            (r, res)
        }
        Command::ScheduleDump(a) => {
            let dir = a
                .out
                .as_ref()
                .and_then(|p| p.parent())
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let mut r = Run::new("schedule-dump", 0, dir);
            let res = cmd_schedule(a, &mut r);
            (r, res)
        }
    };
    result?;
    if !run.manifest_dir.exists() {
        run.manifest_dir = PathBuf::from(".");
    }
    run.finish(argv, started, cli.manifest.as_deref())?;
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

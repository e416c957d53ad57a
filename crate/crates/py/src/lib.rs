//! Python bindings. Grids cross the boundary as flat row-major float lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use terraindiff::ablation::desk_corpus;
use terraindiff::cli::apply_key;
use terraindiff::denoiser::{checkpoint, gated_predict, ArchSpec, DenoiserModel};
use terraindiff::metrics;
use terraindiff::priostitch::{self, BlendMode, StitchConfig};
use terraindiff::raster::{fgrid, Grid, NormMode};
use terraindiff::sampler::{self, InitKind};
use terraindiff::schedule::{make_schedule, DiffusionSchedule, ScheduleKind, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use terraindiff::synth::{generate, SceneSpec};
use terraindiff::trainer::{fit, TrainConfig};
use terraindiff::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parsed<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "Grid", module = "pyterraindiff", from_py_object)]
#[derive(Clone)]
pub struct PyGrid {
    inner: Grid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (width, height, values, pixel_size = 1.0, origin = (0.0, 0.0)))]
    fn new(width: usize, height: usize, values: Vec<f64>, pixel_size: f64, origin: (f64, f64)) -> PyResult<Self> {
        let inner = Grid::with_georef(width, height, pixel_size, origin, values).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: fgrid::read(path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        fgrid::write(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn pixel_size(&self) -> f64 {
        self.inner.pixel_size()
    }

    /// Row-major values; nodata is NaN.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(row, col))
    }

    fn __repr__(&self) -> String {
        format!("Grid({}x{}, pixel_size={})", self.inner.width(), self.inner.height(), self.inner.pixel_size())
    }
}

fn wrap(g: Grid) -> PyGrid {
    PyGrid { inner: g }
}

#[pyclass(name = "Schedule", module = "pyterraindiff")]
pub struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (timesteps = 10, beta_min = DEFAULT_BETA_MIN, beta_max = DEFAULT_BETA_MAX))]
    fn new(timesteps: usize, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(Self {
            inner: make_schedule(ScheduleKind::CosineBeta, timesteps, beta_min, beta_max).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_betas(betas: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DiffusionSchedule::from_betas(betas).map_err(py_err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    /// `alpha_bar(0..=T)`, starting with 1.
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// `(pred, current, variance)` of the reverse step at `t`.
    fn posterior(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        let p = self.inner.posterior(t).map_err(py_err)?;
        Ok((p.pred, p.current, p.variance))
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

#[pyclass(name = "Model", module = "pyterraindiff")]
pub struct PyModel {
    inner: DenoiserModel,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model with default settings for unlisted fields.
    #[new]
    #[pyo3(signature = (seed = 0, base_channels = 16, depth = 2, attention = false, timesteps = 10))]
    fn new(seed: u64, base_channels: usize, depth: usize, attention: bool, timesteps: usize) -> PyResult<Self> {
        let arch = ArchSpec {
            base_channels,
            depth,
            use_bottleneck_attention: attention,
            timesteps,
            ..ArchSpec::default()
        };
        Ok(Self {
            inner: DenoiserModel::new(arch, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.arch().timesteps
    }

    /// One gated denoiser call on normalized inputs: `(g_hat, ground_prob)`.
    fn predict(&self, g_t: &PyGrid, s: &PyGrid, t: usize) -> PyResult<(PyGrid, PyGrid)> {
        let (g, l) = gated_predict(&self.inner, &g_t.inner, &s.inner, t).map_err(py_err)?;
        Ok((wrap(g), wrap(l.map(terraindiff::denoiser::gate::sigmoid))))
    }
}

fn schedule_for(model: &DenoiserModel) -> PyResult<DiffusionSchedule> {
    make_schedule(ScheduleKind::CosineBeta, model.arch().timesteps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).map_err(py_err)
}

/// Synthetic `(dsm, dtm, ground_mask)` with the mask as 0/1 floats.
#[pyfunction]
#[pyo3(signature = (seed, size = 64))]
fn synth_scene(seed: u64, size: usize) -> PyResult<(PyGrid, PyGrid, PyGrid)> {
    let s = generate(&SceneSpec::randomized(seed, size)).map_err(py_err)?;
    Ok((wrap(s.dsm), wrap(s.dtm), wrap(s.gt_ground.to_grid())))
}

/// Reverse sampling: `(dtm, ground_prob)` in meters.
#[pyfunction]
#[pyo3(signature = (model, dsm, init = "noisy-dsm", steps = None, seed = 0))]
fn sample(py: Python<'_>, model: &PyModel, dsm: &PyGrid, init: &str, steps: Option<usize>, seed: u64) -> PyResult<(PyGrid, PyGrid)> {
    let init: InitKind = parsed(init)?;
    let sched = schedule_for(&model.inner)?;
    let steps = steps.unwrap_or(sched.steps());
    let out = py
        .detach(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sampler::sample(&sched, &model.inner, &dsm.inner, &NormMode::MinMax, &init.into(), steps, &mut rng)
        })
        .map_err(py_err)?;
    Ok((wrap(out.dtm), wrap(out.ground_prob)))
}

/// Tiled inference: `(dtm, ground_prob)`.
#[pyfunction]
#[pyo3(signature = (model, dsm, tile = 64, stride = 32, blend = "min", use_prior = true, steps = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn stitch(
    py: Python<'_>,
    model: &PyModel,
    dsm: &PyGrid,
    tile: usize,
    stride: usize,
    blend: &str,
    use_prior: bool,
    steps: Option<usize>,
    seed: u64,
) -> PyResult<(PyGrid, PyGrid)> {
    let blend: BlendMode = parsed(blend)?;
    let sched = schedule_for(&model.inner)?;
    let cfg = StitchConfig {
        tile,
        stride,
        blend,
        use_prior,
        steps: steps.unwrap_or(sched.steps()),
        seed,
    };
    let out = py
        .detach(|| priostitch::stitch(&sched, &model.inner, &dsm.inner, &NormMode::MinMax, &cfg))
        .map_err(py_err)?;
    Ok((wrap(out.dtm), wrap(out.ground_prob)))
}

#[pyfunction]
#[pyo3(signature = (width, height, tile, stride, steps = 10, step_seconds = priostitch::DEFAULT_STEP_SECONDS))]
fn estimate_runtime(width: usize, height: usize, tile: usize, stride: usize, steps: usize, step_seconds: f64) -> PyResult<f64> {
    priostitch::estimate_runtime(width, height, tile, stride, steps, step_seconds).map_err(py_err)
}

/// `(rmse, mae)` over pixels finite in both grids.
#[pyfunction]
fn regression_metrics(pred: &PyGrid, truth: &PyGrid) -> PyResult<(f64, f64)> {
    let m = pred.inner.validity().and(&truth.inner.validity()).map_err(py_err)?;
    metrics::regression_metrics(&pred.inner, &truth.inner, &m).map_err(py_err)
}

#[pyfunction]
fn mad(grid: &PyGrid) -> PyResult<f64> {
    metrics::mad(&grid.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (grid, iterations = 20, factor = 0.5))]
fn laplacian_smooth(grid: &PyGrid, iterations: usize, factor: f64) -> PyGrid {
    wrap(metrics::laplacian_smooth(&grid.inner, iterations, factor))
}

/// Train on a fresh synthetic corpus. `config` holds the same `key=value`
/// pairs the CLI config file accepts. Returns `(model, best_val_rmse)`.
#[pyfunction]
#[pyo3(signature = (config = None, seed = 0, train_scenes = 200, val_scenes = 40))]
fn train_synthetic(
    py: Python<'_>,
    config: Option<Vec<(String, String)>>,
    seed: u64,
    train_scenes: usize,
    val_scenes: usize,
) -> PyResult<(PyModel, f64)> {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    for (i, (k, v)) in config.unwrap_or_default().iter().enumerate() {
        apply_key(&mut cfg, k, v, i + 1).map_err(py_err)?;
    }
    let out = py
        .detach(|| {
            let (train, val) = desk_corpus(seed, train_scenes, val_scenes, cfg.patch)?;
            let model = DenoiserModel::new(cfg.arch.clone(), cfg.seed)?;
            fit(model, &train, &val, &cfg, None)
        })
        .map_err(py_err)?;
    Ok((PyModel { inner: out.best }, out.best_rmse))
}

#[pymodule]
fn pyterraindiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(stitch, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_runtime, m)?)?;
    m.add_function(wrap_pyfunction!(regression_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mad, m)?)?;
    m.add_function(wrap_pyfunction!(laplacian_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    Ok(())
}

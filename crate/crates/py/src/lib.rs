//! Python bindings: configs, datasets, priors, fields and metrics.

use std::path::PathBuf;

use echofield_core::checkpoint::{Checkpoint, Persist};
use echofield_core::config::RunConfig;
use echofield_core::dataset::{load_dataset, write_dataset};
use echofield_core::eval::{evaluate_field, ms_ssim as core_ms_ssim, psnr as core_psnr, ssim as core_ssim};
use echofield_core::field::FieldState;
use echofield_core::geometry::SceneTransform;
use echofield_core::phantom::{build_phantom, procedural_shapes, simulate_sweep, PhantomSpec};
use echofield_core::prior::{finetune_lora, train_base, AdaptedDenoiser, DenoiserState, NoisePredictor, NoiseSchedule};
use echofield_core::render::{render_frame_path, RenderPath};
use echofield_core::train::{read_scene, LossReport, PriorRef, Trainer};
use echofield_core::{Error, GrayImage, Point3, SweepDataset};
use pyo3::exceptions::{PyException, PyIndexError, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pyo3::create_exception!(echofield, EchofieldError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => EchofieldError::new_err(format!("[{}] {e}", e.kind())),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for echofield_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn image_rows(img: &GrayImage) -> Vec<Vec<f32>> {
    img.data.chunks(img.width).map(<[f32]>::to_vec).collect()
}

fn image_from_rows(rows: Vec<Vec<f32>>) -> PyResult<GrayImage> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(EchofieldError::new_err("image rows have different lengths"));
    }
    GrayImage::from_vec(h, w, rows.concat()).py_err()
}

/// Key/value run configuration, as read by the command-line tool.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse(t).py_err()?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::load(&path).py_err()? })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        self.inner.set(key, &text).py_err()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| EchofieldError::new_err(format!("unknown config key {key}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py_err()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

/// Rigid probe pose.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
pub struct PyPose {
    inner: echofield_core::Pose,
}

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (rotation = None, translation = (0.0, 0.0, 0.0)))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: (f64, f64, f64)) -> PyResult<Self> {
        let t = Point3::new(translation.0, translation.1, translation.2);
        let r = rotation.unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let inner = echofield_core::Pose::from_rotation_translation(r, t);
        inner.validate().py_err()?;
        Ok(PyPose { inner })
    }

    #[staticmethod]
    fn from_axis_angle(axis: (f64, f64, f64), angle: f64, translation: (f64, f64, f64)) -> PyResult<Self> {
        let a = Point3::new(axis.0, axis.1, axis.2);
        if !(a.norm() > 0.0) {
            return Err(EchofieldError::new_err("rotation axis must be non-zero"));
        }
        let t = Point3::new(translation.0, translation.1, translation.2);
        Ok(PyPose { inner: echofield_core::Pose::from_axis_angle(a.normalized(), angle, t) })
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        self.inner.rotation()
    }

    #[getter]
    fn translation(&self) -> (f64, f64, f64) {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    #[getter]
    fn matrix(&self) -> Vec<f64> {
        self.inner.matrix.to_vec()
    }

    fn interpolate(&self, other: &PyPose, s: f64) -> PyPose {
        PyPose { inner: self.inner.interpolate(&other.inner, s) }
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!("Pose(translation=({}, {}, {}))", t.x, t.y, t.z)
    }
}

/// A tracked B-mode sweep with its train/test split.
#[pyclass(name = "Dataset")]
pub struct PyDataset {
    inner: SweepDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: load_dataset(path).py_err()? })
    }

    /// Simulates a sweep over a phantom; the desk phantom unless `spec_json` is given.
    #[staticmethod]
    #[pyo3(signature = (config, spec_json = None))]
    fn simulate(py: Python<'_>, config: &PyConfig, spec_json: Option<&str>) -> PyResult<Self> {
        let cfg = &config.inner;
        cfg.validate().py_err()?;
        let spec = match spec_json {
            Some(s) => PhantomSpec::from_json(s).py_err()?,
            None => PhantomSpec::desk(cfg.seed),
        };
        let inner = py.detach(|| -> echofield_core::Result<SweepDataset> {
            let volume = build_phantom(&spec)?;
            let poses = cfg.trajectory().poses()?;
            simulate_sweep(&volume, &poses, &cfg.probe(), &cfg.render(), cfg.seed)
        });
        Ok(PyDataset { inner: inner.py_err()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<Vec<PathBuf>> {
        write_dataset(&self.inner, path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }

    fn frame(&self, index: usize) -> PyResult<Vec<Vec<f32>>> {
        let f = self.inner.frames.get(index).ok_or_else(|| PyIndexError::new_err("frame index out of range"))?;
        Ok(image_rows(&f.image))
    }

    fn pose(&self, index: usize) -> PyResult<PyPose> {
        let f = self.inner.frames.get(index).ok_or_else(|| PyIndexError::new_err("frame index out of range"))?;
        Ok(PyPose { inner: f.pose })
    }

    #[getter]
    fn train_indices(&self) -> Vec<usize> {
        self.inner.split.train.clone()
    }

    #[getter]
    fn test_indices(&self) -> Vec<usize> {
        self.inner.split.test.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.probe.n_samples, self.inner.probe.n_scanlines)
    }

    /// Drops every `every`-th training frame.
    fn sparse_view(&self, every: usize) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: self.inner.sparse_view(every).py_err()? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(frames={}, train={}, test={})",
            self.inner.frames.len(),
            self.inner.split.train.len(),
            self.inner.split.test.len()
        )
    }
}

enum PriorModel {
    Base(DenoiserState<f32>),
    Adapted(AdaptedDenoiser<f32>),
}

/// Voxel diffusion prior, optionally with a low-rank adapter.
#[pyclass(name = "Prior")]
pub struct PyPrior {
    model: PriorModel,
    schedule: NoiseSchedule,
}

impl PyPrior {
    fn predictor(&self) -> &dyn NoisePredictor {
        match &self.model {
            PriorModel::Base(b) => b,
            PriorModel::Adapted(a) => a,
        }
    }

    fn base(&self) -> &DenoiserState<f32> {
        match &self.model {
            PriorModel::Base(b) => b,
            PriorModel::Adapted(a) => &a.base,
        }
    }
}

#[pymethods]
impl PyPrior {
    /// Trains a base denoiser on procedural shapes. Returns the prior and its loss curve.
    #[staticmethod]
    #[pyo3(signature = (config, steps = None))]
    fn train(py: Python<'_>, config: &PyConfig, steps: Option<usize>) -> PyResult<(PyPrior, Vec<f64>)> {
        let cfg = &config.inner;
        cfg.validate().py_err()?;
        let schedule = cfg.schedule().py_err()?;
        let steps = steps.unwrap_or(cfg.prior_train_steps);
        let (state, losses) = py
            .detach(|| {
                let data = procedural_shapes(cfg.prior_train_patches, cfg.seed);
                train_base(&data, &schedule, cfg.denoiser(), steps, &cfg.prior_train())
            })
            .py_err()?;
        Ok((PyPrior { model: PriorModel::Base(state), schedule }, losses))
    }

    #[staticmethod]
    #[pyo3(signature = (base, adapter = None))]
    fn load(base: PathBuf, adapter: Option<PathBuf>) -> PyResult<Self> {
        let c = Checkpoint::load(&base).py_err()?;
        let state = DenoiserState::<f32>::read_from(&c, "").py_err()?;
        let steps: usize = c.meta_parse("prior/schedule_steps").unwrap_or(RunConfig::default().prior_schedule_steps);
        let schedule = NoiseSchedule::scaled_linear(steps).py_err()?;
        let model = match adapter {
            Some(p) => PriorModel::Adapted(AdaptedDenoiser::from_parts(state, &Checkpoint::load(p).py_err()?).py_err()?),
            None => PriorModel::Base(state),
        };
        Ok(PyPrior { model, schedule })
    }

    /// Fits a low-rank adapter to patches of the desk phantom. The base weights are untouched.
    #[pyo3(signature = (config, steps = None))]
    fn finetune(&self, py: Python<'_>, config: &PyConfig, steps: Option<usize>) -> PyResult<(PyPrior, Vec<f64>)> {
        let cfg = &config.inner;
        cfg.validate().py_err()?;
        let steps = steps.unwrap_or(cfg.prior_finetune_steps);
        let base = self.base();
        let schedule = &self.schedule;
        let (model, losses) = py
            .detach(|| {
                let spec = PhantomSpec::desk(cfg.seed);
                let data = echofield_core::cli::phantom_patches(
                    &spec,
                    cfg.prior_finetune_patches,
                    (cfg.prior_patch_size_min, cfg.prior_patch_size_max),
                    cfg.seed,
                )?;
                finetune_lora(base, &data, schedule, steps, cfg.prior_rank, cfg.prior_delta, &cfg.prior_finetune())
            })
            .py_err()?;
        Ok((PyPrior { model: PriorModel::Adapted(model), schedule: self.schedule.clone() }, losses))
    }

    /// Writes `prior.ckpt`, plus `adapter.ckpt` when adapted.
    fn save(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        std::fs::create_dir_all(&dir).map_err(|e| err(e.into()))?;
        let mut c = Checkpoint::new();
        self.base().write_into(&mut c, "");
        c.set_meta("prior/schedule_steps", self.schedule.steps());
        let mut out = vec![c.save(dir.join("prior.ckpt")).py_err()?];
        if let PriorModel::Adapted(a) = &self.model {
            out.push(a.adapter_checkpoint().save(dir.join("adapter.ckpt")).py_err()?);
        }
        Ok(out)
    }

    #[getter]
    fn is_adapted(&self) -> bool {
        matches!(self.model, PriorModel::Adapted(_))
    }

    #[getter]
    fn schedule_steps(&self) -> usize {
        self.schedule.steps()
    }

    fn __repr__(&self) -> String {
        format!("Prior(adapted={}, T={})", self.is_adapted(), self.schedule.steps())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("photometric", r.photometric)?;
    d.set_item("loss_border", r.border)?;
    d.set_item("loss_scatter", r.scatter)?;
    d.set_item("total", r.total)?;
    d.set_item("lr", r.lr)?;
    Ok(d)
}

/// A trained parameter field.
#[pyclass(name = "Field")]
pub struct PyField {
    checkpoint: Checkpoint,
    state: FieldState<f32>,
    scene: SceneTransform,
    path: RenderPath,
    history: Vec<LossReport>,
}

impl PyField {
    fn from_checkpoint(checkpoint: Checkpoint, history: Vec<LossReport>) -> echofield_core::Result<Self> {
        let state = FieldState::<f32>::read_from(&checkpoint, "")?;
        let scene = read_scene(&checkpoint)?;
        let path = match checkpoint.meta("train/path")? {
            "standard" => RenderPath::Standard,
            _ => RenderPath::Ultrasound,
        };
        Ok(PyField { checkpoint, state, scene, path, history })
    }
}

#[pymethods]
impl PyField {
    /// Optimises a field on the dataset's training frames.
    #[staticmethod]
    #[pyo3(signature = (dataset, config, prior = None))]
    fn train(py: Python<'_>, dataset: &PyDataset, config: &PyConfig, prior: Option<&PyPrior>) -> PyResult<Self> {
        let cfg = &config.inner;
        cfg.validate().py_err()?;
        let tc = cfg.train();
        let ds = &dataset.inner;
        let field = py.detach(|| -> echofield_core::Result<PyField> {
            let prior = prior.map(|p| PriorRef { model: p.predictor(), schedule: &p.schedule });
            let mut t = Trainer::new(ds, prior, &tc)?;
            t.run(None)?;
            PyField::from_checkpoint(t.checkpoint(), t.history.clone())
        });
        field.py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).py_err()?;
        PyField::from_checkpoint(c, Vec::new()).py_err()
    }

    /// Writes a checkpoint readable by `echofield render` and `echofield eval`.
    fn save(&self, path: PathBuf) -> PyResult<PathBuf> {
        self.checkpoint.save(path).py_err()
    }

    /// Loss rows of the run that produced this field (empty after `load`).
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history.iter().map(|r| report_dict(py, r)).collect()
    }

    /// Renders a B-mode frame at `pose`, as rows of depth samples.
    fn render(&self, pose: &PyPose, config: &PyConfig) -> PyResult<Vec<Vec<f32>>> {
        let cfg = &config.inner;
        let probe = self.scene.apply_probe(&cfg.probe());
        let pose = self.scene.apply_pose(&pose.inner);
        let img = render_frame_path(&self.state, &pose, &probe, &cfg.render(), cfg.seed, self.path).py_err()?;
        Ok(image_rows(&img))
    }

    /// Test-split PSNR / SSIM / MS-SSIM report, as a dict.
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, config: &PyConfig) -> PyResult<Py<PyAny>> {
        let cfg = &config.inner;
        let ds = self.scene.apply_dataset(&dataset.inner);
        let report = py
            .detach(|| evaluate_field(&self.state, &ds, &cfg.render(), self.path, cfg.seed, cfg.eval_ms_ssim_scales, None))
            .py_err()?;
        Ok(py.import("json")?.call_method1("loads", (report.to_json(),))?.unbind())
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.state.n_params()
    }

    fn __repr__(&self) -> String {
        format!("Field(params={}, steps={})", self.state.n_params(), self.history.len())
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>, peak: f64) -> PyResult<f64> {
    core_psnr(&image_from_rows(a)?, &image_from_rows(b)?, peak).py_err()
}

#[pyfunction]
fn ssim(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>) -> PyResult<f64> {
    core_ssim(&image_from_rows(a)?, &image_from_rows(b)?).py_err()
}

#[pyfunction]
#[pyo3(signature = (a, b, scales = 5))]
fn ms_ssim(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>, scales: usize) -> PyResult<f64> {
    core_ms_ssim(&image_from_rows(a)?, &image_from_rows(b)?, scales).py_err()
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("echofield".to_string()).chain(args).collect();
    py.detach(|| echofield_core::cli::run(argv).code)
}

#[pymodule]
pub fn echofield(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EchofieldError", m.py().get_type::<EchofieldError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPrior>()?;
    m.add_class::<PyField>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

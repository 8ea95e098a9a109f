//! Python bindings: data generation, training, sampling, refinement,
//! evaluation and rendering.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use humanscene_core::formats::{self, FormatError, HumansFile, RenderOptions, SceneFile};
use humanscene_core::geometry::{iou2d as core_iou2d, iou3d as core_iou3d, GridSpec, OrientedBox, Vec3};
use humanscene_core::metrics::{self, EvalItem};
use humanscene_core::model::{Model as CoreModel, ModelConfig};
use humanscene_core::pipeline::{self, Conditioning, PipelineError, SampleConfig, TrainConfig};
use humanscene_core::refine::{refine_scene, RefineConfig};
use humanscene_core::scenegen::{self, RoomType, SceneGenConfig, SceneLayout, TrainingSample};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn format_err(e: FormatError) -> PyErr {
    match e {
        FormatError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Diverged { .. } => PyArithmeticError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn json_or_default<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| serde_json::from_str(s).map_err(value_err))
}

type PyBox = ([f64; 3], [f64; 3], f64);

fn to_box((c, h, yaw): PyBox) -> OrientedBox {
    OrientedBox::new(Vec3::new(c[0], c[1], c[2]), Vec3::new(h[0], h[1], h[2]), yaw)
}

fn from_box(b: &OrientedBox) -> PyBox {
    let (c, h) = (b.center, b.half_extents);
    ([c.x, c.y, c.z], [h.x, h.y, h.z], b.yaw)
}

/// Footprint IoU of two boxes given as `(center, half_extents, yaw)`.
#[pyfunction]
fn iou2d(a: PyBox, b: PyBox) -> f64 {
    core_iou2d(&to_box(a), &to_box(b))
}

#[pyfunction]
fn iou3d(a: PyBox, b: PyBox) -> f64 {
    core_iou3d(&to_box(a), &to_box(b))
}

#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: SceneLayout,
    log_likelihoods: Vec<f64>,
    truncated: bool,
}

#[pymethods]
impl Scene {
    #[getter]
    fn room_type(&self) -> &'static str {
        self.inner.room_type.name()
    }

    /// `(category, (center, half_extents, yaw), contact_flag)` per object.
    #[getter]
    fn objects(&self) -> Vec<(String, PyBox, bool)> {
        let cat = self.inner.catalogue();
        self.inner
            .objects
            .iter()
            .map(|o| (cat.categories[o.category].name.to_string(), from_box(&o.bbox), o.contact_flag))
            .collect()
    }

    #[getter]
    fn log_likelihoods(&self) -> Vec<f64> {
        self.log_likelihoods.clone()
    }

    #[getter]
    fn truncated(&self) -> bool {
        self.truncated
    }

    fn __len__(&self) -> usize {
        self.inner.objects.len()
    }

    fn to_json(&self) -> PyResult<String> {
        let file = SceneFile {
            scene: self.inner.clone(),
            truncated: self.truncated,
            log_likelihoods: self.log_likelihoods.clone(),
            seed: None,
            config_hash: None,
        };
        formats::to_json(&file).map_err(format_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let f: SceneFile = formats::from_json(text).map_err(format_err)?;
        Ok(Self { inner: f.scene, log_likelihoods: f.log_likelihoods, truncated: f.truncated })
    }

    /// Top-down SVG; the sample adds free space and humans.
    #[pyo3(signature = (humans=None))]
    fn to_svg(&self, humans: Option<&Sample>) -> String {
        let h = humans.map(|s| HumansFile { contacts: s.inner.contacts.clone(), free: s.inner.free_humans.clone() });
        formats::render_svg(&self.inner, humans.map(|s| &s.inner.free_mask), h.as_ref(), &RenderOptions::default())
    }

    fn __repr__(&self) -> String {
        format!("Scene({}, {} objects)", self.inner.room_type.name(), self.inner.objects.len())
    }
}

/// A generated room with its humans, masks and normalization.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Sample {
    inner: TrainingSample,
}

#[pymethods]
impl Sample {
    #[getter]
    fn scene(&self) -> Scene {
        Scene { inner: self.inner.scene.clone(), log_likelihoods: Vec::new(), truncated: false }
    }

    /// `(kind, (center, half_extents, yaw), host)` per contact human.
    #[getter]
    fn contacts(&self) -> Vec<(String, PyBox, Option<usize>)> {
        self.inner.contacts.iter().map(|c| (format!("{:?}", c.class).to_lowercase(), from_box(&c.bbox), c.host)).collect()
    }

    #[getter]
    fn free_cells(&self) -> usize {
        self.inner.free_mask.count()
    }

    fn to_json(&self) -> PyResult<String> {
        formats::to_json(&self.inner).map_err(format_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: formats::from_json(text).map_err(format_err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample({}, {} objects, {} contacts)",
            self.inner.scene.room_type.name(),
            self.inner.scene.objects.len(),
            self.inner.contacts.len()
        )
    }
}

/// Generate one training sample for `room` ("bedroom", "living", ...).
#[pyfunction]
#[pyo3(signature = (room, seed, grid_cells=72, cell_size=0.1, config_json=None))]
fn generate_sample(room: &str, seed: u64, grid_cells: usize, cell_size: f64, config_json: Option<&str>) -> PyResult<Sample> {
    let room: RoomType = room.parse().map_err(value_err)?;
    let grid = GridSpec::centered(grid_cells, cell_size).map_err(value_err)?;
    let cfg: SceneGenConfig = json_or_default(config_json)?;
    let inner = scenegen::generate_sample(room, seed, &grid, &cfg).map_err(value_err)?;
    Ok(Sample { inner })
}

#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// A fresh model for `room`; `config_json` overrides model fields.
    #[new]
    #[pyo3(signature = (room="bedroom", seed=0, config_json=None))]
    fn new(room: &str, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let room: RoomType = room.parse().map_err(value_err)?;
        let mut value = serde_json::to_value(ModelConfig::for_catalogue(room.catalogue().len())).map_err(value_err)?;
        if let Some(s) = config_json {
            let patch: serde_json::Map<String, serde_json::Value> = serde_json::from_str(s).map_err(value_err)?;
            for (k, v) in patch {
                value[k] = v;
            }
        }
        let cfg: ModelConfig = serde_json::from_value(value).map_err(value_err)?;
        Ok(Self { inner: CoreModel::new(cfg, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = formats::load_checkpoint(&path).map_err(format_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, config_hash=""))]
    fn save(&self, path: PathBuf, config_hash: &str) -> PyResult<()> {
        formats::save_checkpoint(&path, &self.inner, config_hash).map_err(format_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.params.step()
    }

    /// Train until `iterations` total steps; returns the per-iteration loss.
    #[pyo3(signature = (samples, config_json=None))]
    fn train(&mut self, py: Python<'_>, samples: Vec<PyRef<'_, Sample>>, config_json: Option<&str>) -> PyResult<Vec<f64>> {
        let cfg: TrainConfig = json_or_default(config_json)?;
        let data: Vec<TrainingSample> = samples.iter().map(|s| s.inner.clone()).collect();
        let model = &mut self.inner;
        let report = py.detach(|| pipeline::train(model, &data, &cfg, |_| {})).map_err(pipeline_err)?;
        Ok(report.losses)
    }

    /// Mean per-instance NLL over `per_sample` random instances per sample.
    #[pyo3(signature = (samples, per_sample=8, seed=0))]
    fn nll(&self, samples: Vec<PyRef<'_, Sample>>, per_sample: usize, seed: u64) -> PyResult<f64> {
        let data: Vec<TrainingSample> = samples.iter().map(|s| s.inner.clone()).collect();
        pipeline::evaluate_nll(&self.inner, &data, &TrainConfig::default(), per_sample, seed).map_err(pipeline_err)
    }

    /// Sample a scene conditioned on the sample's floor and humans.
    #[pyo3(signature = (sample, seed=0, ablate=false, config_json=None))]
    fn generate(&self, sample: &Sample, seed: u64, ablate: bool, config_json: Option<&str>) -> PyResult<Scene> {
        let cfg: SampleConfig = json_or_default(config_json)?;
        let mut cond = Conditioning::from_sample(&sample.inner);
        if ablate {
            cond = cond.ablated();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = pipeline::sample_scene(&self.inner, &cond, &cfg, &mut rng).map_err(pipeline_err)?;
        Ok(Scene { inner: g.scene, log_likelihoods: g.log_likelihoods, truncated: g.truncated })
    }

    fn __repr__(&self) -> String {
        format!("Model({} parameters, step {})", self.inner.params.num_scalars(), self.inner.params.step())
    }
}

/// Refine a scene against the sample's humans; returns the scene and the loss trace.
#[pyfunction]
#[pyo3(signature = (scene, humans, config_json=None))]
fn refine(scene: &Scene, humans: &Sample, config_json: Option<&str>) -> PyResult<(Scene, Vec<f64>)> {
    let cfg: RefineConfig = json_or_default(config_json)?;
    let r = refine_scene(&scene.inner, &humans.inner.contacts, &humans.inner.free_humans, &cfg).map_err(value_err)?;
    let trace = r.trace.iter().map(|t| t.loss).collect();
    Ok((Scene { inner: r.scene, ..scene.clone() }, trace))
}

/// Metrics of generated scenes, each paired with the sample it was
/// conditioned on, against reference samples. Returns the report as JSON.
#[pyfunction]
fn evaluate(scenes: Vec<PyRef<'_, Scene>>, conditions: Vec<PyRef<'_, Sample>>, references: Vec<PyRef<'_, Sample>>) -> PyResult<String> {
    if scenes.len() != conditions.len() {
        return Err(PyValueError::new_err("scenes and conditions must have the same length"));
    }
    let items: Vec<EvalItem> = scenes
        .iter()
        .zip(&conditions)
        .map(|(s, c)| EvalItem {
            scene: &s.inner,
            confidences: (!s.log_likelihoods.is_empty()).then_some(s.log_likelihoods.as_slice()),
            free_mask: &c.inner.free_mask,
            contacts: &c.inner.contacts,
            reference: Some(&c.inner.scene),
        })
        .collect();
    let refs: Vec<SceneLayout> = references.iter().map(|r| r.inner.scene.clone()).collect();
    let report = metrics::evaluate(&items, &refs).map_err(value_err)?;
    serde_json::to_string(&report).map_err(value_err)
}

#[pymodule]
fn humanscene(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Sample>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(iou2d, m)?)?;
    m.add_function(wrap_pyfunction!(iou3d, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

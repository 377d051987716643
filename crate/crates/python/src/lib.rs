//! Python bindings: models, Grad-CAM, the dataset tools, metrics and the
//! train/evaluate/explain pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use densegrad::augment::{apply_transform, sample_stream, sample_transform, AugmentationPolicy};
use densegrad::data::{
    generate_synthetic as synth, read_split_csv, scan_dataset as scan, stratified_split as split, Placement, Split,
    SplitRatios, SynthOptions, TaskMode,
};
use densegrad::gradcam::{self, GradCamOptions, Heatmap, Signal, Target};
use densegrad::metrics::{self, ConfusionMatrix};
use densegrad::model::{load_checkpoint, save_checkpoint, trainable_param_count};
use densegrad::run::{self, ExplainSettings, RunConfig, TargetSpec};
use densegrad::{DenseNetConfig, Error, Tensor};

create_exception!(_densegrad, DensegradError, PyException);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => PyValueError::new_err(msg),
        Error::LabelOutOfRange { .. } => PyIndexError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => DensegradError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for densegrad::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Flat values plus shape from a NumPy array, or from a flat sequence and an
/// explicit shape.
fn tensor_arg(obj: &Bound<'_, PyAny>, shape: Option<Vec<usize>>) -> PyResult<Tensor<f32>> {
    let (shape, data): (Vec<usize>, Vec<f32>) = match shape {
        Some(shape) => (shape, obj.extract()?),
        None if obj.hasattr("shape")? => (
            obj.getattr("shape")?.extract()?,
            obj.call_method0("ravel")?.call_method0("tolist")?.extract()?,
        ),
        None => return Err(PyValueError::new_err("pass a NumPy array or a flat sequence with `shape`")),
    };
    Tensor::new(shape, data).py()
}

fn rows<'py>(py: Python<'py>, t: &Tensor<f64>) -> PyResult<Bound<'py, PyList>> {
    let w = t.shape()[1];
    PyList::new(py, t.data().chunks(w).map(<[f64]>::to_vec))
}

fn json_value<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = Error>>(text: &str) -> PyResult<T> {
    text.parse().py()
}

/// Trainable parameter count of a preset without allocating it.
#[pyfunction]
#[pyo3(signature = (preset = "densenet201", classes = 18))]
fn param_count(preset: &str, classes: usize) -> PyResult<usize> {
    trainable_param_count(&DenseNetConfig::preset(preset, classes).py()?).py()
}

/// A densely connected classifier held in 32-bit precision.
#[pyclass(module = "densegrad")]
struct Model {
    inner: densegrad::Model<f32>,
    metadata: BTreeMap<String, String>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset = "tiny", classes = 18, seed = 0, resolution = None))]
    fn new(preset: &str, classes: usize, seed: u64, resolution: Option<usize>) -> PyResult<Self> {
        let mut config = DenseNetConfig::preset(preset, classes).py()?;
        if let Some(side) = resolution {
            config = config.with_resolution(side, side);
        }
        Ok(Self {
            inner: densegrad::Model::build(config, seed).py()?,
            metadata: BTreeMap::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint::<f32>(path).py()?;
        Ok(Self {
            inner: ckpt.model,
            metadata: ckpt.metadata,
        })
    }

    /// Writes weights and running statistics; the optimizer state is omitted.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(path, &self.inner, None, &self.metadata).py()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.count_trainable_params()
    }

    #[getter]
    fn last_conv(&self) -> String {
        self.inner.last_conv_name()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.inner.config().input_resolution;
        (c, h, w)
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.metadata.clone()
    }

    /// Eval-mode logits, one row per image of an N×3×H×W batch.
    #[pyo3(signature = (images, shape = None))]
    fn predict(&self, py: Python<'_>, images: &Bound<'_, PyAny>, shape: Option<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let x = tensor_arg(images, shape)?;
        let logits = py.detach(|| self.inner.predict(&x)).py()?;
        Ok(logits.data().chunks(self.num_classes()).map(<[f32]>::to_vec).collect())
    }

    /// Grad-CAM heatmap of one 3×H×W image. `target` defaults to the
    /// predicted class.
    #[pyo3(signature = (image, shape = None, target = None, signal = "logit", layer = None))]
    fn gradcam<'py>(
        &self,
        py: Python<'py>,
        image: &Bound<'py, PyAny>,
        shape: Option<Vec<usize>>,
        target: Option<usize>,
        signal: &str,
        layer: Option<String>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x = tensor_arg(image, shape)?;
        let options = GradCamOptions {
            layer,
            signal: parse::<Signal>(signal)?,
        };
        let target = target.map_or(Target::Predicted, Target::Class);
        let map = py.detach(|| gradcam::explain(&self.inner, &x, target, &options)).py()?;
        heatmap_dict(py, &map)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(classes={}, growth_rate={}, blocks={:?}, params={})",
            c.num_classes,
            c.growth_rate,
            c.block_layout,
            self.inner.count_trainable_params()
        )
    }
}

fn heatmap_dict<'py>(py: Python<'py>, map: &Heatmap) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("values", rows(py, &map.values)?)?;
    d.set_item("raw", rows(py, &map.raw)?)?;
    d.set_item("peak", map.peak)?;
    d.set_item("target", map.target_class)?;
    d.set_item("predicted", map.predicted_class)?;
    d.set_item("layer", &map.source_layer)?;
    d.set_item("is_zero", map.is_zero)?;
    Ok(d)
}

/// Writes the procedural dataset; returns images per class.
#[pyfunction]
#[pyo3(signature = (root, per_class = 50, resolution = 32, seed = 0, placement = "centered"))]
fn generate_synthetic(
    py: Python<'_>,
    root: PathBuf,
    per_class: usize,
    resolution: usize,
    seed: u64,
    placement: &str,
) -> PyResult<BTreeMap<String, usize>> {
    let placement = match placement {
        "centered" => Placement::Centered,
        "quadrant" => Placement::Quadrant,
        other => return Err(PyValueError::new_err(format!("unknown placement `{other}`"))),
    };
    let options = SynthOptions {
        per_class,
        height: resolution,
        width: resolution,
        seed,
        placement,
    };
    let summary = py.detach(|| synth(&root, &options)).py()?;
    Ok(summary.counts.into_iter().map(|(c, n)| (c.folder_name(), n)).collect())
}

/// `(path, class)` for every image under `root`.
#[pyfunction]
fn scan_dataset(root: PathBuf) -> PyResult<Vec<(PathBuf, String)>> {
    let index = scan(&root).py()?;
    Ok(index.records.into_iter().map(|r| (r.path, r.class.folder_name())).collect())
}

/// `(path, class, split)` after a per-class shuffled split of `root`.
#[pyfunction]
#[pyo3(signature = (root, seed = 0, train = 0.6, val = 0.2, test = 0.2))]
fn stratified_split(root: PathBuf, seed: u64, train: f64, val: f64, test: f64) -> PyResult<Vec<(PathBuf, String, String)>> {
    let records = scan(&root).py()?.records;
    let assigned = split(&records, SplitRatios { train, val, test }, seed).py()?;
    Ok(assigned
        .into_iter()
        .map(|r| {
            let s = r.split.map_or("", Split::name).to_string();
            (r.path, r.class.folder_name(), s)
        })
        .collect())
}

/// Rows are true classes, columns predicted classes.
#[pyfunction]
fn confusion(truth: Vec<usize>, predicted: Vec<usize>, classes: usize) -> PyResult<Vec<Vec<u64>>> {
    Ok(metrics::confusion(&truth, &predicted, classes).py()?.rows())
}

#[pyfunction]
fn per_class_prf<'py>(py: Python<'py>, matrix: Vec<Vec<u64>>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = ConfusionMatrix::from_rows(&matrix).py()?;
    metrics::per_class_prf(&m)
        .into_iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("precision", p.precision)?;
            d.set_item("recall", p.recall)?;
            d.set_item("f1", p.f1)?;
            d.set_item("support", p.support)?;
            d.set_item("degenerate", p.is_degenerate())?;
            Ok(d)
        })
        .collect()
}

/// Mann–Whitney AUC; `None` unless both classes occur.
#[pyfunction]
fn binary_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(metrics::binary_auc(&scores, &positive))
}

/// One keyed augmentation of a C×H×W image, returned flat.
#[pyfunction]
#[pyo3(signature = (image, shape = None, seed = 0, epoch = 0, index = 0, policy = "default"))]
fn augment(
    image: &Bound<'_, PyAny>,
    shape: Option<Vec<usize>>,
    seed: u64,
    epoch: u64,
    index: u64,
    policy: &str,
) -> PyResult<Vec<f32>> {
    let x = tensor_arg(image, shape)?;
    let policy = match policy {
        "default" => AugmentationPolicy::default(),
        "none" => AugmentationPolicy::none(),
        other => return Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    };
    let &[_, h, w] = x.shape() else {
        return Err(PyValueError::new_err(format!("expected a C×H×W image, got {:?}", x.shape())));
    };
    let t = sample_transform(&policy, &mut sample_stream(seed, epoch, index), h, w);
    Ok(apply_transform(&x, &t, &policy).py()?.data().to_vec())
}

/// Runs split, training and evaluation from `key = value` settings (the
/// keys of a run configuration file).
#[pyfunction]
#[pyo3(signature = (settings, resume = false))]
fn train_run<'py>(py: Python<'py>, settings: BTreeMap<String, Bound<'py, PyAny>>, resume: bool) -> PyResult<Bound<'py, PyDict>> {
    let pairs: Vec<(String, String)> = settings
        .into_iter()
        .map(|(k, v)| Ok((k, v.str()?.to_string())))
        .collect::<PyResult<_>>()?;
    let config = RunConfig::from_pairs(&pairs).py()?;
    let summary = py.detach(|| run::train_run(&config, resume, None)).py()?;
    let d = PyDict::new(py);
    d.set_item("run_dir", &summary.run_dir)?;
    d.set_item("epochs", summary.history.epochs.len())?;
    d.set_item("best_epoch", summary.history.best_epoch)?;
    d.set_item("stop_reason", summary.history.stop_reason.map(|r| r.to_string()))?;
    d.set_item("eval_split", summary.eval_split.name())?;
    d.set_item("accuracy", summary.metrics.accuracy)?;
    d.set_item("metrics", json_value(py, &summary.metrics.to_json())?)?;
    let projected = PyDict::new(py);
    for (task, report) in &summary.projections {
        projected.set_item(task.cli_name(), report.accuracy)?;
    }
    d.set_item("projections", projected)?;
    Ok(d)
}

/// Metrics of a checkpoint on one split of a split manifest.
#[pyfunction]
#[pyo3(signature = (checkpoint, split_file, split = "test", task = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    split_file: PathBuf,
    split: &str,
    task: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let records = read_split_csv(&split_file).py()?;
    let split = if split == "all" { None } else { Some(parse::<Split>(split)?) };
    let task = task.map(parse::<TaskMode>).transpose()?;
    let report = py
        .detach(|| run::eval_checkpoint(&checkpoint, &records, split, task, None))
        .py()?;
    json_value(py, &report.to_json())
}

/// Heatmap and overlay PNGs for image files plus an index; returns the index
/// rows.
#[pyfunction]
#[pyo3(signature = (checkpoint, inputs, out_dir, target = "predicted", signal = "logit", alpha = 0.5))]
#[allow(clippy::too_many_arguments)]
fn explain_files<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    inputs: Vec<PathBuf>,
    out_dir: PathBuf,
    target: &str,
    signal: &str,
    alpha: f32,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let settings = ExplainSettings {
        target: parse::<TargetSpec>(target)?,
        gradcam: GradCamOptions {
            layer: None,
            signal: parse::<Signal>(signal)?,
        },
        colormap: gradcam::Colormap::Jet,
        alpha,
    };
    let records = py
        .detach(|| run::explain_files(&checkpoint, &inputs, &settings, &out_dir))
        .py()?;
    records
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("input", r.input)?;
            d.set_item("predicted", r.predicted)?;
            d.set_item("target", r.target)?;
            d.set_item("peak", r.peak_row.zip(r.peak_col))?;
            d.set_item("heatmap", r.heatmap)?;
            d.set_item("overlay", r.overlay)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn _densegrad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DensegradError", m.py().get_type::<DensegradError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(scan_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_prf, m)?)?;
    m.add_function(wrap_pyfunction!(binary_auc, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(explain_files, m)?)?;
    Ok(())
}

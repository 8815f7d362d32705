//! Python bindings for psx.

use std::path::PathBuf;

use psx_core::blackbox::{self, ClassProbabilities, ModelClient};
use psx_core::distortion::{self, DistortionSpec};
use psx_core::harness::{self, CorpusSource, ExperimentConfig};
use psx_core::metrics::{self, DistanceKind, KernelConfig, MsssimParams, NlpdParams};
use psx_core::segmentation::{self, SlicParams};
use psx_core::surrogate::{self, AblationMode, InterpretableVector, SurrogateConfig};
use psx_core::{imaging, Error, Model};
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::UnknownClass(_) => PyKeyError::new_err(e.to_string()),
        Error::Parameter(_)
        | Error::Dimension(_)
        | Error::Size(_)
        | Error::Format(_)
        | Error::Comparability(_)
        | Error::Singular(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for psx_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Channel-major float image with values in [0, 1].
#[pyclass(name = "Image", module = "psx", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(imaging::PlanarImage);

#[pymethods]
impl PyImage {
    /// `data` is channel-major: all of channel 0 row by row, then channel 1.
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        imaging::PlanarImage::new(height, width, channels, data)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, channels: usize, value: f64) -> PyResult<Self> {
        imaging::PlanarImage::filled(height, width, channels, value)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        imaging::load_image(path).py().map(Self)
    }

    #[staticmethod]
    #[pyo3(signature = (size=64, seed=0))]
    fn synthetic(size: usize, seed: u64) -> PyResult<Self> {
        harness::synthetic_image(size, seed).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imaging::save_image(&self.0, path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, channel: usize, row: usize, col: usize) -> PyResult<f64> {
        if channel >= self.0.channels() || row >= self.0.height() || col >= self.0.width() {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.0.get(channel, row, col))
    }

    fn grayscale(&self) -> Self {
        Self(imaging::to_grayscale(&self.0))
    }

    /// `spec` is `family:severity`, e.g. `"gaussian_blur:2"`.
    #[pyo3(signature = (spec, seed=0))]
    fn distort(&self, spec: &str, seed: u64) -> PyResult<Self> {
        let spec = DistortionSpec::parse(spec, seed).py()?;
        distortion::apply_distortion(&self.0, &spec).py().map(Self)
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}x{})",
            self.0.height(),
            self.0.width(),
            self.0.channels()
        )
    }
}

#[pyclass(name = "SegmentMap", module = "psx", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySegmentMap(segmentation::SegmentMap);

#[pymethods]
impl PySegmentMap {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u32>) -> PyResult<Self> {
        segmentation::SegmentMap::new(height, width, labels)
            .py()
            .map(Self)
    }

    #[getter]
    fn segment_count(&self) -> usize {
        self.0.segment_count()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    fn sizes(&self) -> Vec<usize> {
        self.0.segment_sizes()
    }

    fn render(&self, image: &PyImage) -> PyResult<PyImage> {
        segmentation::render_segments(&image.0, &self.0)
            .py()
            .map(PyImage)
    }

    fn __repr__(&self) -> String {
        format!(
            "SegmentMap({}x{}, {} segments)",
            self.0.height(),
            self.0.width(),
            self.0.segment_count()
        )
    }
}

#[pyclass(name = "Explanation", module = "psx", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyExplanation(surrogate::Explanation);

#[pymethods]
impl PyExplanation {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        surrogate::Explanation::from_json(s).py().map(Self)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    #[getter]
    fn class_ids(&self) -> Vec<usize> {
        self.0.class_ids.clone()
    }

    #[getter]
    fn intercepts(&self) -> Vec<f64> {
        self.0.intercepts.clone()
    }

    #[getter]
    fn distance(&self) -> &'static str {
        self.0.config.distance.name()
    }

    #[getter]
    fn segment_map(&self) -> PySegmentMap {
        PySegmentMap(self.0.segment_map.clone())
    }

    fn coefficients(&self, class_id: usize) -> PyResult<Vec<f64>> {
        self.0.coefficients_for(class_id).py().map(<[f64]>::to_vec)
    }

    /// Per-pixel importance, row-major.
    fn importance(&self, class_id: usize) -> PyResult<Vec<f64>> {
        psx_core::project_explanation(&self.0, class_id)
            .py()
            .map(|m| m.values().to_vec())
    }

    fn overlay(&self, image: &PyImage, class_id: usize) -> PyResult<PyImage> {
        psx_core::expdist::overlay_image(&image.0, &self.0, class_id)
            .py()
            .map(PyImage)
    }

    fn __repr__(&self) -> String {
        format!(
            "Explanation(classes={:?}, segments={}, distance={})",
            self.0.class_ids,
            self.0.segment_map.segment_count(),
            self.0.config.distance.name()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (image, target_segments=None, compactness=10.0, iterations=10))]
fn slic(
    image: &PyImage,
    target_segments: Option<usize>,
    compactness: f64,
    iterations: usize,
) -> PyResult<PySegmentMap> {
    let (h, w) = image.0.dims();
    let mut params = SlicParams::for_dims(h, w);
    if let Some(n) = target_segments {
        params.target_segments = n;
    }
    params.compactness = compactness;
    params.iterations = iterations;
    segmentation::slic_segment(&image.0, &params)
        .py()
        .map(PySegmentMap)
}

#[pyfunction]
#[pyo3(signature = (d, width=metrics::DEFAULT_KERNEL_WIDTH))]
fn kernel_weight(d: f64, width: f64) -> PyResult<f64> {
    metrics::kernel_weight(d, KernelConfig::new(width).py()?).py()
}

#[pyfunction]
fn cosine_distance(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    metrics::cosine_distance_binary(&InterpretableVector::new(a), &InterpretableVector::new(b)).py()
}

fn gray(img: &PyImage) -> imaging::PlanarImage {
    imaging::to_grayscale(&img.0)
}

/// Similarity in (0, 1] on luminance.
#[pyfunction]
fn msssim(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    metrics::msssim(&gray(reference), &gray(test), &MsssimParams::default()).py()
}

#[pyfunction]
fn msssim_distance(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    metrics::msssim_distance(&gray(reference), &gray(test), &MsssimParams::default()).py()
}

#[pyfunction]
#[pyo3(signature = (reference, test, stages=None, constant=metrics::NLPD_DEFAULT_CONSTANT))]
fn nlpd_distance(
    reference: &PyImage,
    test: &PyImage,
    stages: Option<usize>,
    constant: f64,
) -> PyResult<f64> {
    metrics::nlpd_distance(
        &gray(reference),
        &gray(test),
        &NlpdParams { stages, constant },
    )
    .py()
}

#[pyfunction]
#[pyo3(signature = (image, class_count=10, seed=7))]
fn toy_predict(image: &PyImage, class_count: usize, seed: u64) -> PyResult<Vec<f64>> {
    blackbox::toy_predict(&image.0, class_count, seed)
        .py()
        .map(|p| p.as_slice().to_vec())
}

#[pyfunction]
fn top_k(probs: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    blackbox::top_k(&ClassProbabilities::new(probs).py()?, k).py()
}

/// Explains `classes` (indices, or None for the model's top two) under one
/// or more comma-separated distance kinds; returns one explanation per kind.
#[pyfunction]
#[pyo3(signature = (
    image, segments=None, distance="cosine", classes=None, model="toy", class_count=10, model_seed=7,
    samples=surrogate::DEFAULT_SAMPLE_COUNT, seed=0, width=metrics::DEFAULT_KERNEL_WIDTH,
    alpha=surrogate::DEFAULT_RIDGE_ALPHA, ablation="zero"
))]
#[allow(clippy::too_many_arguments)]
fn explain(
    py: Python<'_>,
    image: &PyImage,
    segments: Option<&PySegmentMap>,
    distance: &str,
    classes: Option<Vec<usize>>,
    model: &str,
    class_count: usize,
    model_seed: u64,
    samples: usize,
    seed: u64,
    width: f64,
    alpha: f64,
    ablation: &str,
) -> PyResult<Vec<PyExplanation>> {
    let kinds: Vec<DistanceKind> = distance
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<psx_core::Result<_>>()
        .py()?;
    let client = ModelClient::from_spec(model, class_count, model_seed).py()?;
    let cfg = SurrogateConfig {
        sample_count: samples,
        ablation: ablation.parse::<AblationMode>().py()?,
        ridge_alpha: alpha,
        kernel: KernelConfig::new(width).py()?,
        distance: DistanceKind::cosine(),
        rng_seed: seed,
    };
    let img = image.0.clone();
    let seg = match segments {
        Some(s) => s.0.clone(),
        None => segmentation::slic_segment(&img, &SlicParams::for_dims(img.height(), img.width()))
            .py()?,
    };
    py.detach(move || {
        let classes = match classes {
            Some(c) => c,
            None => blackbox::top_k(&client.predict(&img)?, 2)?,
        };
        surrogate::explain_each(&img, &seg, &client, &classes, &cfg, &kinds)
    })
    .py()
    .map(|v| v.into_iter().map(PyExplanation).collect())
}

#[pyfunction]
#[pyo3(signature = (a, b, per_pixel=false))]
fn explanation_distance(a: &PyExplanation, b: &PyExplanation, per_pixel: bool) -> PyResult<f64> {
    let norm = if per_pixel {
        psx_core::Normalization::PerPixel
    } else {
        psx_core::Normalization::Sum
    };
    psx_core::expdist::explanation_distance_with(&a.0, &b.0, norm).py()
}

/// Runs the benchmark and returns the summary rows as
/// `(scope, distance, mean, std, agreed, rejected, failed)` tuples.
#[pyfunction]
#[pyo3(signature = (
    corpus, out, families="gaussian_noise,gaussian_blur", severities=vec![1, 2, 3],
    distances="cosine,msssim,nlpd", model="toy", class_count=10, model_seed=7, seed=0, samples=surrogate::DEFAULT_SAMPLE_COUNT
))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn run_bench(
    py: Python<'_>,
    corpus: &str,
    out: PathBuf,
    families: &str,
    severities: Vec<u8>,
    distances: &str,
    model: &str,
    class_count: usize,
    model_seed: u64,
    seed: u64,
    samples: usize,
) -> PyResult<
    Vec<(
        String,
        String,
        Option<f64>,
        Option<f64>,
        usize,
        usize,
        usize,
    )>,
> {
    let families = families
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<psx_core::Result<_>>()
        .py()?;
    let mut cfg = ExperimentConfig::new(
        CorpusSource::parse(corpus, seed).py()?,
        families,
        severities,
        seed,
    );
    cfg.distances = distances
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<psx_core::Result<_>>()
        .py()?;
    cfg.surrogate.sample_count = samples;
    cfg.model = model.to_string();
    cfg.output_dir = Some(out);
    let client = ModelClient::from_spec(model, class_count, model_seed).py()?;
    let (_, summary) = py.detach(move || harness::run_bench(&cfg, &client)).py()?;
    Ok(summary
        .into_iter()
        .map(|s| {
            (
                s.scope, s.distance, s.mean, s.std, s.agreed, s.rejected, s.failed,
            )
        })
        .collect())
}

#[pymodule]
fn psx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySegmentMap>()?;
    m.add_class::<PyExplanation>()?;
    m.add_function(wrap_pyfunction!(slic, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_weight, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(msssim, m)?)?;
    m.add_function(wrap_pyfunction!(msssim_distance, m)?)?;
    m.add_function(wrap_pyfunction!(nlpd_distance, m)?)?;
    m.add_function(wrap_pyfunction!(toy_predict, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(explanation_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

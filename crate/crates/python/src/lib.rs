//! Python bindings for the sparse-view CT pipeline.
//!
//! Images and sinograms cross the boundary as 2-D float64 NumPy arrays;
//! sub-band stacks as 3-D arrays of shape `(4, views/2, detectors/2)`.

use std::path::PathBuf;
use std::str::FromStr;

use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sword_core::diffusion::{PatchScoreNet, ScoreModel, ZeroScore};
use sword_core::fbp::{FilterKind, FilterSpec};
use sword_core::phantom::{GridSpec, Image};
use sword_core::pipeline::{self, PipelineConfig};
use sword_core::projector::{self, FanBeamGeometry, Sinogram, SparseSinogram, ViewMask};
use sword_core::sampler::ReconMode;
use sword_core::{io, metrics, phantom, wavelet, SwordError};

fn py_err(e: SwordError) -> PyErr {
    match e {
        SwordError::Io(_) | SwordError::Format(_) | SwordError::MissingFile(_) => PyIOError::new_err(e.to_string()),
        SwordError::TrainingDiverged { .. } | SwordError::SamplerDiverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for sword_core::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Flat-detector fan-beam scanner.
#[pyclass(name = "Geometry", module = "sword_py", from_py_object)]
#[derive(Clone)]
struct PyGeometry {
    inner: FanBeamGeometry,
}

#[pymethods]
impl PyGeometry {
    #[new]
    #[pyo3(signature = (n_views=180, n_detectors=96, source_to_center_cm=40.0, center_to_detector_cm=40.0, detector_width_cm=41.3))]
    fn new(
        n_views: usize,
        n_detectors: usize,
        source_to_center_cm: f64,
        center_to_detector_cm: f64,
        detector_width_cm: f64,
    ) -> PyResult<Self> {
        let inner =
            FanBeamGeometry { source_to_center_cm, center_to_detector_cm, detector_width_cm, n_detectors, n_views };
        inner.validate().or_py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.n_views
    }

    #[getter]
    fn n_detectors(&self) -> usize {
        self.inner.n_detectors
    }

    fn view_angles(&self) -> Vec<f64> {
        self.inner.view_angles()
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!(
            "Geometry(n_views={}, n_detectors={}, source_to_center_cm={}, center_to_detector_cm={}, detector_width_cm={})",
            g.n_views, g.n_detectors, g.source_to_center_cm, g.center_to_detector_cm, g.detector_width_cm
        )
    }
}

/// Trained patch score network loaded from a checkpoint.
#[pyclass(name = "ScoreNet", module = "sword_py")]
struct PyScoreNet {
    inner: PatchScoreNet,
}

#[pymethods]
impl PyScoreNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_model(&path).or_py()? })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn data_scale(&self) -> f64 {
        self.inner.data_scale()
    }

    /// Score of a `(channels, rows, cols)` stack at noise level `sigma`.
    fn score<'py>(&self, py: Python<'py>, x: PyReadonlyArray3<'py, f64>, sigma: f64) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let x = x.as_array().to_owned();
        let s = py.detach(|| self.inner.try_score(&x, sigma)).or_py()?;
        Ok(s.into_pyarray(py))
    }
}

fn grid(n: usize, fov: f64) -> PyResult<GridSpec> {
    GridSpec::new(n, fov).or_py()
}

fn image(data: PyReadonlyArray2<'_, f64>, fov: f64) -> PyResult<Image> {
    let a = data.as_array().to_owned();
    let g = grid(a.nrows(), fov)?;
    Image::from_array(g, a).or_py()
}

fn sinogram(data: PyReadonlyArray2<'_, f64>, geometry: &PyGeometry) -> PyResult<Sinogram> {
    Sinogram::from_array(geometry.inner.clone(), data.as_array().to_owned()).or_py()
}

fn sparse(data: PyReadonlyArray2<'_, f64>, geometry: &PyGeometry, kept: Vec<usize>) -> PyResult<SparseSinogram> {
    let full = sinogram(data, geometry)?;
    let mask = ViewMask::new(geometry.inner.n_views, kept).or_py()?;
    projector::subsample(&full, &mask).or_py()
}

#[pyfunction]
#[pyo3(signature = (n=64, fov=20.0))]
fn shepp_logan<'py>(py: Python<'py>, n: usize, fov: f64) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(phantom::shepp_logan(grid(n, fov)?).data.into_pyarray(py))
}

#[pyfunction]
#[pyo3(signature = (n=64, fov=20.0, radius=5.0, value=1.0))]
fn disk_phantom<'py>(py: Python<'py>, n: usize, fov: f64, radius: f64, value: f64) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(phantom::disk_phantom(grid(n, fov)?, radius, value).or_py()?.data.into_pyarray(py))
}

#[pyfunction]
#[pyo3(signature = (n=64, fov=20.0, seed=0))]
fn random_phantom<'py>(py: Python<'py>, n: usize, fov: f64, seed: u64) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let g = grid(n, fov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = phantom::random_ellipses(g, &mut rng);
    Ok(phantom::ellipse_phantom(g, &specs).or_py()?.data.into_pyarray(py))
}

#[pyfunction]
#[pyo3(signature = (image_data, geometry, fov=20.0))]
fn forward_project<'py>(
    py: Python<'py>,
    image_data: PyReadonlyArray2<'py, f64>,
    geometry: PyGeometry,
    fov: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = image(image_data, fov)?;
    let s = py.detach(|| projector::forward_project(&img, &geometry.inner)).or_py()?;
    Ok(s.data.into_pyarray(py))
}

#[pyfunction]
#[pyo3(signature = (sino, geometry, n=64, fov=20.0))]
fn back_project<'py>(
    py: Python<'py>,
    sino: PyReadonlyArray2<'py, f64>,
    geometry: PyGeometry,
    n: usize,
    fov: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let s = sinogram(sino, &geometry)?;
    let g = grid(n, fov)?;
    let img = py.detach(|| projector::back_project(&s, &geometry.inner, g)).or_py()?;
    Ok(img.data.into_pyarray(py))
}

/// Evenly spaced kept view indices.
#[pyfunction]
fn view_mask(total: usize, kept: usize) -> PyResult<Vec<usize>> {
    Ok(projector::view_mask(total, kept).or_py()?.kept_indices().to_vec())
}

fn filter_spec(filter: &str, cutoff: f64) -> PyResult<FilterSpec> {
    let kind = FilterKind::from_str(filter).map_err(PyValueError::new_err)?;
    FilterSpec::new(kind, cutoff).or_py()
}

/// Filtered backprojection; with `kept` only those views are used.
#[pyfunction]
#[pyo3(signature = (sino, geometry, n=64, fov=20.0, kept=None, filter="ram-lak", cutoff=1.0))]
#[allow(clippy::too_many_arguments)]
fn fbp<'py>(
    py: Python<'py>,
    sino: PyReadonlyArray2<'py, f64>,
    geometry: PyGeometry,
    n: usize,
    fov: f64,
    kept: Option<Vec<usize>>,
    filter: &str,
    cutoff: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let spec = filter_spec(filter, cutoff)?;
    let g = grid(n, fov)?;
    let img = match kept {
        Some(k) => {
            let y = sparse(sino, &geometry, k)?;
            py.detach(|| sword_core::fbp::fbp_sparse(&y, &geometry.inner, g, spec)).or_py()?
        }
        None => {
            let s = sinogram(sino, &geometry)?;
            py.detach(|| sword_core::fbp::fbp_reconstruct(&s, g, spec)).or_py()?
        }
    };
    Ok(img.data.into_pyarray(py))
}

/// Single-level orthonormal Haar analysis into `(4, rows/2, cols/2)`.
#[pyfunction]
fn dwt2<'py>(py: Python<'py>, x: PyReadonlyArray2<'py, f64>) -> PyResult<Bound<'py, PyArray3<f64>>> {
    Ok(wavelet::haar_analysis(x.as_array()).or_py()?.into_pyarray(py))
}

#[pyfunction]
fn idwt2<'py>(py: Python<'py>, bands: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let b = bands.as_array().to_owned();
    if b.dim().0 != 4 {
        return Err(PyValueError::new_err(format!("expected 4 sub-bands, got {}", b.dim().0)));
    }
    Ok(wavelet::haar_synthesis(&b).into_pyarray(py))
}

/// PSNR, SSIM, MSE and the data range used, as a dict.
#[pyfunction]
#[pyo3(signature = (reference, test, data_range=None))]
fn evaluate<'py>(
    py: Python<'py>,
    reference: PyReadonlyArray2<'py, f64>,
    test: PyReadonlyArray2<'py, f64>,
    data_range: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(reference.as_array(), test.as_array(), data_range).or_py()?;
    let d = PyDict::new(py);
    d.set_item("psnr_db", r.psnr_db)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("mse", r.mse)?;
    d.set_item("data_range", r.data_range)?;
    Ok(d)
}

/// Sparse-view reconstruction. Without `config` the built-in defaults are
/// used; checkpoints are required for every mode except `fbp`. Returns
/// `(image, completed_sinogram)`.
#[pyfunction]
#[pyo3(signature = (sino, geometry, kept, config=None, mode="sword", seed=None, iterations=None))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    sino: PyReadonlyArray2<'py, f64>,
    geometry: PyGeometry,
    kept: Vec<usize>,
    config: Option<PathBuf>,
    mode: &str,
    seed: Option<u64>,
    iterations: Option<usize>,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(&p).or_py()?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    if let Some(t) = iterations {
        cfg.sampler.iterations = t;
    }
    let mode = ReconMode::from_str(mode).map_err(PyValueError::new_err)?;
    let y = sparse(sino, &geometry, kept)?;
    let g = cfg.grid_spec().or_py()?;
    let geo = geometry.inner.clone();
    let out = py
        .detach(|| -> sword_core::Result<_> {
            let zero4 = ZeroScore { channels: 4 };
            let zero3 = ZeroScore { channels: 3 };
            if mode == ReconMode::Fbp {
                let mut sc = cfg.sampler_config(1.0)?;
                sc.mode = mode;
                return sword_core::sampler::sword_reconstruct(&y, &geo, g, &zero4, &zero3, &sc);
            }
            let (full, high) = pipeline::load_models(&cfg)?;
            let sc = pipeline::sampler_for(&cfg, &full, mode)?;
            let m1: &dyn ScoreModel = if mode == ReconMode::WhdmOnly { &zero4 } else { &full };
            let m2: &dyn ScoreModel = if mode == ReconMode::WfdmOnly { &zero3 } else { &high };
            sword_core::sampler::sword_reconstruct(&y, &geo, g, m1, m2, &sc)
        })
        .or_py()?;
    Ok((out.image.data.into_pyarray(py), out.sinogram.data.into_pyarray(py)))
}

#[pymodule]
fn sword_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyScoreNet>()?;
    m.add_function(wrap_pyfunction!(shepp_logan, m)?)?;
    m.add_function(wrap_pyfunction!(disk_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(random_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(forward_project, m)?)?;
    m.add_function(wrap_pyfunction!(back_project, m)?)?;
    m.add_function(wrap_pyfunction!(view_mask, m)?)?;
    m.add_function(wrap_pyfunction!(fbp, m)?)?;
    m.add_function(wrap_pyfunction!(dwt2, m)?)?;
    m.add_function(wrap_pyfunction!(idwt2, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}

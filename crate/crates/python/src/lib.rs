//! Python bindings for the `stdplm` crate.
//!
//! Arrays cross the boundary as numpy arrays; structured results (metrics,
//! parameter reports) are returned as plain dicts.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stdplm::config::{ExperimentConfig, MissingPattern};
use stdplm::data::synthetic::{diffusion_sinusoid, random_graph, SyntheticSpec};
use stdplm::data::{masks, SpatialTemporalDataset};
use stdplm::model::Batch;
use stdplm::runtime::run;
use stdplm::spectral::{self, AdjacencyMode, Edge};

create_exception!(stdplm_py, StdPlmError, PyException, "Error raised by the stdplm library.");

fn err(e: stdplm::Error) -> PyErr {
    StdPlmError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| StdPlmError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dmatrix(a: &PyReadonlyArray2<f64>) -> DMatrix<f64> {
    let v = a.as_array();
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[[i, j]])
}

fn ndarray2(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn adjacency_mode(mode: &str) -> PyResult<AdjacencyMode> {
    match mode {
        "binary" => Ok(AdjacencyMode::Binary),
        "weighted" => Ok(AdjacencyMode::Weighted),
        other => Err(StdPlmError::new_err(format!("unknown adjacency mode {other:?}"))),
    }
}

fn pattern(p: &str) -> PyResult<MissingPattern> {
    match p {
        "rm" => Ok(MissingPattern::Rm),
        "cm" => Ok(MissingPattern::Cm),
        other => Err(StdPlmError::new_err(format!("unknown missing pattern {other:?}"))),
    }
}

/// Sensor network with its adjacency matrix.
#[pyclass(name = "SensorGraph", module = "stdplm_py", from_py_object)]
#[derive(Clone)]
struct PySensorGraph {
    inner: spectral::SensorGraph,
}

#[pymethods]
impl PySensorGraph {
    #[staticmethod]
    fn from_adjacency(adjacency: PyReadonlyArray2<f64>) -> PyResult<Self> {
        let inner = spectral::SensorGraph::from_adjacency(dmatrix(&adjacency)).map_err(err)?;
        Ok(Self { inner })
    }

    /// `edges` is a list of `(src, dst, weight)` tuples.
    #[staticmethod]
    #[pyo3(signature = (n_nodes, edges, mode = "binary"))]
    fn from_edges(n_nodes: usize, edges: Vec<(usize, usize, f64)>, mode: &str) -> PyResult<Self> {
        let edges = edges.into_iter().map(|(src, dst, weight)| Edge { src, dst, weight }).collect();
        let inner = spectral::SensorGraph::from_edges(n_nodes, edges, adjacency_mode(mode)?).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, n_nodes, mode = "binary"))]
    fn read_csv(path: PathBuf, n_nodes: usize, mode: &str) -> PyResult<Self> {
        let inner = spectral::SensorGraph::read_csv(&path, n_nodes, adjacency_mode(mode)?).map_err(err)?;
        Ok(Self { inner })
    }

    /// Connected random graph: a spanning path plus extra edges with probability `p_extra`.
    #[staticmethod]
    #[pyo3(signature = (n_nodes, p_extra = 0.1, seed = 0))]
    fn random(n_nodes: usize, p_extra: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: random_graph(n_nodes, p_extra, seed).map_err(err)? })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(err)
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    fn adjacency<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        ndarray2(self.inner.adjacency()).into_pyarray(py)
    }

    fn laplacian<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        Ok(ndarray2(&self.inner.laplacian().map_err(err)?).into_pyarray(py))
    }

    fn __repr__(&self) -> String {
        format!("SensorGraph(n_nodes={}, edges={})", self.inner.n_nodes(), self.inner.edges().len())
    }
}

/// Multivariate series on a sensor graph.
#[pyclass(name = "Dataset", module = "stdplm_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SpatialTemporalDataset,
}

#[pymethods]
impl PyDataset {
    /// `data` is T x N x C; NaN marks unobserved cells.
    #[new]
    #[pyo3(signature = (name, data, timestamps, graph, interval_seconds = 300))]
    fn new(
        name: String,
        data: PyReadonlyArray3<f32>,
        timestamps: Vec<i64>,
        graph: &PySensorGraph,
        interval_seconds: u32,
    ) -> PyResult<Self> {
        let inner = SpatialTemporalDataset::new(name, data.as_array().to_owned(), timestamps, graph.inner.clone(), interval_seconds)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (data_path, adjacency_path, interval_seconds = 300, start_time = "2016-07-01T00:00:00", mode = "binary"))]
    fn load(data_path: PathBuf, adjacency_path: PathBuf, interval_seconds: u32, start_time: &str, mode: &str) -> PyResult<Self> {
        let inner = stdplm::data::load_pems(&data_path, &adjacency_path, interval_seconds, start_time, adjacency_mode(mode)?)
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Daily sinusoids mixed with a diffusion process on `graph`.
    #[staticmethod]
    #[pyo3(signature = (graph, t_total = 2000, channels = 1, interval_seconds = 1800, seed = 0, noise = 0.5))]
    fn synthetic(graph: &PySensorGraph, t_total: usize, channels: usize, interval_seconds: u32, seed: u64, noise: f64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            n_nodes: graph.inner.n_nodes(),
            t_total,
            channels,
            interval_seconds,
            seed,
            noise,
        };
        Ok(Self { inner: diffusion_sinusoid(&graph.inner, &spec).map_err(err)? })
    }

    fn save_npz(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_npz(&path).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.data.dim()
    }

    #[getter]
    fn graph(&self) -> PySensorGraph {
        PySensorGraph { inner: self.inner.graph.clone() }
    }

    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.data.clone().into_pyarray(py)
    }

    fn observed<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<bool>> {
        self.inner.observed.clone().into_pyarray(py)
    }

    fn timestamps<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<i64>> {
        Array1::from(self.inner.timestamps.clone()).into_pyarray(py)
    }

    fn __repr__(&self) -> String {
        let (t, n, c) = self.inner.data.dim();
        format!("Dataset(name={:?}, T={t}, N={n}, C={c})", self.inner.name)
    }
}

/// Experiment configuration (TOML).
#[pyclass(name = "Config", module = "stdplm_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml(text).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

/// The full network in f32 on the CPU.
#[pyclass(name = "Model", module = "stdplm_py")]
struct PyModel {
    inner: stdplm::StdPlm,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, graph, seed = 0))]
    fn new(config: &PyConfig, graph: &PySensorGraph, seed: u64) -> PyResult<Self> {
        let inner = stdplm::StdPlm::new(&config.inner.model, &graph.inner, &Device::Cpu, DType::F32, seed).map_err(err)?;
        Ok(Self { inner })
    }

    /// One window: `x` and `mask` are (T, N, C), `tod` and `dow` are (T,).
    /// Returns a dict with `y` (N, T_out·C), `s` (M, N) and the token sets.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray3<f32>,
        mask: PyReadonlyArray3<f32>,
        tod: PyReadonlyArray1<u32>,
        dow: PyReadonlyArray1<u32>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (t, n, c) = x.as_array().dim();
        let dev = Device::Cpu;
        let tensor = |a: &PyReadonlyArray3<f32>| -> PyResult<Tensor> {
            let v: Vec<f32> = a.as_array().iter().copied().collect();
            Tensor::from_vec(v, (1, t, n, c), &dev).map_err(|e| err(e.into()))
        };
        let index = |a: &PyReadonlyArray1<u32>| -> PyResult<Tensor> {
            let v: Vec<u32> = a.as_array().to_vec();
            let len = v.len();
            Tensor::from_vec(v, (1, len), &dev).map_err(|e| err(e.into()))
        };
        if mask.as_array().dim() != (t, n, c) {
            return Err(StdPlmError::new_err("mask shape does not match x"));
        }
        let batch = Batch {
            x: tensor(&x)?,
            mask: tensor(&mask)?,
            tod: index(&tod)?,
            dow: index(&dow)?,
        };
        let out = self.inner.forward(&batch).map_err(err)?;
        let host = |t: &Tensor| -> PyResult<Array2<f32>> {
            let t = t.squeeze(0).and_then(|t| t.to_dtype(DType::F32)).map_err(|e| err(e.into()))?;
            let (r, k) = t.dims2().map_err(|e| err(e.into()))?;
            let v = t.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(|e| err(e.into()))?;
            Ok(Array2::from_shape_vec((r, k), v).expect("dims match"))
        };
        let d = pyo3::types::PyDict::new(py);
        d.set_item("y", host(&out.y)?.into_pyarray(py))?;
        d.set_item("s", host(&out.s)?.into_pyarray(py))?;
        d.set_item("z_s", host(&out.z_s)?.into_pyarray(py))?;
        d.set_item("z_t", host(&out.z_t)?.into_pyarray(py))?;
        d.set_item("z_h", host(&out.z_h)?.into_pyarray(py))?;
        Ok(d.into_any())
    }

    fn param_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.param_report())
    }

    fn set_graph(&mut self, graph: &PySensorGraph) -> PyResult<()> {
        self.inner.set_graph(&graph.inner).map_err(err)
    }
}

#[pyfunction]
fn normalized_laplacian<'py>(py: Python<'py>, adjacency: PyReadonlyArray2<f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(ndarray2(&spectral::normalized_laplacian(&dmatrix(&adjacency)).map_err(err)?).into_pyarray(py))
}

/// Returns `(eigenvalues, vectors, k_effective)` for the `k` largest eigenvalues.
#[pyfunction]
fn spectral_basis<'py>(
    py: Python<'py>,
    laplacian: PyReadonlyArray2<f64>,
    k: usize,
) -> PyResult<(Bound<'py, PyArray1<f64>>, Bound<'py, PyArray2<f64>>, usize)> {
    let b = spectral::spectral_basis(&dmatrix(&laplacian), k).map_err(err)?;
    Ok((Array1::from(b.eigenvalues).into_pyarray(py), ndarray2(&b.vectors).into_pyarray(py), b.k_effective))
}

#[pyfunction]
fn node_embedding<'py>(
    py: Python<'py>,
    laplacian: PyReadonlyArray2<f64>,
    weights: PyReadonlyArray2<f64>,
    bias: PyReadonlyArray1<f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let w = dmatrix(&weights);
    let basis = spectral::spectral_basis(&dmatrix(&laplacian), w.nrows()).map_err(err)?;
    let b = DVector::from_iterator(bias.as_array().len(), bias.as_array().iter().copied());
    Ok(ndarray2(&spectral::node_embedding(&basis, &w, &b).map_err(err)?).into_pyarray(py))
}

#[pyfunction]
fn structure_loss(s: PyReadonlyArray2<f64>, adjacency: PyReadonlyArray2<f64>) -> PyResult<f64> {
    stdplm::losses::structure_loss(&dmatrix(&s), &dmatrix(&adjacency)).map_err(err)
}

/// With `alpha=None` the concentrations are derived from `adjacency`.
#[pyfunction]
#[pyo3(signature = (s, alpha = None, adjacency = None))]
fn dirichlet_regularizer(
    s: PyReadonlyArray2<f64>,
    alpha: Option<PyReadonlyArray1<f64>>,
    adjacency: Option<PyReadonlyArray2<f64>>,
) -> PyResult<f64> {
    let params = match (alpha, adjacency) {
        (Some(a), _) => stdplm::losses::DirichletParams::new(DVector::from_iterator(a.as_array().len(), a.as_array().iter().copied())),
        (None, Some(adj)) => stdplm::losses::alpha_from_graph(&dmatrix(&adj)),
        (None, None) => return Err(StdPlmError::new_err("pass alpha or adjacency")),
    }
    .map_err(err)?;
    stdplm::losses::dirichlet_regularizer(&dmatrix(&s), &params).map_err(err)
}

#[pyfunction]
fn alpha_from_graph<'py>(py: Python<'py>, adjacency: PyReadonlyArray2<f64>) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let a = stdplm::losses::alpha_from_graph(&dmatrix(&adjacency)).map_err(err)?;
    Ok(Array1::from(a.alpha.as_slice().to_vec()).into_pyarray(py))
}

#[pyfunction]
fn masked_l1(y: Vec<f64>, target: Vec<f64>, mask: Vec<bool>) -> PyResult<f64> {
    stdplm::losses::masked_l1(&y, &target, &mask).map_err(err)
}

/// MAE, RMSE and MAPE (percent) over entries where `mask` is true.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, y: Vec<f64>, target: Vec<f64>, mask: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &stdplm::data::metrics(&y, &target, &mask).map_err(err)?)
}

/// Observation mask (true = kept) with the given missing rate.
#[pyfunction]
#[pyo3(signature = (shape, rate, seed = 0))]
fn generate_rm<'py>(py: Python<'py>, shape: (usize, usize, usize), rate: f64, seed: u64) -> PyResult<Bound<'py, PyArray3<bool>>> {
    Ok(masks::generate_rm(shape, rate, seed).map_err(err)?.into_pyarray(py))
}

/// Block mask over (3-step, region) cells; returns `(mask, regions)`.
#[pyfunction]
#[pyo3(signature = (graph, shape, rate, seed = 0))]
fn generate_cm<'py>(
    py: Python<'py>,
    graph: &PySensorGraph,
    shape: (usize, usize, usize),
    rate: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray3<bool>>, Vec<usize>)> {
    let cm = masks::generate_cm(&graph.inner, shape, rate, seed).map_err(err)?;
    Ok((cm.mask.into_pyarray(py), cm.regions))
}

/// Splits observed cells into `(model_mask, eval_mask)`.
#[pyfunction]
#[pyo3(signature = (mask, ratio_low, ratio_high, seed = 0))]
fn condition_missing<'py>(
    py: Python<'py>,
    mask: PyReadonlyArray3<bool>,
    ratio_low: f64,
    ratio_high: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray3<bool>>, Bound<'py, PyArray3<bool>>)> {
    let m: Array3<bool> = mask.as_array().to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, eval) = masks::condition_missing(&m, [ratio_low, ratio_high], &mut rng).map_err(err)?;
    Ok((model.into_pyarray(py), eval.into_pyarray(py)))
}

/// Trains every configured seed and writes the run directory. Relative
/// data paths in the config are resolved against `base`.
#[pyfunction]
#[pyo3(signature = (config, run_dir, base = None))]
fn train<'py>(py: Python<'py>, config: &PyConfig, run_dir: PathBuf, base: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let m = py.detach(|| run::train_run(&config.inner, base.as_deref(), &run_dir)).map_err(err)?;
    to_py(py, &m)
}

#[pyfunction]
#[pyo3(signature = (config, ratio, run_dir, base = None))]
fn few_shot<'py>(py: Python<'py>, config: &PyConfig, ratio: f64, run_dir: PathBuf, base: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let m = py.detach(|| run::few_shot_run(&config.inner, ratio, base.as_deref(), &run_dir)).map_err(err)?;
    to_py(py, &m)
}

/// Test-split metrics of the checkpoint in `run_dir`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let m = py.detach(|| run::evaluate_run(&run_dir)).map_err(err)?;
    to_py(py, &m)
}

#[pyfunction]
fn zero_shot<'py>(py: Python<'py>, run_dir: PathBuf, target: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let m = py.detach(|| run::zero_shot(&run_dir, &target.inner)).map_err(err)?;
    to_py(py, &m)
}

/// Horizon x N x C prediction after the window ending at `end` (default: series end).
#[pyfunction]
#[pyo3(signature = (run_dir, dataset, end = None))]
fn forecast<'py>(py: Python<'py>, run_dir: PathBuf, dataset: &PyDataset, end: Option<usize>) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let y = py.detach(|| run::forecast(&run_dir, &dataset.inner, end)).map_err(err)?;
    Ok(y.into_pyarray(py))
}

/// The series with every hidden or unobserved cell filled in.
#[pyfunction]
#[pyo3(signature = (run_dir, dataset, mask = None))]
fn impute<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    dataset: &PyDataset,
    mask: Option<PyReadonlyArray3<bool>>,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let mask = mask.map(|m| m.as_array().to_owned());
    let y = py.detach(|| run::impute(&run_dir, &dataset.inner, mask.as_ref())).map_err(err)?;
    Ok(y.into_pyarray(py))
}

/// Mask for `dataset` as `(mask, meta)`.
#[pyfunction]
#[pyo3(signature = (dataset, pattern_name, rate, seed = 0))]
fn gen_missing<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    pattern_name: &str,
    rate: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray3<bool>>, Bound<'py, PyAny>)> {
    let (mask, meta) = run::gen_missing(&dataset.inner, pattern(pattern_name)?, rate, seed).map_err(err)?;
    Ok((mask.into_pyarray(py), to_py(py, &meta)?))
}

#[pymodule]
pub fn stdplm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StdPlmError", m.py().get_type::<StdPlmError>())?;
    m.add_class::<PySensorGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalized_laplacian, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_basis, m)?)?;
    m.add_function(wrap_pyfunction!(node_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(structure_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_regularizer, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_from_graph, m)?)?;
    m.add_function(wrap_pyfunction!(masked_l1, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_rm, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cm, m)?)?;
    m.add_function(wrap_pyfunction!(condition_missing, m)?)?;
    m.add_function(wrap_pyfunction!(gen_missing, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(few_shot, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    m.add_function(wrap_pyfunction!(impute, m)?)?;
    Ok(())
}

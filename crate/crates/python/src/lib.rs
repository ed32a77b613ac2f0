//! Python bindings. Tensors cross the boundary as flat row-major sequences
//! plus their dims; any float sequence (lists, 1-D numpy arrays) is accepted.

use std::collections::BTreeSet;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use npls::io::{load_model, save_model};
use npls::stream::{metrics_jsonl, read_stream, write_stream};
use npls::{
    AlsConfig, FormatError, GridPoint, LearnerConfig, NormOrder, PenaltySpec, PlsError, PlsModel, ReplayConfig,
    StreamBatch, StreamError, SynthConfig, Tensor,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn format_err(e: FormatError) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn pls_err(e: PlsError) -> PyErr {
    match e {
        PlsError::NoData | PlsError::Parafac(_) => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn stream_err(e: StreamError) -> PyErr {
    match e {
        StreamError::Format(f) => format_err(f),
        StreamError::GridPoint { .. } | StreamError::MetricUndefined => PyRuntimeError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn norm_order(p: f64) -> PyResult<NormOrder> {
    NormOrder::from_p(p).map_err(value_err)
}

fn tensors(dims: &[usize], rows: Vec<Vec<f64>>) -> PyResult<Vec<Tensor>> {
    rows.into_iter()
        .map(|r| Tensor::new(dims.to_vec(), r).map_err(value_err))
        .collect()
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// Closed-form penalized update of one coefficient.
#[pyfunction]
#[pyo3(signature = (p, w_ls, lam, kappa2, protected=false))]
fn threshold(p: f64, w_ls: f64, lam: f64, kappa2: f64, protected: bool) -> PyResult<f64> {
    let spec = PenaltySpec::new(norm_order(p)?, lam).map_err(value_err)?;
    if !(kappa2 > 0.0) {
        return Err(value_err("kappa2 must be > 0"));
    }
    Ok(spec.apply(w_ls, kappa2, protected))
}

/// Largest root of x(1-x)^2 = c on [1/3, 1].
#[pyfunction]
fn cubic_largest_root(c: f64) -> PyResult<f64> {
    npls::thresholding::cubic_largest_root(c).map_err(value_err)
}

/// Rank-1 PARAFAC of a dense tensor: returns (rho, factors, residual_norm, status).
#[pyfunction]
#[pyo3(signature = (data, dims, tolerance=1e-6, max_iterations=100))]
fn als_rank1(
    data: Vec<f64>,
    dims: Vec<usize>,
    tolerance: f64,
    max_iterations: usize,
) -> PyResult<(f64, Vec<Vec<f64>>, f64, String)> {
    let v = Tensor::new(dims, data).map_err(value_err)?;
    let cfg = AlsConfig {
        tolerance,
        max_iterations,
        ..AlsConfig::default()
    };
    let fit = npls::als_rank1(&v, &cfg).map_err(value_err)?;
    Ok((fit.projectors.rho, fit.projectors.factors, fit.residual_norm, format!("{:?}", fit.status)))
}

/// Per-sample cosine between targets and predictions with mean, median and quartiles.
#[pyfunction]
fn dot_product<'py>(py: Python<'py>, targets: Vec<Vec<f64>>, predictions: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let d = npls::dot_product_metric(&targets, &predictions).map_err(stream_err)?;
    let out = PyDict::new(py);
    out.set_item("samples", d.samples)?;
    out.set_item("skipped", d.skipped)?;
    out.set_item("mean", d.mean)?;
    out.set_item("median", d.median)?;
    out.set_item("q1", d.q1)?;
    out.set_item("q3", d.q3)?;
    Ok(out)
}

/// Fraction of exactly-zero entries.
#[pyfunction]
fn sparse_idx(w: Vec<f64>) -> PyResult<f64> {
    npls::sparse_idx(&w).map_err(value_err)
}

/// Synthetic stream: batches of flattened input tensors and output vectors.
#[pyclass(module = "sparse_npls")]
struct Stream {
    dims: Vec<usize>,
    batches: Vec<StreamBatch>,
    config: Option<SynthConfig>,
    truth: Option<npls::stream::SynthStream>,
}

#[pymethods]
impl Stream {
    /// Generates a stream. `zero_slices` maps a 0-based mode to the 0-based
    /// slice indices that carry no signal.
    #[staticmethod]
    #[pyo3(signature = (dims, outputs, batch_size, batches, seed, noise=0.0, zero_slices=None, latent_rank=None, drift=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        dims: Vec<usize>,
        outputs: usize,
        batch_size: usize,
        batches: usize,
        seed: u64,
        noise: f64,
        zero_slices: Option<Vec<(usize, Vec<usize>)>>,
        latent_rank: Option<usize>,
        drift: f64,
    ) -> PyResult<Self> {
        let mut cfg = SynthConfig::new(dims.clone(), outputs, batch_size, batches, seed);
        cfg.noise = noise;
        cfg.latent_rank = latent_rank;
        cfg.drift = drift;
        for (mode, slices) in zero_slices.unwrap_or_default() {
            let set = cfg
                .zero_slices
                .get_mut(mode)
                .ok_or_else(|| value_err(format!("zero_slices: mode {mode} out of range")))?;
            set.extend(slices);
        }
        let s = npls::synth_generate(&cfg).map_err(stream_err)?;
        Ok(Self {
            dims,
            batches: s.batches.clone(),
            config: Some(cfg),
            truth: Some(s),
        })
    }

    /// Reads a stream directory written by `save` or the command-line tool.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (manifest, batches) = read_stream(path).map_err(stream_err)?;
        Ok(Self {
            dims: manifest.dims,
            batches,
            config: None,
            truth: None,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match (&self.config, &self.truth) {
            (Some(cfg), Some(s)) => write_stream(path, cfg, s).map_err(format_err),
            _ => Err(value_err("only generated streams can be saved")),
        }
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.dims.clone()
    }

    fn __len__(&self) -> usize {
        self.batches.len()
    }

    /// Inputs of batch `i` as flattened rows.
    fn x(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let b = self.batches.get(i).ok_or_else(|| value_err("batch index out of range"))?;
        Ok(b.x.iter().map(|t| t.data().to_vec()).collect())
    }

    fn y(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let b = self.batches.get(i).ok_or_else(|| value_err("batch index out of range"))?;
        Ok(b.y.clone())
    }

    /// Flattened true coefficient tensor (dims + [outputs]).
    fn true_beta(&self) -> Option<Vec<f64>> {
        self.truth.as_ref().map(|s| s.truth.beta.data().to_vec())
    }
}

/// A calibrated model.
#[pyclass(module = "sparse_npls", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: PlsModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(path).map_err(format_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.inner).map_err(format_err)
    }

    /// Predicts one output vector per flattened input row.
    #[pyo3(signature = (x, f=None))]
    fn predict(&self, x: Vec<Vec<f64>>, f: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let xs = tensors(&self.inner.input_dims, x)?;
        self.inner.predict_batch(&xs, f).map_err(pls_err)
    }

    #[getter]
    fn f_star(&self) -> usize {
        self.inner.f_star
    }

    #[getter]
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }

    #[getter]
    fn input_dims(&self) -> Vec<usize> {
        self.inner.input_dims.clone()
    }

    /// 0-based slice indices of `mode` zeroed in every selected component.
    fn sparsity_pattern(&self, mode: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.sparsity_pattern(mode).map_err(pls_err)?.into_iter().collect())
    }

    fn sparse_idx(&self, mode: usize) -> PyResult<f64> {
        self.inner.sparse_idx(mode).map_err(pls_err)
    }

    /// Flattened coefficient tensor after `f` components (default f*).
    #[pyo3(signature = (f=None))]
    fn beta(&self, f: Option<usize>) -> PyResult<Vec<f64>> {
        let f = f.unwrap_or(self.inner.f_star);
        let c = f
            .checked_sub(1)
            .and_then(|i| self.inner.components.get(i))
            .ok_or_else(|| value_err(format!("f = {f} out of range")))?;
        Ok(c.beta.data().to_vec())
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dims={:?}, outputs={}, F={}, f_star={})",
            self.inner.input_dims,
            self.inner.outputs,
            self.inner.n_components(),
            self.inner.f_star
        )
    }
}

/// Recursive exponentially weighted learner, optionally penalized.
#[pyclass(module = "sparse_npls")]
struct Learner {
    inner: npls::RewNpls,
}

#[pymethods]
impl Learner {
    /// `p` = None gives the unpenalized learner; otherwise 0, 0.5 or 1 with
    /// `lam` in [0, 1] applied to the 0-based `penalized_modes`.
    #[new]
    #[pyo3(signature = (dims, outputs, f_max, mu=1.0, p=None, lam=0.0, penalized_modes=vec![0]))]
    fn new(
        dims: Vec<usize>,
        outputs: usize,
        f_max: usize,
        mu: f64,
        p: Option<f64>,
        lam: f64,
        penalized_modes: Vec<usize>,
    ) -> PyResult<Self> {
        let cfg = match p {
            None => LearnerConfig::unpenalized(&dims, f_max, mu),
            Some(p) => {
                let spec = PenaltySpec::new(norm_order(p)?, lam).map_err(value_err)?;
                LearnerConfig::penalized(&dims, f_max, mu, spec, &penalized_modes).map_err(pls_err)?
            }
        };
        Ok(Self {
            inner: npls::RewNpls::new(dims, outputs, cfg).map_err(pls_err)?,
        })
    }

    /// Validates on the batch, updates the statistics, recalibrates; returns f*.
    fn step(&mut self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<usize> {
        let xs = tensors(self.inner.state().input_dims(), x)?;
        self.inner.step(&xs, &y).map_err(pls_err)
    }

    #[getter]
    fn model(&self) -> Option<Model> {
        self.inner.model().map(|m| Model { inner: m.clone() })
    }

    /// Accumulated validation error per latent dimension.
    #[getter]
    fn validation_errors(&self) -> Vec<f64> {
        self.inner.validation().errors().to_vec()
    }

    #[pyo3(signature = (x, f=None))]
    fn predict(&self, x: Vec<Vec<f64>>, f: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let model = self.inner.model().ok_or_else(|| pls_err(PlsError::NoData))?;
        let xs = tensors(self.inner.state().input_dims(), x)?;
        model.predict_batch(&xs, f).map_err(pls_err)
    }
}

/// Runs a (p, lambda) grid over a stream; returns metric records as dicts
/// (a header dict first) and the final model per grid point.
#[pyfunction]
#[pyo3(signature = (stream, grid, f_max, mu, train_prefix, penalized_modes=vec![0], session_length=None, adapt=false))]
#[allow(clippy::too_many_arguments)]
fn replay<'py>(
    py: Python<'py>,
    stream: &Stream,
    grid: Vec<(f64, f64)>,
    f_max: usize,
    mu: f64,
    train_prefix: usize,
    penalized_modes: Vec<usize>,
    session_length: Option<usize>,
    adapt: bool,
) -> PyResult<(Vec<Bound<'py, PyAny>>, Vec<Option<Model>>)> {
    let points = grid
        .into_iter()
        .map(|(p, lambda)| Ok(GridPoint { order: norm_order(p)?, lambda }))
        .collect::<PyResult<Vec<_>>>()?;
    let mut cfg = ReplayConfig::new(points, f_max, mu, train_prefix);
    cfg.penalized_modes = penalized_modes;
    cfg.session_length = session_length;
    cfg.adapt = adapt;
    let results = py
        .detach(|| npls::replay(&stream.batches, &cfg))
        .map_err(stream_err)?;
    let text = metrics_jsonl(&Default::default(), &results);
    let records = text
        .lines()
        .map(|line| to_py(py, &serde_json::from_str::<Value>(line).expect("own output")))
        .collect::<PyResult<Vec<_>>>()?;
    let models = results
        .into_iter()
        .map(|r| r.model.map(|inner| Model { inner }))
        .collect();
    Ok((records, models))
}

/// Zero slice text ("mode1:3-8") to 0-based sets, for scripts reading manifests.
#[pyfunction]
fn parse_zero_slices(text: &str, modes: usize) -> PyResult<Vec<Vec<usize>>> {
    let sets: Vec<BTreeSet<usize>> = npls::stream::parse_zero_slices(text, modes).map_err(value_err)?;
    Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
}

#[pymodule]
fn sparse_npls(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(cubic_largest_root, m)?)?;
    m.add_function(wrap_pyfunction!(als_rank1, m)?)?;
    m.add_function(wrap_pyfunction!(dot_product, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_idx, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(parse_zero_slices, m)?)?;
    m.add_class::<Stream>()?;
    m.add_class::<Model>()?;
    m.add_class::<Learner>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

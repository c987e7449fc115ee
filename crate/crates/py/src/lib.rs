use aquacast_core::autodiff::Tensor;
use aquacast_core::cdm::{build_synth, Scenario, SynthPreset};
use aquacast_core::metrics;
use aquacast_core::model::{AquaCast, ModelConfig};
use aquacast_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Dynamic-time-warping distance with absolute-difference cost.
#[pyfunction]
fn dtw(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::dtw(&x, &y).map_err(py_err)
}

/// MSE, MAE, RMSE and R² (None when the truth is constant).
#[pyfunction]
fn point_metrics<'py>(py: Python<'py>, truth: Vec<f64>, pred: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::point_metrics(&truth, &pred).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mse", m.mse)?;
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("r2", m.r2.value())?;
    Ok(d)
}

/// Area under the DTW-error accuracy curve over a set of forecasts.
#[pyfunction]
#[pyo3(signature = (forecasts, truths, resolution = metrics::DEFAULT_SWEEP_RESOLUTION))]
fn dtw_accuracy_auc(forecasts: Vec<Vec<f64>>, truths: Vec<Vec<f64>>, resolution: usize) -> PyResult<f64> {
    Ok(metrics::dtw_accuracy(&forecasts, &truths, resolution)
        .map_err(py_err)?
        .auc)
}

/// Normalized permutation entropy and statistical complexity.
#[pyfunction]
#[pyo3(signature = (series, dimension = metrics::DEFAULT_EMBEDDING_DIMENSION))]
fn complexity(series: Vec<f64>, dimension: usize) -> PyResult<(f64, f64)> {
    let o = metrics::complexity(&series, dimension).map_err(py_err)?;
    Ok((o.entropy, o.complexity))
}

/// Synthesizes a drainage dataset from a preset name or scenario JSON.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 0, n_nodes = None, steps = None))]
fn synth<'py>(
    py: Python<'py>,
    scenario: &str,
    seed: u64,
    n_nodes: Option<usize>,
    steps: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut s = match SynthPreset::parse(scenario) {
        Ok(p) => Scenario::preset(p, seed),
        Err(_) => {
            let mut s = Scenario::from_json(scenario).map_err(py_err)?;
            s.seed = seed;
            s
        }
    };
    if let Some(n) = n_nodes {
        s.n_nodes = n;
    }
    if let Some(n) = steps {
        s.steps = n;
    }
    let d = py.detach(|| build_synth(&s)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("node_ids", d.node_ids)?;
    out.set_item("flows", d.flows)?;
    out.set_item("rain", d.rain)?;
    out.set_item("median_entropy", d.complexity.median_entropy)?;
    out.set_item("median_complexity", d.complexity.median_complexity)?;
    Ok(out)
}

/// A trained or freshly initialized forecasting model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AquaCast,
}

#[pymethods]
impl PyModel {
    /// New model from a JSON object of configuration fields (defaults fill the rest).
    #[new]
    #[pyo3(signature = (config = "{}"))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: AquaCast::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AquaCast::load(path.as_ref()).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.config().parameter_count()
    }

    /// `history` is `[n_hist_vars][hist_len]`, `forecast` `[n_forecast_vars][forecast_len]`;
    /// returns `[n_targets][horizon]` in standardized units.
    #[pyo3(signature = (history, forecast = None))]
    fn predict(&self, history: Vec<Vec<f64>>, forecast: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let h = matrix(history)?;
        let f = forecast.map(matrix).transpose()?;
        let y = self.inner.predict(&h, f.as_ref()).map_err(py_err)?;
        let cols = y.shape()[1];
        Ok(y.data().chunks(cols).map(<[f64]>::to_vec).collect())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![r, c], rows.concat()).map_err(py_err)
}

#[pymodule]
fn aquacast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dtw, m)?)?;
    m.add_function(wrap_pyfunction!(point_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_accuracy_auc, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<PyModel>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

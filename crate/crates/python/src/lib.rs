//! Python module `fsld`: synthesize datasets, inspect the Hessian diagonal and
//! run reconstructions from Python.
//!
//! Volumes and images cross the boundary as lists of Python `complex`; traces
//! come back as lists of dicts.

use std::path::PathBuf;

use fsld_core::config::ExperimentConfig;
use fsld_core::forward::{FourierVolume, ImageStack};
use fsld_core::grid::shell_table;
use fsld_core::hessian::{self, BoundRegime, DiagOptions};
use fsld_core::optim::{self, RunInputs, Variant};
use fsld_core::{io, metrics, FsldError};
use num_complex::Complex64;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: FsldError) -> PyErr {
    match e {
        FsldError::Io(_) | FsldError::Data(_) => PyIOError::new_err(e.to_string()),
        FsldError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        FsldError::Config(_) | FsldError::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
    }
}

/// Experiment configuration; keys match the `key = value` config format.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses `text` (if given) and then applies keyword overrides.
    #[new]
    #[pyo3(signature = (text=None, **overrides))]
    fn new(text: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = match text {
            Some(t) => ExperimentConfig::parse(t).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    "None" => "auto".to_string(),
                    _ => value,
                };
                inner.set(&key, &value).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        ExperimentConfig::KEYS.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Config(M={}, N={}, variant={})", self.inner.m, self.inner.n, self.inner.variant.name())
    }
}

#[pyclass(name = "Volume")]
#[derive(Clone)]
struct PyVolume {
    inner: FourierVolume,
}

#[pymethods]
impl PyVolume {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume { inner: io::read_volume(&path).map_err(to_py)? })
    }

    /// Writes the volume and returns its content digest.
    fn save(&self, path: PathBuf) -> PyResult<u64> {
        io::write_volume(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.spec.m()
    }

    fn values(&self) -> Vec<Complex64> {
        self.inner.values.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.values.len()
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: ImageStack,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: io::read_dataset(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<u64> {
        io::write_dataset(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.spec.m()
    }

    #[getter]
    fn mask_radius(&self) -> usize {
        self.inner.mask_radius
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn has_ctf(&self) -> bool {
        self.inner.ctfs.is_some()
    }

    fn image(&self, i: usize) -> PyResult<Vec<Complex64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("image index {i} out of range")));
        }
        Ok(self.inner.image(i).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Returns `(truth, dataset)` for `config`.
#[pyfunction]
fn synthesize(config: &PyConfig) -> PyResult<(PyVolume, PyDataset)> {
    let (truth, stack) = config.inner.synthesize().map_err(to_py)?;
    Ok((PyVolume { inner: truth }, PyDataset { inner: stack }))
}

/// Regularization weight `config` resolves to on `dataset`.
#[pyfunction]
fn resolved_lambda(config: &PyConfig, dataset: &PyDataset) -> PyResult<f64> {
    let s = &dataset.inner;
    config.inner.resolved_lambda(&s.spec, s.mask_radius, s.len()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (dataset, lam, dedup=false))]
fn exact_diag(py: Python<'_>, dataset: &PyDataset, lam: f64, dedup: bool) -> PyResult<Vec<f64>> {
    let s = &dataset.inner;
    py.allow_threads(|| {
        let proj = s.projector()?;
        hessian::exact_diag(&s.poses, s.ctfs.as_deref(), lam, &proj, DiagOptions { dedup })
    })
    .map_err(to_py)
}

/// κ of the diagonal restricted to each radius `1..=max_radius`.
#[pyfunction]
fn kappa_by_radius(dataset: &PyDataset, diag: Vec<f64>, max_radius: usize) -> PyResult<Vec<f64>> {
    hessian::kappa_by_radius(&diag, &dataset.inner.spec, max_radius).map_err(to_py)
}

/// `(value, exact)` where `exact` is true when the bound is attained.
#[pyfunction]
fn cond_lower_bound(n: usize, lam: f64, p: f64) -> PyResult<(f64, bool)> {
    let b = hessian::cond_lower_bound(n, lam, p).map_err(to_py)?;
    Ok((b.value, b.regime == BoundRegime::Exact))
}

#[pyfunction]
fn reference_solve(py: Python<'_>, config: &PyConfig, dataset: &PyDataset, lam: f64) -> PyResult<PyVolume> {
    let rep = py
        .allow_threads(|| optim::reference_solve(&dataset.inner, lam, config.inner.cg_tol, config.inner.cg_max_iter))
        .map_err(to_py)?;
    Ok(PyVolume { inner: rep.volume })
}

/// Per-shell FSC over shells `0..=radius`; undefined shells are `None`.
#[pyfunction]
fn fsc(a: &PyVolume, b: &PyVolume, radius: usize) -> PyResult<Vec<Option<f64>>> {
    let shells = shell_table(&a.inner.spec, radius).map_err(to_py)?;
    Ok(metrics::fsc(&a.inner, &b.inner, &shells).map_err(to_py)?.values)
}

/// Runs `variant` (default: the config's) and returns `(volume, epochs)`.
#[pyfunction]
#[pyo3(signature = (config, dataset, variant=None, reference=None))]
fn reconstruct<'py>(
    py: Python<'py>,
    config: &PyConfig,
    dataset: &PyDataset,
    variant: Option<&str>,
    reference: Option<&PyVolume>,
) -> PyResult<(PyVolume, Vec<Bound<'py, PyDict>>)> {
    let s = &dataset.inner;
    let lam = config.inner.resolved_lambda(&s.spec, s.mask_radius, s.len()).map_err(to_py)?;
    let mut oc = config.inner.optim_config(lam);
    if let Some(v) = variant {
        oc.variant = v.parse::<Variant>().map_err(to_py)?;
    }
    let reference = reference.map(|r| &r.inner);
    let (vol, trace) = py
        .allow_threads(|| optim::run(&oc, s, RunInputs { reference, ..RunInputs::default() }))
        .map_err(to_py)?;
    let epochs = trace
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("loss", e.loss)?;
            d.set_item("eta", e.eta)?;
            d.set_item("backtracks", e.backtracks)?;
            d.set_item("precond_rel_err", e.precond_rel_err)?;
            d.set_item("fsc", e.fsc.as_ref().map(|c| c.values.clone()))?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyVolume { inner: vol }, epochs))
}

#[pymodule]
fn fsld(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(resolved_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(exact_diag, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_by_radius, m)?)?;
    m.add_function(wrap_pyfunction!(cond_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(reference_solve, m)?)?;
    m.add_function(wrap_pyfunction!(fsc, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}

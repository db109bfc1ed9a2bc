use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use num_bigint::BigUint;
use rfsearch::arfam::{self, ArfamConfig, MixedEdgeParams};
use rfsearch::candidates::OpKind;
use rfsearch::config::RunConfig;
use rfsearch::model::Model;
use rfsearch::rf::{self, ErfTarget};
use rfsearch::rng::RngStream;
use rfsearch::Error;

fn value_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::NonFinite(_) | Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_ops(names: &[String]) -> PyResult<Vec<OpKind>> {
    names.iter().map(|n| n.parse::<OpKind>().map_err(PyValueError::new_err)).collect()
}

/// A discrete module architecture: one operation per DAG edge.
#[pyclass(name = "Genotype", module = "pyrfsearch", eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyGenotype {
    inner: arfam::Genotype,
}

#[pymethods]
impl PyGenotype {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyGenotype { inner: text.parse().map_err(value_err)? })
    }

    #[staticmethod]
    fn from_ops(n_nodes: usize, ops: Vec<String>) -> PyResult<Self> {
        let ops = parse_ops(&ops)?;
        Ok(PyGenotype { inner: arfam::Genotype::from_ops(n_nodes, &ops).map_err(value_err)? })
    }

    #[staticmethod]
    fn chain(n_nodes: usize, op: &str) -> PyResult<Self> {
        let op = op.parse::<OpKind>().map_err(PyValueError::new_err)?;
        Ok(PyGenotype { inner: arfam::Genotype::chain(n_nodes, op).map_err(value_err)? })
    }

    #[staticmethod]
    fn random(n_nodes: usize, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, "python/random_genotype");
        Ok(PyGenotype { inner: arfam::Genotype::random(n_nodes, &OpKind::ALL, &mut rng).map_err(value_err)? })
    }

    #[staticmethod]
    fn spp_like() -> Self {
        PyGenotype { inner: arfam::Genotype::spp_like() }
    }

    #[staticmethod]
    fn strip_like() -> Self {
        PyGenotype { inner: arfam::Genotype::strip_like() }
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes
    }

    /// Edges as `(from, to, op)` in canonical order.
    fn edges(&self) -> Vec<(usize, usize, String)> {
        arfam::edge_pairs(self.inner.n_nodes)
            .zip(self.inner.ops())
            .map(|((f, t), op)| (f, t, op.name().to_string()))
            .collect()
    }

    fn skip_count(&self) -> usize {
        self.inner.skip_count()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        let ops: Vec<&str> = self.inner.ops().iter().map(|o| o.name()).collect();
        format!("Genotype(n_nodes={}, ops=[{}])", self.inner.n_nodes, ops.join(", "))
    }
}

/// Theoretical receptive field of every node and of the module output.
#[pyclass(name = "RfProfile", module = "pyrfsearch", skip_from_py_object)]
pub struct PyRfProfile {
    inner: rf::RfProfile,
}

#[pymethods]
impl PyRfProfile {
    #[getter]
    fn output(&self) -> String {
        self.inner.output.to_string()
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.to_string()).collect()
    }

    #[getter]
    fn exact(&self) -> bool {
        self.inner.exact
    }

    /// `(height, width)` of the bounding box, `None` for empty or global.
    fn extent(&self) -> Option<(usize, usize)> {
        self.inner.output.extent()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

#[pyfunction]
pub fn operations() -> Vec<&'static str> {
    OpKind::ALL.iter().map(|o| o.name()).collect()
}

#[pyfunction]
pub fn count_search_space(n_ops: u32, n_nodes: u32) -> BigUint {
    arfam::count_search_space(n_ops, n_nodes)
}

/// Per-edge argmax of α rows, one row per edge in canonical order.
#[pyfunction]
#[pyo3(signature = (alpha, candidates=None))]
pub fn discretize(alpha: Vec<Vec<f64>>, candidates: Option<Vec<String>>) -> PyResult<PyGenotype> {
    let candidates = match candidates {
        Some(c) => parse_ops(&c)?,
        None => OpKind::ALL.to_vec(),
    };
    let n_nodes = (2..64)
        .find(|&n| arfam::edge_count(n) == alpha.len())
        .ok_or_else(|| PyValueError::new_err(format!("{} rows is not an edge count", alpha.len())))?;
    let cfg = ArfamConfig { n_nodes, candidates, ..ArfamConfig::default() };
    let params = MixedEdgeParams::from_rows(&cfg, &alpha).map_err(value_err)?;
    Ok(PyGenotype { inner: arfam::discretize(&params).map_err(value_err)? })
}

#[pyfunction]
pub fn theoretical_rf(genotype: &PyGenotype, height: usize, width: usize) -> PyResult<PyRfProfile> {
    Ok(PyRfProfile { inner: rf::theoretical_rf(&genotype.inner, (height, width)).map_err(value_err)? })
}

/// Mean input-gradient magnitude map of the centre output unit, as rows.
/// `through_module` wraps the DAG in a unit attention module, adding the
/// residual pixel.
#[pyfunction]
#[pyo3(signature = (genotype, height, width, samples=16, seed=0, through_module=true))]
pub fn compute_erf(
    genotype: &PyGenotype,
    height: usize,
    width: usize,
    samples: usize,
    seed: u64,
    through_module: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let g = &genotype.inner;
    let cfg = ArfamConfig { n_nodes: g.n_nodes, candidates: g.candidates.clone(), ..ArfamConfig::default() };
    let (module, store) = rf::probe_module(&cfg);
    let target = if through_module {
        ErfTarget::Module { module: &module, store: &store, genotype: g }
    } else {
        ErfTarget::Spatial(g)
    };
    let map = rf::erf_averaged(target, (height, width), (0, height / 2, width / 2), samples, seed).map_err(value_err)?;
    Ok(map.grid.chunks(width).map(<[f64]>::to_vec).collect())
}

/// Smallest Chebyshev radius around the centre holding `mass` of the map.
#[pyfunction]
pub fn erf_radius(map: Vec<Vec<f64>>, mass: f64) -> PyResult<usize> {
    let h = map.len();
    let w = map.first().map_or(0, Vec::len);
    if map.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged map"));
    }
    let m = rf::ErfMap { h, w, grid: map.concat(), center: (h / 2, w / 2) };
    rf::erf_radius(&m, mass).map_err(value_err)
}

/// Oracle check; returns `(containment_violations, equality_violations)`.
#[pyfunction]
#[pyo3(signature = (genotype, height, width, trials=2, seed=0))]
pub fn verify_rf(genotype: &PyGenotype, height: usize, width: usize, trials: usize, seed: u64) -> PyResult<(usize, usize)> {
    let r = rf::verify_rf(&genotype.inner, (height, width), trials, seed).map_err(value_err)?;
    Ok((r.containment.len(), r.equality.len()))
}

/// Effective config text for `config` (flat `key = value`).
#[pyfunction]
#[pyo3(signature = (config=""))]
pub fn effective_config(config: &str) -> PyResult<String> {
    Ok(RunConfig::parse(config).map_err(value_err)?.to_text())
}

/// Relaxed search; returns the genotype and the telemetry CSV.
#[pyfunction]
#[pyo3(signature = (config="", seed=None))]
pub fn run_search(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<(PyGenotype, String)> {
    let mut cfg = RunConfig::parse(config).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    py.detach(|| {
        let (train, _) = cfg.dataset.load().map_err(value_err)?;
        let model = Model::new(cfg.backbone(), Some(cfg.arfam.clone())).map_err(value_err)?;
        let (g, report) = rfsearch::search::run_search(&model, &train, &cfg.search)
            .map_err(|a| PyRuntimeError::new_err(a.to_string()))?;
        Ok((PyGenotype { inner: g }, report.telemetry_csv(false)))
    })
}

/// Gradient suites and RF oracle; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (instances=50, rf_genotypes=20, seed=0))]
pub fn selfcheck(py: Python<'_>, instances: usize, rf_genotypes: usize, seed: u64) -> PyResult<(bool, String)> {
    py.detach(|| {
        let r = rfsearch::selfcheck::run_selfcheck(instances, rf_genotypes, seed).map_err(value_err)?;
        Ok((r.passed(), r.to_text()))
    })
}

#[pymodule]
fn pyrfsearch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenotype>()?;
    m.add_class::<PyRfProfile>()?;
    m.add_function(wrap_pyfunction!(operations, m)?)?;
    m.add_function(wrap_pyfunction!(count_search_space, m)?)?;
    m.add_function(wrap_pyfunction!(discretize, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_rf, m)?)?;
    m.add_function(wrap_pyfunction!(compute_erf, m)?)?;
    m.add_function(wrap_pyfunction!(erf_radius, m)?)?;
    m.add_function(wrap_pyfunction!(verify_rf, m)?)?;
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}

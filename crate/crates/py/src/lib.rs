//! Python bindings: policy catalogs, the precedent store, prompt rendering
//! and parsing, metrics, and mock-backed collection and judgment.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use guard_core::collector::{Collector, CollectorConfig};
use guard_core::dataset::Dataset;
use guard_core::embedding::{cosine_similarity as cosine, Embedders, EmbeddingVector};
use guard_core::eval::{metrics as compute_metrics, ConfusionCounts};
use guard_core::gateway::{BackendHandle, MockBackend, MockScript};
use guard_core::image::ImageRef;
use guard_core::judge::Judge;
use guard_core::policy::{seed_unsafebench_catalog, Policy, PolicyCatalog};
use guard_core::prompt::{self, Bindings, Template};
use guard_core::retrieval::{RetrievalConfig, RetrievalMode, RetrievalSubject};
use guard_core::store::{self, UtilizationStats};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(precedent_guard, GuardError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    GuardError::new_err(e.to_string())
}

fn runtime() -> &'static tokio::runtime::Runtime {
    static RT: OnceLock<tokio::runtime::Runtime> = OnceLock::new();
    RT.get_or_init(|| {
        tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime")
    })
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mock_backend(script: &str) -> PyResult<BackendHandle> {
    let script = MockScript::load(script).map_err(err)?;
    Ok(BackendHandle::new(MockBackend::from_mock_script(script).map_err(err)?))
}

#[pyclass(name = "PolicyCatalog", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCatalog {
    inner: Arc<PolicyCatalog>,
}

#[pymethods]
impl PyCatalog {
    /// The eleven bundled policies.
    #[staticmethod]
    fn seed() -> Self {
        Self {
            inner: Arc::new(seed_unsafebench_catalog()),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(PolicyCatalog::load(path).map_err(err)?),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(PolicyCatalog::from_json(text).map_err(err)?),
        })
    }

    /// Returns a new catalog; this one is unchanged.
    fn register(&self, id: &str, name: &str, definition: &str) -> PyResult<Self> {
        let policy = Policy::new(id, name, definition).map_err(err)?;
        Ok(Self {
            inner: Arc::new(self.inner.register(policy).map_err(err)?),
        })
    }

    fn restrict(&self, ids: Vec<String>) -> Self {
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        Self {
            inner: Arc::new(self.inner.restrict(&ids)),
        }
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().map(String::from).collect()
    }

    fn definition(&self, id: &str) -> Option<String> {
        self.inner.get(id).map(|p| p.definition.clone())
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn __repr__(&self) -> String {
        format!("PolicyCatalog({})", self.ids().join(", "))
    }
}

#[pyclass(name = "PrecedentDb", frozen)]
pub struct PyDb {
    inner: Arc<store::PrecedentDb>,
}

#[pymethods]
impl PyDb {
    /// An in-memory store.
    #[new]
    fn new() -> Self {
        Self {
            inner: Arc::new(store::PrecedentDb::in_memory()),
        }
    }

    /// Opens a file-backed store and takes its writer lock.
    #[staticmethod]
    fn open(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(store::PrecedentDb::open(path).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load_read_only(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(store::PrecedentDb::load_read_only(path).map_err(err)?),
        })
    }

    fn get<'py>(&self, py: Python<'py>, id: u64) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.inner.get(id).map(|p| to_py(py, &p)).transpose()
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records())
    }

    fn write_to(&self, path: &str) -> PyResult<()> {
        self.inner.write_to(path).map_err(err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    let a = EmbeddingVector::new(a).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let b = EmbeddingVector::new(b).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cosine(&a, &b).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn template_names() -> Vec<&'static str> {
    Template::ALL.iter().map(|t| t.file_stem()).collect()
}

#[pyfunction]
fn render_template(name: &str, bindings: HashMap<String, String>) -> PyResult<String> {
    let template = Template::from_stem(name).ok_or_else(|| PyValueError::new_err(format!("unknown template {name:?}")))?;
    let bindings: Bindings = bindings.into_iter().collect();
    prompt::render(template, &bindings).map_err(err)
}

/// `"PV"` or `"NON_PV"`.
#[pyfunction]
fn parse_verdict(reply: &str) -> PyResult<&'static str> {
    Ok(prompt::parse_verdict(reply).map_err(err)?.label.as_str())
}

#[pyfunction]
fn parse_rationale(reply: &str) -> PyResult<String> {
    Ok(prompt::parse_rationale(reply).map_err(err)?.rationale)
}

#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, tn))]
fn metrics<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyAny>> {
    let m = compute_metrics(&ConfusionCounts::new(tp, fp, fn_, tn)).map_err(err)?;
    to_py(py, &m)
}

#[pyfunction]
fn utilization<'py>(py: Python<'py>, attempted: usize, first_pass: usize, revised: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &UtilizationStats::from_counts(attempted, first_pass, revised).map_err(err)?)
}

/// Runs collection over a dataset file with a mock chat script and the
/// offline hash embedders. Returns `{"utilization": ..., "outcomes": [...]}`.
#[pyfunction]
#[pyo3(signature = (db, catalog, dataset, mock_script, critique_revise=true, parallelism=4, dims=512))]
#[allow(clippy::too_many_arguments)]
fn collect<'py>(
    py: Python<'py>,
    db: &PyDb,
    catalog: &PyCatalog,
    dataset: &str,
    mock_script: &str,
    critique_revise: bool,
    parallelism: usize,
    dims: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let dataset = Dataset::load(dataset).map_err(err)?;
    dataset.validate(&catalog.inner).map_err(err)?;
    let collector = Collector::new(mock_backend(mock_script)?, catalog.inner.clone())
        .with_embedders(Embedders::hashed(dims))
        .with_config(CollectorConfig {
            critique_revise,
            ..CollectorConfig::default()
        });
    let store = db.inner.clone();
    let result = py.detach(|| {
        runtime().block_on(collector.collect_batch(&dataset.examples, &store, parallelism.max(1)))
    });
    let outcomes: Vec<serde_json::Value> = result
        .outcomes
        .iter()
        .map(|o| match o {
            Ok(o) => serde_json::to_value(o).unwrap_or_default(),
            Err(e) => serde_json::json!({"error": e.to_string()}),
        })
        .collect();
    to_py(py, &serde_json::json!({"utilization": result.stats, "outcomes": outcomes}))
}

/// Judges one image against the store with a mock chat script and the
/// offline hash embedders. `threshold=None` uses the closest precedent.
#[pyfunction]
#[pyo3(signature = (db, catalog, image, mock_script, threshold=Some(0.8), subject="image", dims=512))]
#[allow(clippy::too_many_arguments)]
fn judge<'py>(
    py: Python<'py>,
    db: &PyDb,
    catalog: &PyCatalog,
    image: &str,
    mock_script: &str,
    threshold: Option<f64>,
    subject: &str,
    dims: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let subject = match subject {
        "image" => RetrievalSubject::Image,
        "text" => RetrievalSubject::Text,
        other => return Err(PyValueError::new_err(format!("subject must be image or text, got {other:?}"))),
    };
    let mode = match threshold {
        Some(min_sim) if (-1.0..=1.0).contains(&min_sim) => RetrievalMode::Threshold { min_sim },
        Some(t) => return Err(PyValueError::new_err(format!("threshold {t} outside [-1, 1]"))),
        None => RetrievalMode::Closest,
    };
    let cfg = RetrievalConfig {
        subject,
        mode,
        ..RetrievalConfig::default()
    };
    let judge = Judge::new(mock_backend(mock_script)?, Embedders::hashed(dims), catalog.inner.clone(), cfg);
    let store = db.inner.clone();
    let image = ImageRef::new(image);
    let verdict = py
        .detach(|| runtime().block_on(judge.judge_ref(&image, &store)))
        .map_err(err)?;
    to_py(py, &verdict)
}

#[pymodule]
pub fn precedent_guard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GuardError", m.py().get_type::<GuardError>())?;
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyDb>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(template_names, m)?)?;
    m.add_function(wrap_pyfunction!(render_template, m)?)?;
    m.add_function(wrap_pyfunction!(parse_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rationale, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(utilization, m)?)?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(judge, m)?)?;
    Ok(())
}

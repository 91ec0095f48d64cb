//! Python module `slayr`. Structured values cross the boundary as plain
//! dicts and lists, converted through the `json` module.

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use slayr_core::conditioning::{ConditionRequest, DEFAULT_LAMBDA};
use slayr_core::dataset::Scene;
use slayr_core::embedding::{EmbeddingTable, PcaProjector, Vocabulary, NULL_LABEL};
use slayr_core::flow::{Optimizer, Schedule, TrainConfig, VelocityNetConfig, DEFAULT_STEPS};
use slayr_core::metrics::group_scenes;
use slayr_core::metrics::report::{evaluate as evaluate_groups, EvalConfig};
use slayr_core::synth::{generate_dataset, synthetic_table as make_table, SceneGrammar};

fn err(e: slayr_core::Error) -> PyErr {
    match e {
        slayr_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        slayr_core::Error::UnknownLabel(l) => PyKeyError::new_err(l),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn grammar(name_or_path: &str) -> PyResult<SceneGrammar> {
    if std::path::Path::new(name_or_path).exists() {
        SceneGrammar::load(name_or_path).map_err(err)
    } else {
        SceneGrammar::bundled(name_or_path).map_err(err)
    }
}

/// Label and prompt embeddings.
#[pyclass(name = "EmbeddingTable", module = "slayr", skip_from_py_object)]
#[derive(Clone)]
struct PyTable {
    inner: EmbeddingTable,
}

#[pymethods]
impl PyTable {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: EmbeddingTable::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn vector(&self, label: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.vector(label).map_err(err)?.to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Trained network with its statistics and vocabulary.
#[pyclass(name = "Checkpoint", module = "slayr")]
struct PyCheckpoint {
    inner: slayr_core::flow::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: slayr_core::flow::Checkpoint::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: slayr_core::flow::Checkpoint::from_bytes(data).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(err)
    }

    /// Non-null labels known to the vocabulary.
    fn labels(&self) -> Vec<String> {
        self.inner.vocab.table.labels().iter().filter(|l| *l != NULL_LABEL).cloned().collect()
    }

    /// Reduced embedding of `label`.
    fn embed(&self, label: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.vocab.embed(label).map_err(err)?.to_vec())
    }

    /// `k` nearest labels by cosine similarity as `(label, similarity)`.
    #[pyo3(signature = (embedding, k = 5))]
    fn decode(&self, embedding: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64)>> {
        self.inner.vocab.nearest(&embedding, k).map_err(err)
    }

    /// `n` layouts as scene dicts; layout `i` uses seed `seed + i`.
    #[pyo3(signature = (prompt, n = 1, seed = 0, steps = DEFAULT_STEPS))]
    fn generate(&self, py: Python<'_>, prompt: &str, n: usize, seed: u64, steps: usize) -> PyResult<Py<PyAny>> {
        let scenes = py.detach(|| self.inner.generate(prompt, n, seed, steps)).map_err(err)?;
        to_py(py, &scenes)
    }

    /// One layout for a conditioning request dict with keys `prompt`,
    /// `tokens`, `constraints`, `lambda`, `T`, `seed`, `literal_signs`.
    #[pyo3(signature = (request, steps = DEFAULT_STEPS, default_lambda = DEFAULT_LAMBDA))]
    fn generate_conditioned(
        &self,
        py: Python<'_>,
        request: &Bound<'_, PyAny>,
        steps: usize,
        default_lambda: f64,
    ) -> PyResult<Py<PyAny>> {
        let req: ConditionRequest = from_py(request)?;
        let scene = py.detach(|| self.inner.generate_conditioned(&req, steps, default_lambda)).map_err(err)?;
        to_py(py, &scene)
    }
}

/// Scenes from a bundled grammar name or a grammar file path.
#[pyfunction]
#[pyo3(signature = (grammar_name, n, seed = None))]
fn synth(py: Python<'_>, grammar_name: &str, n: usize, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let g = grammar(grammar_name)?;
    let scenes = py.detach(|| generate_dataset(&g, n, seed.unwrap_or(g.seed))).map_err(err)?;
    to_py(py, &scenes)
}

/// Random low-rank table covering the labels and categories of `grammars`.
#[pyfunction]
#[pyo3(signature = (grammars, dim = 32, rank = 8, seed = 0))]
fn synthetic_table(grammars: Vec<String>, dim: usize, rank: usize, seed: u64) -> PyResult<PyTable> {
    let gs = grammars.iter().map(|g| grammar(g)).collect::<PyResult<Vec<_>>>()?;
    let labels: Vec<String> = gs.iter().flat_map(|g| g.label_names()).collect();
    let prompts: Vec<String> = gs.iter().map(|g| g.category.clone()).collect();
    Ok(PyTable { inner: make_table(&labels, &prompts, dim, rank, seed).map_err(err)? })
}

/// Trains a desk-sized network on scene dicts.
#[pyfunction]
#[pyo3(signature = (
    scenes, table, d = 8, j = 30, epochs = 2000, lr = 0.0005, batch_size = 32, seed = 0,
    width = None, blocks = None, heads = None, optimizer = "sgd", schedule = "constant"
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    scenes: &Bound<'_, PyAny>,
    table: &PyTable,
    d: usize,
    j: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    width: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    optimizer: &str,
    schedule: &str,
) -> PyResult<PyCheckpoint> {
    let scenes: Vec<Scene> = from_py(scenes)?;
    let optimizer = match optimizer {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam,
        o => return Err(PyValueError::new_err(format!("unknown optimizer {o:?}"))),
    };
    let schedule = match schedule {
        "constant" => Schedule::Constant,
        "cosine" => Schedule::Cosine,
        s => return Err(PyValueError::new_err(format!("unknown schedule {s:?}"))),
    };
    let projector = PcaProjector::fit(&table.inner, d).map_err(err)?;
    let vocab = Vocabulary::new(table.inner.clone(), projector).map_err(err)?;
    let mut cfg = VelocityNetConfig::desk(d, j, vocab.full_dim());
    cfg.seed = seed;
    cfg.model_width = width.unwrap_or(cfg.model_width);
    cfg.blocks = blocks.unwrap_or(cfg.blocks);
    cfg.heads = heads.unwrap_or(cfg.heads);
    let tc = TrainConfig { epochs, learning_rate: lr, batch_size, seed, optimizer, schedule };
    let ckpt = py.detach(|| slayr_core::pipeline::train(&scenes, vocab, cfg, tc, &mut |_| {})).map_err(err)?;
    Ok(PyCheckpoint { inner: ckpt })
}

/// Layout metrics of generated scenes against reference scenes.
#[pyfunction]
#[pyo3(signature = (generated, reference, config = None))]
fn evaluate(
    py: Python<'_>,
    generated: &Bound<'_, PyAny>,
    reference: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let generated: Vec<Scene> = from_py(generated)?;
    let reference: Vec<Scene> = from_py(reference)?;
    let cfg: EvalConfig = match config {
        Some(c) => from_py(c)?,
        None => EvalConfig::default(),
    };
    let report =
        py.detach(|| evaluate_groups(&group_scenes(&generated), &group_scenes(&reference), &cfg)).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn slayr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTable>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_table, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("DEFAULT_STEPS", DEFAULT_STEPS)?;
    m.add("DEFAULT_LAMBDA", DEFAULT_LAMBDA)?;
    Ok(())
}

//! Python module `crossmodal`.
//!
//! Matrices cross the boundary as lists of rows; structured results come
//! back as plain dicts.

use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crossmodal::analysis::{
    codeword_stats, encode, evaluate as evaluate_encoding, label_agreement, partition_statistic, LabelSource,
    DEFAULT_PARTITION_THRESHOLD,
};
use crossmodal::codebook::Codebook as CoreCodebook;
use crossmodal::data::{generate, GeneratorConfig, PairedDataset};
use crossmodal::diagnostics::check_gradients;
use crossmodal::losses;
use crossmodal::numerics::{Graph, Tensor};
use crossmodal::training::{self, Checkpoint as CoreCheckpoint, Init, Phase, TrainConfig};
use crossmodal::{Error, Modality};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Index { .. } => PyIndexError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::NonFinite(_) | Error::Undefined(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for crossmodal::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).py()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Serializes through JSON into native Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn parse_modality(name: &str) -> PyResult<Modality> {
    match name {
        "a" | "A" => Ok(Modality::A),
        "b" | "B" => Ok(Modality::B),
        other => Err(PyValueError::new_err(format!("modality must be 'a' or 'b', got {other:?}"))),
    }
}

/// Paired feature sequences with concept labels.
#[pyclass(module = "crossmodal", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: PairedDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic dataset; keyword arguments override the generator defaults.
    #[staticmethod]
    #[pyo3(signature = (**kwargs))]
    fn generate(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = serde_json::to_value(GeneratorConfig::default()).expect("serializable");
        if let Some(kw) = kwargs {
            overlay(&mut cfg, from_py(kw.as_any())?);
        }
        let cfg: GeneratorConfig = serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: generate(&cfg).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: PairedDataset::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        Ok(pyo3::types::PyBytes::new(py, &self.inner.to_bytes().py()?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: PairedDataset::from_bytes(data).py()? })
    }

    /// First `n` pairs and the rest.
    fn split(&self, n: usize) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split_at(n).py()?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.inner.d_in
    }

    #[getter]
    fn concepts(&self) -> Vec<String> {
        self.inner.concepts.iter().map(|c| c.name.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.instances.iter().map(|i| i.label).collect()
    }

    /// Feature rows of pair `index` in `modality` ("a" or "b").
    fn features(&self, index: usize, modality: &str) -> PyResult<Vec<Vec<f32>>> {
        let inst = self
            .inner
            .instances
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("pair {index} out of range")))?;
        let s = inst.sequence(parse_modality(modality)?);
        Ok((0..s.len()).map(|l| s.row(l, self.inner.d_in).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(pairs={}, concepts={}, d_in={})",
            self.inner.len(),
            self.inner.num_concepts(),
            self.inner.d_in
        )
    }
}

/// Trained model state.
#[pyclass(module = "crossmodal", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        Ok(pyo3::types::PyBytes::new(py, &self.inner.to_bytes().py()?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::from_bytes(data).py()? })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn codewords(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.model.codebook.codewords())
    }

    /// Embeddings `(z_a, z_b)` of every pair, in evaluation mode.
    fn embed(&self, dataset: &Dataset) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let enc = encode(&self.inner.model, &dataset.inner, self.inner.config.flags()).py()?;
        Ok((to_rows(&enc.z_a), to_rows(&enc.z_b)))
    }

    /// Codeword index of every position of every pair in `modality`.
    fn codes(&self, dataset: &Dataset, modality: &str) -> PyResult<Vec<Vec<usize>>> {
        let m = parse_modality(modality)?;
        let enc = encode(&self.inner.model, &dataset.inner, self.inner.config.flags()).py()?;
        Ok(enc.codes(m).iter().map(|a| a.codes.clone()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(phase={}, epoch={}, step={})",
            self.inner.config.phase, self.inner.epoch, self.inner.step
        )
    }
}

/// Shared codebook with moving-average updates.
#[pyclass(module = "crossmodal")]
struct Codebook {
    inner: CoreCodebook,
}

#[pymethods]
impl Codebook {
    #[new]
    #[pyo3(signature = (size, dim, decay = 0.99, reset_patience = 100, seed = 0))]
    fn new(size: usize, dim: usize, decay: f64, reset_patience: u64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCodebook::init(size, dim, decay, reset_patience, seed).py()?,
        })
    }

    #[getter]
    fn codewords(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.codewords())
    }

    #[getter]
    fn inactive_steps(&self) -> Vec<u64> {
        self.inner.inactive_steps().to_vec()
    }

    fn nearest(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.nearest_rows(&matrix(&rows)?).py()
    }

    /// Per-row softmin distribution over codewords.
    fn probabilities(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let h = g.constant(matrix(&rows)?);
        let p = self.inner.code_probabilities(&mut g, h).py()?;
        Ok(to_rows(g.value(p)))
    }

    fn ema_update(&mut self, codes: Vec<usize>, vectors: Vec<Vec<f64>>) -> PyResult<()> {
        let t = if vectors.is_empty() {
            Tensor::zeros(&[0, self.inner.dim()])
        } else {
            matrix(&vectors)?
        };
        self.inner.ema_update(&codes, &t).py()
    }

    /// Re-seeds stale codewords; returns `(codeword, source)` pairs.
    #[pyo3(signature = (seed = 0))]
    fn reset_dead(&mut self, seed: u64) -> Vec<(usize, usize)> {
        self.inner.reset_dead(&mut ChaCha8Rng::seed_from_u64(seed)).reset
    }
}

fn scalar_loss(build: impl FnOnce(&mut Graph) -> crossmodal::Result<crossmodal::numerics::Var>) -> PyResult<f64> {
    let mut g = Graph::new();
    let v = build(&mut g).py()?;
    Ok(g.value(v).item())
}

/// Margin softmax loss of paired embeddings.
#[pyfunction]
#[pyo3(signature = (z_a, z_b, margin = losses::DEFAULT_MARGIN, symmetric = false))]
fn mms_loss(z_a: Vec<Vec<f64>>, z_b: Vec<Vec<f64>>, margin: f64, symmetric: bool) -> PyResult<f64> {
    let (a, b) = (matrix(&z_a)?, matrix(&z_b)?);
    scalar_loss(|g| {
        let (a, b) = (g.constant(a), g.constant(b));
        losses::mms_loss(g, a, b, margin, symmetric)
    })
}

/// Code matching loss of paired codeword distributions.
#[pyfunction]
#[pyo3(signature = (p_a, p_b, symmetric = false))]
fn cmcm_loss(p_a: Vec<Vec<f64>>, p_b: Vec<Vec<f64>>, symmetric: bool) -> PyResult<f64> {
    let (a, b) = (matrix(&p_a)?, matrix(&p_b)?);
    scalar_loss(|g| {
        let (a, b) = (g.constant(a), g.constant(b));
        losses::cmcm_loss(g, a, b, symmetric)
    })
}

#[pyfunction]
fn code_similarity(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    losses::code_similarity(&p, &q).py()
}

/// Trains one phase. `config` keys override the phase defaults; `init` is
/// a warm-start checkpoint, or the run to continue when `resume` is set.
#[pyfunction]
#[pyo3(signature = (dataset, phase = "full", config = None, init = None, resume = false))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    phase: &str,
    config: Option<&Bound<'py, PyAny>>,
    init: Option<&Checkpoint>,
    resume: bool,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let phase: Phase = phase.parse().py()?;
    let base = match phase {
        Phase::Warmstart => TrainConfig::warmstart(),
        Phase::Full => TrainConfig::full(),
    };
    let mut cfg = serde_json::to_value(&base).expect("serializable");
    let explicit_model = match config {
        Some(c) => {
            let top = from_py(c)?;
            let has_model = top.get("model").is_some();
            overlay(&mut cfg, top);
            has_model
        }
        None => false,
    };
    cfg["phase"] = Value::String(phase.to_string());
    let mut cfg: TrainConfig = serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let init = match init {
        None => {
            if !explicit_model {
                cfg.model.encoder.d_in = dataset.inner.d_in;
            }
            Init::Fresh
        }
        Some(ck) => {
            if !explicit_model {
                cfg.model = ck.inner.config.model.clone();
            }
            if resume {
                Init::Resume(ck.inner.clone())
            } else {
                Init::WarmStart(ck.inner.clone())
            }
        }
    };
    let (ck, trace) = py.detach(|| training::train(&dataset.inner, &cfg, init)).py()?;
    Ok((Checkpoint { inner: ck }, to_py(py, &trace)?))
}

/// Retrieval metrics in both directions.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, checkpoint: &Checkpoint, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
    let enc = encode(&checkpoint.inner.model, &dataset.inner, checkpoint.inner.config.flags()).py()?;
    to_py(py, &evaluate_encoding(&enc).py()?)
}

/// Partition statistic, label agreement and active codeword count.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, partition_threshold = DEFAULT_PARTITION_THRESHOLD))]
fn analyze<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    partition_threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let model = &checkpoint.inner.model;
    let enc = encode(model, &dataset.inner, checkpoint.inner.config.flags()).py()?;
    let stats = codeword_stats(model, &dataset.inner, &enc, LabelSource::Instance).py()?;
    let summary = serde_json::json!({
        "partition_statistic": partition_statistic(&stats, partition_threshold).py()?,
        "label_agreement": label_agreement(&stats).ok(),
        "active_codewords": (0..stats.size).filter(|&v| stats.total_occurrence(v) > 0).count(),
    });
    to_py(py, &summary)
}

/// Largest relative error of the finite-difference gradient audit.
#[pyfunction]
#[pyo3(signature = (batch = 3, codebook_size = 16, seed = 0))]
fn grad_check(batch: usize, codebook_size: usize, seed: u64) -> PyResult<f64> {
    Ok(check_gradients(seed, batch, codebook_size).py()?.max_rel_error())
}

#[pymodule]
#[pyo3(name = "crossmodal")]
fn crossmodal_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Codebook>()?;
    m.add_function(wrap_pyfunction!(mms_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmcm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(code_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}

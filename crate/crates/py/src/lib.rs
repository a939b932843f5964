//! Python module `ctran`: datasets, models, training, evaluation and
//! label-state interventions. Structured results cross the boundary as
//! Python dicts decoded from the same JSON the CLI and HTTP service emit.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ctran_core::data::{self, SynthSpec};
use ctran_core::eval::{evaluate as run_eval, EvalProtocol, ProtocolMode};
use ctran_core::intervene::{AnyModel, FeatureGrid, InterveneRequest, Intervener, LabelStateEntry, RequestError};
use ctran_core::model::{checkpoint, export_label_embeddings, CTran, LabelState, ModelConfig};
use ctran_core::tensor::Dtype;
use ctran_core::train::{train as fit, MaskSpec, TrainConfig};

fn core_err(e: ctran_core::Error) -> PyErr {
    use ctran_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Shape { .. } | E::Config(_) | E::Protocol(_) | E::Format { .. } | E::Version { .. } | E::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn request_err(e: RequestError) -> PyErr {
    match e {
        RequestError::Model(inner) => core_err(inner),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Dataset", module = "ctran", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(core_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.label_names.clone()
    }

    fn sample_ids(&self) -> Vec<u64> {
        self.inner.samples.iter().map(|s| s.id).collect()
    }

    fn targets(&self, sample_id: u64) -> PyResult<Vec<u8>> {
        self.sample(sample_id).map(|s| s.targets.clone())
    }

    /// `(shape, flat row-major values)` of a sample's input grid.
    fn features(&self, sample_id: u64) -> PyResult<(Vec<usize>, Vec<f32>)> {
        self.sample(sample_id)
            .map(|s| (s.input.shape().to_vec(), s.input.data().to_vec()))
    }

    fn label_marginals(&self) -> Vec<f64> {
        self.inner.label_marginals()
    }
}

impl PyDataset {
    fn sample(&self, id: u64) -> PyResult<&data::Sample> {
        self.inner
            .sample(id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown sample id {id}")))
    }
}

/// Planted-pairs generator spec as a dict.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn planted_spec(py: Python<'_>, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    to_py_json(py, &SynthSpec::planted(seed))
}

/// Returns `(train, test)`. `spec` is a JSON string; the planted preset is
/// used when omitted.
#[pyfunction]
#[pyo3(signature = (spec=None, seed=None, num_train=None, num_test=None))]
fn generate(
    spec: Option<&str>,
    seed: Option<u64>,
    num_train: Option<usize>,
    num_test: Option<usize>,
) -> PyResult<(PyDataset, PyDataset)> {
    let mut s = match spec {
        Some(text) => serde_json::from_str::<SynthSpec>(text).map_err(json_err)?,
        None => SynthSpec::planted(0),
    };
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = num_train {
        s.num_train = v;
    }
    if let Some(v) = num_test {
        s.num_test = v;
    }
    let splits = data::generate(&s).map_err(core_err)?;
    Ok((PyDataset { inner: splits.train }, PyDataset { inner: splits.test }))
}

#[pyclass(name = "Model", module = "ctran", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    pub inner: AnyModel,
}

fn parse_states(states: HashMap<String, String>) -> PyResult<Vec<LabelStateEntry>> {
    let mut entries: Vec<LabelStateEntry> = states
        .into_iter()
        .map(|(label, s)| {
            let state: LabelState = s.parse().map_err(core_err)?;
            Ok(LabelStateEntry { label, state })
        })
        .collect::<PyResult<_>>()?;
    entries.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(entries)
}

#[pymethods]
impl PyModel {
    /// Fresh model from a JSON `ModelConfig`. `dtype` is `"f32"` or `"f64"`.
    #[new]
    #[pyo3(signature = (config, label_names=None, seed=0, dtype="f32"))]
    fn new(config: &str, label_names: Option<Vec<String>>, seed: u64, dtype: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(json_err)?;
        let inner = match dtype {
            "f32" => AnyModel::F32(CTran::new(cfg, label_names, seed).map_err(core_err)?),
            "f64" => AnyModel::F64(CTran::new(cfg, label_names, seed).map_err(core_err)?),
            other => return Err(PyValueError::new_err(format!("dtype `{other}` is not f32 or f64"))),
        };
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: AnyModel::load(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match &self.inner {
            AnyModel::F32(m) => checkpoint::save(m, path),
            AnyModel::F64(m) => checkpoint::save(m, path),
        }
        .map_err(core_err)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    fn digest(&self) -> String {
        checkpoint::hex_digest(&match &self.inner {
            AnyModel::F32(m) => checkpoint::to_bytes(m),
            AnyModel::F64(m) => checkpoint::to_bytes(m),
        })
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.label_names().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner.dtype() {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, self.inner.config())
    }

    /// Probabilities for one input grid given `{label: state}` evidence.
    #[pyo3(signature = (shape, data, states=None))]
    fn predict(&self, shape: Vec<usize>, data: Vec<f32>, states: Option<HashMap<String, String>>) -> PyResult<Vec<f64>> {
        let iv = Intervener::new(self.inner.clone(), None).map_err(core_err)?;
        let req = InterveneRequest {
            sample_id: None,
            features: Some(FeatureGrid { shape, data }),
            states: parse_states(states.unwrap_or_default())?,
        };
        let resp = iv.run(&req).map_err(request_err)?;
        Ok(resp.labels.iter().map(|l| l.probability).collect())
    }

    /// Runs an intervention request (JSON string) and returns the response dict.
    #[pyo3(signature = (request, dataset=None))]
    fn intervene<'py>(&self, py: Python<'py>, request: &str, dataset: Option<&PyDataset>) -> PyResult<Bound<'py, PyAny>> {
        let req: InterveneRequest = serde_json::from_str(request).map_err(json_err)?;
        let iv = Intervener::new(self.inner.clone(), dataset.map(|d| d.inner.clone())).map_err(core_err)?;
        let resp = iv.run(&req).map_err(request_err)?;
        to_py_json(py, &resp)
    }

    /// Writes the label embedding matrix and its `.labels.txt` name list.
    fn export_label_embeddings(&self, path: &str) -> PyResult<()> {
        match &self.inner {
            AnyModel::F32(m) => export_label_embeddings(m, path),
            AnyModel::F64(m) => export_label_embeddings(m, path),
        }
        .map(|_| ())
        .map_err(core_err)
    }
}

/// Trains a copy of `model`; `config` is a JSON `TrainConfig` (missing
/// fields take defaults). Returns the final model.
#[pyfunction]
#[pyo3(signature = (model, dataset, config="{}", mask_seed=0, mask_min_fraction=0.25))]
fn train(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    config: &str,
    mask_seed: u64,
    mask_min_fraction: f64,
) -> PyResult<PyModel> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(json_err)?;
    let mask = MaskSpec {
        num_labels: model.inner.config().num_labels,
        min_fraction: mask_min_fraction,
        seed: mask_seed,
    };
    let m = model.inner.clone();
    let ds = &dataset.inner;
    let inner = py
        .detach(|| match &m {
            AnyModel::F32(m) => fit(m, ds, &cfg, &mask).map(|o| AnyModel::F32(o.model)),
            AnyModel::F64(m) => fit(m, ds, &cfg, &mask).map(|o| AnyModel::F64(o.model)),
        })
        .map_err(core_err)?;
    Ok(PyModel { inner })
}

/// Evaluation report dict. `known_groups` selects the extra-label protocol,
/// otherwise `epsilon > 0` selects partial and `0` regular inference.
#[pyfunction]
#[pyo3(signature = (model, dataset, epsilon=0.0, seed=0, known_groups=None, threshold=0.5, top_k=3))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    epsilon: f64,
    seed: u64,
    known_groups: Option<Vec<String>>,
    threshold: f64,
    top_k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = match known_groups {
        Some(g) => ProtocolMode::Extra { known_groups: g },
        None if epsilon > 0.0 => ProtocolMode::Partial { epsilon },
        None => ProtocolMode::Regular,
    };
    let protocol = EvalProtocol {
        threshold,
        top_k,
        ..EvalProtocol::new(mode, seed)
    };
    protocol.validate(dataset.inner.partition.as_ref()).map_err(core_err)?;
    let ds = &dataset.inner;
    let report = py
        .detach(|| match &model.inner {
            AnyModel::F32(m) => run_eval(m, ds, &protocol),
            AnyModel::F64(m) => run_eval(m, ds, &protocol),
        })
        .map_err(core_err)?;
    to_py_json(py, &report)
}

/// Logistic probability in the open unit interval, evaluated in 64-bit.
#[pyfunction]
fn prob_from_logit(x: f64) -> f64 {
    ctran_core::model::prob_from_logit(x)
}

#[pymodule]
pub fn ctran(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(planted_spec, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(prob_from_logit, m)?)?;
    Ok(())
}

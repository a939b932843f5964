//! Label-state intervention: resolve a request naming a sample (or carrying
//! an inline feature grid) plus label states, run one eval-mode forward pass
//! and report current and all-unknown baseline probabilities.
//!
//! The CLI `predict` command and the HTTP service both go through
//! [`Intervener::run`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{checkpoint, CTran, LabelState, ModelConfig, Prediction, StateAssignment};
use crate::tensor::{Dtype, Tensor};

/// Inline input grid, row-major over `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGrid {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelStateEntry {
    pub label: String,
    pub state: LabelState,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureGrid>,
    /// Labels not listed stay unknown.
    #[serde(default)]
    pub states: Vec<LabelStateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOutput {
    pub name: String,
    pub probability: f64,
    pub state_echo: LabelState,
}

/// Labels in the model's canonical order; `baseline[i]` is label `i` with
/// every state unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    #[serde(default)]
    pub sample_id: Option<u64>,
    pub labels: Vec<LabelOutput>,
    pub baseline: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("unknown label `{name}`; valid labels: {}", valid.join(", "))]
    UnknownLabel { name: String, valid: Vec<String> },

    #[error("label `{0}` is listed more than once")]
    DuplicateLabel(String),

    #[error("unknown sample id {0}")]
    UnknownSample(u64),

    #[error("request must give exactly one of `sample_id` or `features`")]
    InputChoice,

    #[error("sample_id given but no dataset is loaded")]
    NoDataset,

    #[error("features: shape {found:?} does not match model input {expected:?}")]
    InputShape { found: Vec<usize>, expected: Vec<usize> },

    #[error("features: {0}")]
    InvalidFeatures(String),

    #[error(transparent)]
    Model(#[from] Error),
}

impl RequestError {
    /// True for errors caused by the request content rather than the server.
    pub fn is_client_error(&self) -> bool {
        !matches!(self, RequestError::Model(_))
    }
}

/// A loaded model at its stored element width.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(CTran<f32>),
    F64(CTran<f64>),
}

impl AnyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(match checkpoint::peek(path)?.dtype {
            Dtype::F32 => AnyModel::F32(checkpoint::load(path)?),
            Dtype::F64 => AnyModel::F64(checkpoint::load(path)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    pub fn label_names(&self) -> &[String] {
        match self {
            AnyModel::F32(m) => &m.label_names,
            AnyModel::F64(m) => &m.label_names,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            AnyModel::F32(_) => Dtype::F32,
            AnyModel::F64(_) => Dtype::F64,
        }
    }

    pub fn predict_batch(&self, inputs: &[&Tensor<f32>], assignments: &[StateAssignment]) -> Result<Vec<Prediction>> {
        match self {
            AnyModel::F32(m) => m.predict_batch(inputs, assignments),
            AnyModel::F64(m) => m.predict_batch(inputs, assignments),
        }
    }
}

impl From<CTran<f32>> for AnyModel {
    fn from(m: CTran<f32>) -> Self {
        AnyModel::F32(m)
    }
}

impl From<CTran<f64>> for AnyModel {
    fn from(m: CTran<f64>) -> Self {
        AnyModel::F64(m)
    }
}

/// Model plus optional sample catalog. Immutable once built.
#[derive(Debug)]
pub struct Intervener {
    model: AnyModel,
    dataset: Option<Dataset>,
}

impl Intervener {
    pub fn new(model: AnyModel, dataset: Option<Dataset>) -> Result<Self> {
        if let Some(ds) = &dataset {
            ds.check_compatible(model.config())?;
        }
        Ok(Intervener { model, dataset })
    }

    pub fn model(&self) -> &AnyModel {
        &self.model
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.dataset.as_ref()
    }

    /// Maps named states onto the canonical label order.
    pub fn assignment(&self, states: &[LabelStateEntry]) -> Result<StateAssignment, RequestError> {
        let names = self.model.label_names();
        let mut assignment = StateAssignment::all_unknown(names.len());
        let mut seen = vec![false; names.len()];
        for entry in states {
            let i = names
                .iter()
                .position(|n| n == &entry.label)
                .ok_or_else(|| RequestError::UnknownLabel {
                    name: entry.label.clone(),
                    valid: names.to_vec(),
                })?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(RequestError::DuplicateLabel(entry.label.clone()));
            }
            assignment.set(i, entry.state);
        }
        Ok(assignment)
    }

    fn input(&self, req: &InterveneRequest) -> Result<Tensor<f32>, RequestError> {
        let config = self.model.config();
        match (req.sample_id, &req.features) {
            (Some(id), None) => {
                let ds = self.dataset.as_ref().ok_or(RequestError::NoDataset)?;
                let s = ds.sample(id).ok_or(RequestError::UnknownSample(id))?;
                Ok(s.input.clone())
            }
            (None, Some(grid)) => {
                let expected = config.input_shape();
                if grid.shape != expected {
                    return Err(RequestError::InputShape {
                        found: grid.shape.clone(),
                        expected,
                    });
                }
                if grid.data.iter().any(|v| !v.is_finite()) {
                    return Err(RequestError::InvalidFeatures("non-finite value".into()));
                }
                Tensor::new(grid.shape.clone(), grid.data.clone())
                    .map_err(|_| RequestError::InvalidFeatures(format!("{} values for shape {:?}", grid.data.len(), grid.shape)))
            }
            // The no-image ablation ignores its input entirely.
            (None, None) if config.no_image => Ok(Tensor::zeros(config.input_shape())),
            _ => Err(RequestError::InputChoice),
        }
    }

    pub fn run(&self, req: &InterveneRequest) -> Result<InterveneResponse, RequestError> {
        let assignment = self.assignment(&req.states)?;
        let input = self.input(req)?;
        let baseline = StateAssignment::all_unknown(assignment.len());
        let mut preds = self
            .model
            .predict_batch(&[&input, &input], &[assignment.clone(), baseline])?;
        let base = preds.pop().expect("two predictions").probs;
        let current = preds.pop().expect("two predictions").probs;
        let labels = self
            .model
            .label_names()
            .iter()
            .zip(current)
            .zip(assignment.states())
            .map(|((name, probability), &state)| LabelOutput {
                name: name.clone(),
                probability,
                state_echo: state,
            })
            .collect();
        Ok(InterveneResponse {
            sample_id: req.sample_id,
            labels,
            baseline: base,
        })
    }
}

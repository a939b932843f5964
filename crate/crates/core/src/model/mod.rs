//! The label-state transformer: configuration, parameters, forward pass and
//! checkpoints.

pub mod checkpoint;
mod encoder;
mod export;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use encoder::{
    classify, embed_inputs, encode, encoder_layer, feature_tokens, forward, BatchLayout, ForwardOutput,
    LayerOutput,
};
pub use export::{export_label_embeddings, read_label_embeddings};
pub use params::{BackboneParams, ClassifierHeads, CTranParams, EncoderLayerParams, LayerVars, ParamVars};

/// Evidence state attached to a label token. Row order of the state table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelState {
    Unknown,
    Negative,
    Positive,
}

impl LabelState {
    pub fn row(self) -> usize {
        match self {
            LabelState::Unknown => 0,
            LabelState::Negative => 1,
            LabelState::Positive => 2,
        }
    }

    /// Known state matching a binary ground truth value.
    pub fn from_target(positive: bool) -> Self {
        if positive {
            LabelState::Positive
        } else {
            LabelState::Negative
        }
    }

    pub fn is_known(self) -> bool {
        self != LabelState::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelState::Unknown => "unknown",
            LabelState::Negative => "negative",
            LabelState::Positive => "positive",
        }
    }
}

impl std::str::FromStr for LabelState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unknown" => Ok(LabelState::Unknown),
            "negative" => Ok(LabelState::Negative),
            "positive" => Ok(LabelState::Positive),
            other => Err(Error::Config(format!(
                "unknown label state `{other}` (expected unknown, negative or positive)"
            ))),
        }
    }
}

/// One state per label, in the model's canonical label order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateAssignment(Vec<LabelState>);

impl StateAssignment {
    pub fn new(states: Vec<LabelState>) -> Self {
        StateAssignment(states)
    }

    pub fn all_unknown(num_labels: usize) -> Self {
        StateAssignment(vec![LabelState::Unknown; num_labels])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn states(&self) -> &[LabelState] {
        &self.0
    }

    pub fn set(&mut self, label: usize, state: LabelState) {
        self.0[label] = state;
    }

    pub fn get(&self, label: usize) -> LabelState {
        self.0[label]
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|s| s.is_known()).count()
    }

    pub fn is_known(&self, label: usize) -> bool {
        self.0[label].is_known()
    }
}

/// Named set of auxiliary labels that are revealed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGroup {
    pub name: String,
    pub labels: Vec<usize>,
}

/// Split of the label space into target labels `0..num_target` followed by
/// extra labels `num_target..num_target + num_extra`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPartition {
    pub num_target: usize,
    pub num_extra: usize,
    #[serde(default)]
    pub groups: Vec<LabelGroup>,
}

impl LabelPartition {
    pub fn is_target(&self, label: usize) -> bool {
        label < self.num_target
    }

    pub fn group(&self, name: &str) -> Option<&LabelGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Convolutional stem used when samples are raw image grids instead of
/// precomputed feature grids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Downsampling factor of the second convolution; images are
    /// `grid_h·stride × grid_w·stride`.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_labels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dropout: f64,
    /// Drop the feature tokens entirely; predictions come from label tokens alone.
    #[serde(default)]
    pub no_image: bool,
    #[serde(default)]
    pub label_partition: Option<LabelPartition>,
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
}

impl ModelConfig {
    /// Small configuration used for CPU-scale experiments.
    pub fn desk(num_labels: usize) -> Self {
        ModelConfig {
            num_labels,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            grid_h: 3,
            grid_w: 3,
            dropout: 0.1,
            no_image: false,
            label_partition: None,
            backbone: None,
        }
    }

    /// Full-size setting: 2048-wide tokens from an 18×18 backbone grid,
    /// three layers of four-head attention.
    pub fn paper_scale(num_labels: usize) -> Self {
        ModelConfig {
            embed_dim: 2048,
            num_layers: 3,
            grid_h: 18,
            grid_w: 18,
            ..ModelConfig::desk(num_labels)
        }
    }

    /// Number of feature tokens (0 in the no-image ablation).
    pub fn num_patches(&self) -> usize {
        if self.no_image {
            0
        } else {
            self.grid_h * self.grid_w
        }
    }

    /// Tokens per sample entering the encoder.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.num_labels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Labels that are scored in evaluation: all of them, or the target part
    /// of a partition.
    pub fn num_target(&self) -> usize {
        self.label_partition
            .as_ref()
            .map_or(self.num_labels, |p| p.num_target)
    }

    /// Expected per-sample input shape: `[h, w, d]` features or `[H, W, C]` images.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.backbone {
            Some(b) => vec![self.grid_h * b.stride, self.grid_w * b.stride, b.in_channels],
            None => vec![self.grid_h, self.grid_w, self.embed_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_labels == 0 {
            return fail("num_labels must be positive".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return fail("embed_dim and num_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(b) = &self.backbone {
            if b.in_channels == 0 || b.hidden_channels == 0 || b.stride == 0 {
                return fail("backbone channels and stride must be positive".into());
            }
        }
        if let Some(p) = &self.label_partition {
            if p.num_target + p.num_extra != self.num_labels {
                return fail(format!(
                    "label partition {} target + {} extra != {} labels",
                    p.num_target, p.num_extra, self.num_labels
                ));
            }
            for g in &p.groups {
                if let Some(&bad) = g.labels.iter().find(|&&l| l < p.num_target || l >= self.num_labels) {
                    return fail(format!("group `{}` contains non-extra label {bad}", g.name));
                }
            }
        }
        Ok(())
    }
}

/// Per-label probabilities in canonical label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
}

/// Logistic function evaluated in `f64` and kept inside the open unit interval.
pub fn prob_from_logit(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// A configured network with its parameters and label vocabulary.
#[derive(Debug, Clone)]
pub struct CTran<T: Scalar> {
    pub config: ModelConfig,
    pub label_names: Vec<String>,
    pub params: CTranParams<T>,
}

impl<T: Scalar> CTran<T> {
    /// Freshly initialized model. Label names default to `label_{i}`.
    pub fn new(config: ModelConfig, label_names: Option<Vec<String>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let label_names = match label_names {
            Some(names) if names.len() != config.num_labels => {
                return Err(Error::Config(format!(
                    "{} label names for {} labels",
                    names.len(),
                    config.num_labels
                )))
            }
            Some(names) => names,
            None => (0..config.num_labels).map(|i| format!("label_{i}")).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CTranParams::init(&config, &mut rng);
        Ok(CTran {
            config,
            label_names,
            params,
        })
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }

    /// Eval-mode forward over a batch. `inputs` are per-sample feature grids
    /// (or images when a backbone is configured); ignored in the no-image ablation.
    pub fn predict_batch(
        &self,
        inputs: &[&Tensor<f32>],
        assignments: &[StateAssignment],
    ) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = BatchLayout::new(&self.config, assignments.len());
        let out = forward(&mut g, &vars, &self.config, &layout, inputs, Some(assignments), false, &mut rng)?;
        let probs: Vec<f64> = g.value(out.logits).to_f64_vec().into_iter().map(prob_from_logit).collect();
        Ok(probs
            .chunks(self.config.num_labels)
            .map(|c| Prediction { probs: c.to_vec() })
            .collect())
    }

    pub fn predict(&self, input: &Tensor<f32>, assignment: &StateAssignment) -> Result<Prediction> {
        let mut out = self.predict_batch(&[input], std::slice::from_ref(assignment))?;
        Ok(out.remove(0))
    }

    /// Converts parameters to another element width.
    pub fn cast<U: Scalar>(&self) -> CTran<U> {
        CTran {
            config: self.config.clone(),
            label_names: self.label_names.clone(),
            params: self.params.cast(),
        }
    }
}

//! Datasets of (input grid, binary target vector) pairs, the synthetic
//! correlated-label generator, on-disk layout and the convolutional stem.

pub mod backbone;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabelPartition, ModelConfig};
use crate::tensor::Tensor;

pub use io::{load_dataset, load_dataset_for, save_dataset};
pub use synth::{generate, SynthSpec, SynthSplits};

/// Whether samples hold backbone-ready images or precomputed feature grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Features,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[h×w×d]` features or `[H×W×C]` image.
    pub input: Tensor<f32>,
    /// One 0/1 entry per label.
    pub targets: Vec<u8>,
    pub tags: Vec<String>,
}

impl Sample {
    pub fn is_positive(&self, label: usize) -> bool {
        self.targets[label] == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_names: Vec<String>,
    pub partition: Option<LabelPartition>,
    /// Exactly one positive target label per sample.
    pub multi_class: bool,
    pub input_kind: InputKind,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_target(&self) -> usize {
        self.partition
            .as_ref()
            .map_or(self.num_labels(), |p| p.num_target)
    }

    pub fn sample(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Fraction of samples in which each label is positive.
    pub fn label_marginals(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_labels()];
        for s in &self.samples {
            for (c, &t) in counts.iter_mut().zip(&s.targets) {
                *c += t as usize;
            }
        }
        let n = self.samples.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_labels();
        let shape = self.samples.first().map(|s| s.input.shape().to_vec());
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if s.targets.len() != l {
                return Err(Error::Config(format!(
                    "sample {} has {} targets, dataset has {l} labels",
                    s.id,
                    s.targets.len()
                )));
            }
            if s.targets.iter().any(|&t| t > 1) {
                return Err(Error::Config(format!("sample {} has non-binary targets", s.id)));
            }
            if Some(s.input.shape().to_vec()) != shape {
                return Err(Error::shape("sample input", s.input.shape(), shape.as_deref().unwrap_or(&[])));
            }
            if self.multi_class {
                let pos = s.targets[..self.num_target()].iter().filter(|&&t| t == 1).count();
                if pos != 1 {
                    return Err(Error::Config(format!(
                        "multi-class sample {} has {pos} positive target labels",
                        s.id
                    )));
                }
            }
            if !seen.insert(s.id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Checks label count and input shape against a model configuration.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.num_labels() != cfg.num_labels {
            return Err(Error::shape("dataset labels", &[self.num_labels()], &[cfg.num_labels]));
        }
        if cfg.no_image {
            return Ok(());
        }
        let want_kind = if cfg.backbone.is_some() {
            InputKind::Image
        } else {
            InputKind::Features
        };
        if self.input_kind != want_kind {
            return Err(Error::Config(format!(
                "dataset holds {:?} inputs, model expects {want_kind:?}",
                self.input_kind
            )));
        }
        let want = cfg.input_shape();
        if let Some(s) = self.samples.iter().find(|s| s.input.shape() != want.as_slice()) {
            return Err(Error::shape("dataset input", s.input.shape(), &want));
        }
        Ok(())
    }
}

//! Run configuration: one JSON file merging model, training, masking,
//! evaluation and path settings. Relative paths resolve against the
//! directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ctran_core::model::ModelConfig;
use ctran_core::tensor::Dtype;
use ctran_core::train::{MaskSpec, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub min_fraction: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            min_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Protocol sweep run on `test_dataset` after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fractions in `[0, 1)`.
    pub epsilons: Vec<f64>,
    pub seed: u64,
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epsilons: vec![0.0, 0.25, 0.5, 0.75],
            seed: 0,
            threshold: 0.5,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Parameter initialization seed.
    #[serde(default)]
    pub init_seed: u64,
}

/// Command-line values that replace config file entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub lmt: Option<bool>,
    pub dtype: Option<Dtype>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("at `{path}`: {}", e.inner())
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: format!("cannot read config: {e}"),
        })?;
        let mut cfg = RunConfig::from_json(&text).map_err(|reason| CliError::Config {
            path: path.to_path_buf(),
            reason,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.output_dir);
        if let Some(t) = cfg.test_dataset.as_mut() {
            resolve(t);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.dataset {
            self.dataset = v.clone();
        }
        if let Some(v) = &o.test_dataset {
            self.test_dataset = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
            self.mask.seed = v;
            self.init_seed = v;
            self.eval.seed = v;
        }
        if let Some(v) = o.lmt {
            self.train.lmt_enabled = v;
        }
        if let Some(v) = o.dtype {
            self.train.dtype = v;
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            num_labels: self.model.num_labels,
            min_fraction: self.mask.min_fraction,
            seed: self.mask.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.mask_spec().validate()?;
        if let Some(e) = self.eval.epsilons.iter().find(|e| !(0.0..1.0).contains(*e)) {
            return Err(CliError::Usage(format!("eval epsilon {e} outside [0, 1)")));
        }
        Ok(())
    }
}

//! Label mask training: each example hides a random subset of its labels,
//! reveals the rest through state embeddings and is scored only on the hidden
//! ones.

mod adam;
mod mask;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{checkpoint, forward, BatchLayout, CTran, ForwardOutput, ModelConfig, ParamVars, StateAssignment};
use crate::tensor::{Dtype, Scalar, Tensor};

pub use adam::Adam;
pub use mask::{build_states, masked_bce, sample_mask, MaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `false` trains with every label unknown on every step.
    pub lmt_enabled: bool,
    pub dtype: Dtype,
    /// Seeds shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 10,
            lmt_enabled: true,
            dtype: Dtype::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used with full-size backbones.
    pub fn paper_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("adam betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        Ok(())
    }
}

/// Inputs, targets and state assignments for one optimization step.
pub struct MaskedBatch<'a> {
    pub inputs: Vec<&'a Tensor<f32>>,
    pub targets: Vec<&'a [u8]>,
    pub assignments: Vec<StateAssignment>,
    /// Sorted unknown-label indices per example; the loss is taken over these only.
    pub unknown: Vec<Vec<usize>>,
}

impl<'a> MaskedBatch<'a> {
    /// With a mask, each example draws its own unknown set; without one, every
    /// label is unknown.
    pub fn draw<R: rand::Rng + ?Sized>(samples: &[&'a Sample], mask: Option<(&MaskSpec, &mut R)>) -> Self {
        let mut batch = MaskedBatch {
            inputs: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            assignments: Vec::with_capacity(samples.len()),
            unknown: Vec::with_capacity(samples.len()),
        };
        let mut mask = mask;
        for s in samples {
            let unknown = match mask.as_mut() {
                Some((spec, rng)) => sample_mask(spec, *rng).0,
                None => (0..s.targets.len()).collect(),
            };
            batch.assignments.push(build_states(&s.targets, &unknown));
            batch.inputs.push(&s.input);
            batch.targets.push(&s.targets);
            batch.unknown.push(unknown);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Builds the forward pass and the masked loss: mean over each example's
/// unknown labels, then mean over the batch.
pub fn masked_batch_loss<T: Scalar, R: rand::Rng + ?Sized>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
    train: bool,
    rng: &mut R,
) -> Result<(Var, ForwardOutput)> {
    let b = batch.len();
    let l = cfg.num_labels;
    let layout = BatchLayout::new(cfg, b);
    let out = forward(g, vars, cfg, &layout, &batch.inputs, Some(&batch.assignments), train, rng)?;
    let mut targets = Vec::with_capacity(b * l);
    let mut weights = Vec::new();
    for (k, (y, unknown)) in batch.targets.iter().zip(&batch.unknown).enumerate() {
        if y.len() != l {
            return Err(Error::shape("batch targets", &[y.len()], &[l]));
        }
        if unknown.is_empty() {
            return Err(Error::Protocol("masked loss needs at least one unknown label".into()));
        }
        targets.extend(y.iter().map(|&t| if t == 1 { T::one() } else { T::zero() }));
        let w = T::from_f64_lossy(1.0 / (unknown.len() * b) as f64);
        weights.extend(unknown.iter().map(|&i| (k * l + i, w)));
    }
    let loss = g.masked_bce_with_logits(out.logits, &targets, &weights)?;
    Ok((loss, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: CTran<T>,
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best: CTran<T>,
    pub best_epoch: usize,
    pub trace: Vec<LossRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a copy of `model`. Shuffling and dropout draw from `cfg.seed`, masks
/// from `mask.seed`, so equal seeds give bitwise-equal results.
pub fn train<T: Scalar>(model: &CTran<T>, ds: &Dataset, cfg: &TrainConfig, mask: &MaskSpec) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    mask.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    ds.check_compatible(&model.config)?;
    if mask.num_labels != model.config.num_labels {
        return Err(Error::shape("mask labels", &[mask.num_labels], &[model.config.num_labels]));
    }
    let mut model = model.clone();
    let shapes: Vec<Vec<usize>> = model.params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::<T>::new(cfg.learning_rate, cfg.betas, cfg.weight_decay, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let d = model.config.embed_dim;

    let mut trace = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let batch = if cfg.lmt_enabled {
                MaskedBatch::draw(&samples, Some((mask, &mut mask_rng)))
            } else {
                MaskedBatch::draw::<ChaCha8Rng>(&samples, None)
            };
            let mut g = Graph::new();
            let vars = model.params.register(&mut g, true);
            let (loss, _) = masked_batch_loss(&mut g, &vars, &model.config, &batch, true, &mut rng)?;
            let value = g.value(loss).to_f64_vec()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            g.backward(loss)?;
            let mut state_grad = g.grad(vars.state_embeddings).cloned();
            if let Some(sg) = state_grad.as_mut() {
                sg.data_mut()[..d].fill(T::zero());
            }
            let grads: Vec<Option<&Tensor<T>>> = vars
                .all
                .iter()
                .map(|&v| {
                    if v == vars.state_embeddings {
                        state_grad.as_ref()
                    } else {
                        g.grad(v)
                    }
                })
                .collect();
            adam.step(&mut model.params.named_mut(), &grads)?;
            trace.push(LossRecord { epoch, step, loss: value });
            sum += value;
            count += 1;
            step += 1;
        }
        let mean = sum / count as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        if epoch_losses.iter().all(|&l: &f64| mean < l) {
            best = model.clone();
            best_epoch = epoch;
        }
        epoch_losses.push(mean);
    }
    if cfg.epochs == 0 {
        best = model.clone();
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        trace,
        epoch_losses,
    })
}

pub const LOSS_TRACE_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CONFIG_SNAPSHOT: &str = "config.json";

pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "loss"])?;
    for r in trace {
        w.write_record([r.epoch.to_string(), r.step.to_string(), r.loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the config snapshot, loss trace and final and best checkpoints.
pub fn save_run<T: Scalar, C: Serialize>(dir: impl AsRef<Path>, config: &C, outcome: &TrainOutcome<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snap = dir.join(CONFIG_SNAPSHOT);
    fs::write(&snap, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&snap, e))?;
    write_loss_trace(dir.join(LOSS_TRACE_FILE), &outcome.trace)?;
    checkpoint::save(&outcome.model, dir.join(FINAL_CHECKPOINT))?;
    checkpoint::save(&outcome.best, dir.join(BEST_CHECKPOINT))
}

#[cfg(test)]
mod tests;

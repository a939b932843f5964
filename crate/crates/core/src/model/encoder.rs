//! Graph construction for the forward pass. Samples in a batch are stacked
//! along the row dimension: sample `b` owns token rows `b·M..(b+1)·M`, with
//! its `P` feature tokens first and its `ℓ` label tokens after them.

use rand::Rng;

use super::params::{LayerVars, ParamVars};
use super::{ModelConfig, StateAssignment};
use crate::autodiff::{Graph, Var};
use crate::data::backbone::backbone_forward;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLayout {
    pub batch: usize,
    pub patches: usize,
    pub labels: usize,
}

impl BatchLayout {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        BatchLayout {
            batch,
            patches: cfg.num_patches(),
            labels: cfg.num_labels,
        }
    }

    pub fn tokens(&self) -> usize {
        self.patches + self.labels
    }
}

pub struct LayerOutput {
    pub output: Var,
    /// Attention weights `[B·heads × M × M]` (after dropout in training mode).
    pub attention: Var,
}

pub struct ForwardOutput {
    /// Encoder input `[B·M × d]`.
    pub tokens_in: Var,
    /// Encoder output `[B·M × d]`.
    pub tokens_out: Var,
    /// Pre-sigmoid scores `[B·ℓ]`.
    pub logits: Var,
    /// `[B·ℓ]`
    pub probs: Var,
}

/// Stacks per-sample inputs and, when a backbone is configured, runs it.
/// Returns `[B·P × d]` feature tokens, or `None` in the no-image ablation.
pub fn feature_tokens<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    inputs: &[&Tensor<f32>],
) -> Result<Option<Var>> {
    if cfg.no_image {
        return Ok(None);
    }
    let want = cfg.input_shape();
    let mut data = Vec::with_capacity(inputs.len() * want.iter().product::<usize>());
    for x in inputs {
        if x.shape() != want.as_slice() {
            return Err(Error::shape("model input", x.shape(), &want));
        }
        data.extend(x.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let batch = inputs.len();
    match (&cfg.backbone, &vars.backbone) {
        (Some(bcfg), Some(bvars)) => {
            let mut shape = vec![batch];
            shape.extend_from_slice(&want);
            let images = g.constant(Tensor::new(shape, data)?);
            Ok(Some(backbone_forward(g, bvars, bcfg, images)?))
        }
        (None, _) => {
            let rows = batch * cfg.num_patches();
            Ok(Some(g.constant(Tensor::new(vec![rows, cfg.embed_dim], data)?)))
        }
        (Some(_), None) => Err(Error::Config("backbone configured but parameters missing".into())),
    }
}

/// Builds the encoder input: feature tokens followed by label tokens
/// `l_i + s_state(i)`. With `assignments == None` no state vector is added at all.
pub fn embed_inputs<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layout: &BatchLayout,
    features: Option<Var>,
    assignments: Option<&[StateAssignment]>,
) -> Result<Var> {
    let b = layout.batch;
    let mut labels = g.tile_rows(vars.label_embeddings, b)?;
    if let Some(assign) = assignments {
        if assign.len() != b {
            return Err(Error::Config(format!("{} assignments for a batch of {b}", assign.len())));
        }
        let mut idx = Vec::with_capacity(b * cfg.num_labels);
        for a in assign {
            if a.len() != cfg.num_labels {
                return Err(Error::Config(format!(
                    "state assignment has {} entries, model has {} labels",
                    a.len(),
                    cfg.num_labels
                )));
            }
            idx.extend(a.states().iter().map(|s| s.row()));
        }
        let states = g.gather_rows(vars.state_embeddings, &idx)?;
        labels = g.add(labels, states)?;
    }
    if cfg.no_image {
        return Ok(labels);
    }
    let features = features.ok_or_else(|| Error::Config("feature tokens required unless no_image".into()))?;
    g.concat_blocks(&[(features, layout.patches), (labels, layout.labels)], b)
}

/// One post-norm encoder layer: multi-head attention, residual, layer norm,
/// then ReLU feed-forward, residual, layer norm.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    lv: &LayerVars,
    cfg: &ModelConfig,
    layout: &BatchLayout,
    x: Var,
    layer_index: usize,
    train: bool,
    rng: &mut R,
) -> Result<LayerOutput> {
    let (b, m, heads) = (layout.batch, layout.tokens(), cfg.num_heads);
    let q = g.matmul(x, lv.w_query)?;
    let k = g.matmul(x, lv.w_key)?;
    let v = g.matmul(x, lv.w_value)?;
    let q = g.split_heads(q, b, m, heads)?;
    let k = g.split_heads(k, b, m, heads)?;
    let v = g.split_heads(v, b, m, heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (cfg.head_dim() as f64).sqrt()));
    let attn = g.softmax(scores);
    let attn = g.dropout(attn, cfg.dropout, train, rng)?;
    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.merge_heads(ctx, b, m, heads)?;
    let mixed = g.matmul(ctx, lv.w_mix)?;
    let h = g.add(x, mixed)?;
    let h = g.layer_norm(h, lv.ln_attn_gamma, lv.ln_attn_beta)?;

    let f = g.matmul(h, lv.w_ffn_in)?;
    let f = g.add_row(f, lv.b_ffn_in)?;
    let f = g.relu(f);
    let f = g.dropout(f, cfg.dropout, train, rng)?;
    let f = g.matmul(f, lv.w_ffn_out)?;
    let f = g.add_row(f, lv.b_ffn_out)?;
    let out = g.add(h, f)?;
    let out = g.layer_norm(out, lv.ln_ffn_gamma, lv.ln_ffn_beta)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFiniteActivation { layer: layer_index });
    }
    Ok(LayerOutput {
        output: out,
        attention: attn,
    })
}

pub fn encode<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    layers: &[LayerVars],
    cfg: &ModelConfig,
    layout: &BatchLayout,
    h0: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    if layers.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "{} layer parameter sets for a {}-layer encoder",
            layers.len(),
            cfg.num_layers
        )));
    }
    let mut h = h0;
    for (i, lv) in layers.iter().enumerate() {
        h = encoder_layer(g, lv, cfg, layout, h, i, train, rng)?.output;
    }
    Ok(h)
}

/// Per-label logits `w_i · l'_i + b_i` read from the label tokens only. Returns `[B·ℓ]`.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    layout: &BatchLayout,
    hprime: Var,
) -> Result<Var> {
    let label_rows = g.take_block_rows(hprime, layout.tokens(), layout.patches, layout.labels)?;
    let w = g.tile_rows(vars.classifier_weight, layout.batch)?;
    let prod = g.mul(label_rows, w)?;
    let dots = g.sum_last_dim(prod)?;
    let bias = g.tile_rows(vars.classifier_bias, layout.batch)?;
    g.add(dots, bias)
}

/// Full pass: inputs → tokens → encoder → heads.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layout: &BatchLayout,
    inputs: &[&Tensor<f32>],
    assignments: Option<&[StateAssignment]>,
    train: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    if !cfg.no_image && inputs.len() != layout.batch {
        return Err(Error::Config(format!(
            "{} inputs for a batch of {}",
            inputs.len(),
            layout.batch
        )));
    }
    let features = feature_tokens(g, vars, cfg, inputs)?;
    let tokens_in = embed_inputs(g, vars, cfg, layout, features, assignments)?;
    let tokens_out = encode(g, &vars.layers, cfg, layout, tokens_in, train, rng)?;
    let logits = classify(g, vars, layout, tokens_out)?;
    let probs = g.sigmoid(logits);
    Ok(ForwardOutput {
        tokens_in,
        tokens_out,
        logits,
        probs,
    })
}

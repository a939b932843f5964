use rand::Rng;

use super::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Attention and feed-forward weights of one encoder layer. Per-head query,
/// key and value projections are the column blocks `h·dh..(h+1)·dh` of the
/// corresponding `d×d` matrix.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T> {
    pub w_query: Tensor<T>,
    pub w_key: Tensor<T>,
    pub w_value: Tensor<T>,
    /// Mixes the concatenated head outputs.
    pub w_mix: Tensor<T>,
    pub w_ffn_in: Tensor<T>,
    pub b_ffn_in: Tensor<T>,
    pub w_ffn_out: Tensor<T>,
    pub b_ffn_out: Tensor<T>,
    pub ln_attn_gamma: Tensor<T>,
    pub ln_attn_beta: Tensor<T>,
    pub ln_ffn_gamma: Tensor<T>,
    pub ln_ffn_beta: Tensor<T>,
}

/// Independent logistic head per label: row `i` of `weight` and `bias[i]`.
#[derive(Debug, Clone)]
pub struct ClassifierHeads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Two 3×3 convolutions with ReLU; weights are im2col-shaped `[9·c_in × c_out]`.
#[derive(Debug, Clone)]
pub struct BackboneParams<T> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct CTranParams<T> {
    /// `[ℓ×d]`
    pub label_embeddings: Tensor<T>,
    /// `[3×d]`, rows `[unknown, negative, positive]`; the unknown row is zero and never updated.
    pub state_embeddings: Tensor<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub classifier: ClassifierHeads<T>,
    pub backbone: Option<BackboneParams<T>>,
}

/// Graph handles for one encoder layer, in the same order as [`EncoderLayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_mix: Var,
    pub w_ffn_in: Var,
    pub b_ffn_in: Var,
    pub w_ffn_out: Var,
    pub b_ffn_out: Var,
    pub ln_attn_gamma: Var,
    pub ln_attn_beta: Var,
    pub ln_ffn_gamma: Var,
    pub ln_ffn_beta: Var,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub label_embeddings: Var,
    pub state_embeddings: Var,
    pub layers: Vec<LayerVars>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    pub backbone: Option<[Var; 4]>,
    /// Every handle, in [`CTranParams::named`] order.
    pub all: Vec<Var>,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

impl<T: Scalar> CTranParams<T> {
    /// Zero-mean uniform weights in `±1/√d`, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let label_embeddings = uniform(rng, vec![cfg.num_labels, d], bound);
        let mut state_embeddings = uniform::<T, _>(rng, vec![3, d], bound);
        state_embeddings.data_mut()[..d].fill(T::zero());
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayerParams {
                w_query: uniform(rng, vec![d, d], bound),
                w_key: uniform(rng, vec![d, d], bound),
                w_value: uniform(rng, vec![d, d], bound),
                w_mix: uniform(rng, vec![d, d], bound),
                w_ffn_in: uniform(rng, vec![d, d], bound),
                b_ffn_in: Tensor::zeros(vec![d]),
                w_ffn_out: uniform(rng, vec![d, d], bound),
                b_ffn_out: Tensor::zeros(vec![d]),
                ln_attn_gamma: Tensor::full(vec![d], T::one()),
                ln_attn_beta: Tensor::zeros(vec![d]),
                ln_ffn_gamma: Tensor::full(vec![d], T::one()),
                ln_ffn_beta: Tensor::zeros(vec![d]),
            })
            .collect();
        let classifier = ClassifierHeads {
            weight: uniform(rng, vec![cfg.num_labels, d], bound),
            bias: Tensor::zeros(vec![cfg.num_labels]),
        };
        let backbone = cfg.backbone.as_ref().map(|b| {
            let fan1 = 9 * b.in_channels;
            let fan2 = 9 * b.hidden_channels;
            BackboneParams {
                conv1_weight: uniform(rng, vec![fan1, b.hidden_channels], 1.0 / (fan1 as f64).sqrt()),
                conv1_bias: Tensor::zeros(vec![b.hidden_channels]),
                conv2_weight: uniform(rng, vec![fan2, d], 1.0 / (fan2 as f64).sqrt()),
                conv2_bias: Tensor::zeros(vec![d]),
            }
        });
        CTranParams {
            label_embeddings,
            state_embeddings,
            layers,
            classifier,
            backbone,
        }
    }

    /// Every parameter tensor with its stable name. The order is shared by
    /// [`CTranParams::named_mut`], [`CTranParams::register`] and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("label_embeddings".to_string(), &self.label_embeddings),
            ("state_embeddings".to_string(), &self.state_embeddings),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("w_query", &l.w_query),
                ("w_key", &l.w_key),
                ("w_value", &l.w_value),
                ("w_mix", &l.w_mix),
                ("w_ffn_in", &l.w_ffn_in),
                ("b_ffn_in", &l.b_ffn_in),
                ("w_ffn_out", &l.w_ffn_out),
                ("b_ffn_out", &l.b_ffn_out),
                ("ln_attn_gamma", &l.ln_attn_gamma),
                ("ln_attn_beta", &l.ln_attn_beta),
                ("ln_ffn_gamma", &l.ln_ffn_gamma),
                ("ln_ffn_beta", &l.ln_ffn_beta),
            ] {
                out.push((format!("encoder.{i}.{name}"), t));
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out.push(("classifier.bias".to_string(), &self.classifier.bias));
        if let Some(b) = &self.backbone {
            out.push(("backbone.conv1.weight".to_string(), &b.conv1_weight));
            out.push(("backbone.conv1.bias".to_string(), &b.conv1_bias));
            out.push(("backbone.conv2.weight".to_string(), &b.conv2_weight));
            out.push(("backbone.conv2.bias".to_string(), &b.conv2_bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("label_embeddings".to_string(), &mut self.label_embeddings),
            ("state_embeddings".to_string(), &mut self.state_embeddings),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("w_query", &mut l.w_query),
                ("w_key", &mut l.w_key),
                ("w_value", &mut l.w_value),
                ("w_mix", &mut l.w_mix),
                ("w_ffn_in", &mut l.w_ffn_in),
                ("b_ffn_in", &mut l.b_ffn_in),
                ("w_ffn_out", &mut l.w_ffn_out),
                ("b_ffn_out", &mut l.b_ffn_out),
                ("ln_attn_gamma", &mut l.ln_attn_gamma),
                ("ln_attn_beta", &mut l.ln_attn_beta),
                ("ln_ffn_gamma", &mut l.ln_ffn_gamma),
                ("ln_ffn_beta", &mut l.ln_ffn_beta),
            ] {
                out.push((format!("encoder.{i}.{name}"), t));
            }
        }
        out.push(("classifier.weight".to_string(), &mut self.classifier.weight));
        out.push(("classifier.bias".to_string(), &mut self.classifier.bias));
        if let Some(b) = &mut self.backbone {
            out.push(("backbone.conv1.weight".to_string(), &mut b.conv1_weight));
            out.push(("backbone.conv1.bias".to_string(), &mut b.conv1_bias));
            out.push(("backbone.conv2.weight".to_string(), &mut b.conv2_weight));
            out.push(("backbone.conv2.bias".to_string(), &mut b.conv2_bias));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on the graph as a leaf.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let all: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        ParamVars::from_ordered(all, self.layers.len(), self.backbone.is_some())
    }

    pub fn cast<U: Scalar>(&self) -> CTranParams<U> {
        CTranParams {
            label_embeddings: self.label_embeddings.cast(),
            state_embeddings: self.state_embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    w_query: l.w_query.cast(),
                    w_key: l.w_key.cast(),
                    w_value: l.w_value.cast(),
                    w_mix: l.w_mix.cast(),
                    w_ffn_in: l.w_ffn_in.cast(),
                    b_ffn_in: l.b_ffn_in.cast(),
                    w_ffn_out: l.w_ffn_out.cast(),
                    b_ffn_out: l.b_ffn_out.cast(),
                    ln_attn_gamma: l.ln_attn_gamma.cast(),
                    ln_attn_beta: l.ln_attn_beta.cast(),
                    ln_ffn_gamma: l.ln_ffn_gamma.cast(),
                    ln_ffn_beta: l.ln_ffn_beta.cast(),
                })
                .collect(),
            classifier: ClassifierHeads {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
            backbone: self.backbone.as_ref().map(|b| BackboneParams {
                conv1_weight: b.conv1_weight.cast(),
                conv1_bias: b.conv1_bias.cast(),
                conv2_weight: b.conv2_weight.cast(),
                conv2_bias: b.conv2_bias.cast(),
            }),
        }
    }

    /// Rebuilds a parameter set from `(name, tensor)` pairs, checking names and
    /// shapes against a freshly initialized template for `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> crate::Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut template = CTranParams::<T>::init(cfg, &mut rng);
        let slots = template.named_mut();
        if slots.len() != tensors.len() {
            return Err(crate::Error::Config(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((want, slot), (name, t)) in slots.into_iter().zip(tensors) {
            if want != name {
                return Err(crate::Error::Config(format!("expected tensor `{want}`, found `{name}`")));
            }
            if slot.shape() != t.shape() {
                return Err(crate::Error::shape("parameter", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(template)
    }
}

impl ParamVars {
    /// Regroups leaves created in [`CTranParams::named`] order.
    pub fn from_ordered(all: Vec<Var>, num_layers: usize, has_backbone: bool) -> Self {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter count matches layout");
        let label_embeddings = next();
        let state_embeddings = next();
        let layers = (0..num_layers)
            .map(|_| LayerVars {
                w_query: next(),
                w_key: next(),
                w_value: next(),
                w_mix: next(),
                w_ffn_in: next(),
                b_ffn_in: next(),
                w_ffn_out: next(),
                b_ffn_out: next(),
                ln_attn_gamma: next(),
                ln_attn_beta: next(),
                ln_ffn_gamma: next(),
                ln_ffn_beta: next(),
            })
            .collect();
        let classifier_weight = next();
        let classifier_bias = next();
        let backbone = has_backbone.then(|| [next(), next(), next(), next()]);
        ParamVars {
            label_embeddings,
            state_embeddings,
            layers,
            classifier_weight,
            classifier_bias,
            backbone,
            all,
        }
    }
}

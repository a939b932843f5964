//! Small trainable convolutional stem producing feature grids from raw image grids.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, BackboneParams};
use crate::tensor::{Scalar, Tensor};

/// `[B×H×W×C]` images → `[B·h·w × d]` feature tokens via
/// conv3×3 → ReLU → conv3×3 (strided) → ReLU. `vars` are
/// `[conv1_weight, conv1_bias, conv2_weight, conv2_bias]`.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &[Var; 4],
    cfg: &BackboneConfig,
    images: Var,
) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    let &[batch, h, w, c] = shape.as_slice() else {
        return Err(Error::shape("backbone input", &shape, &[]));
    };
    if c != cfg.in_channels {
        return Err(Error::shape("backbone input", &shape, &[cfg.in_channels]));
    }
    let [w1, b1, w2, b2] = *vars;
    let cols = g.im2col(images, 3, 1, 1)?;
    let x = g.matmul(cols, w1)?;
    let x = g.add_row(x, b1)?;
    let x = g.relu(x);
    let x = g.reshape(x, vec![batch, h, w, cfg.hidden_channels])?;
    let cols = g.im2col(x, 3, cfg.stride, 1)?;
    let x = g.matmul(cols, w2)?;
    let x = g.add_row(x, b2)?;
    Ok(g.relu(x))
}

/// Value-level wrapper around [`backbone_forward`].
#[derive(Debug, Clone)]
pub struct TinyBackbone<T> {
    pub config: BackboneConfig,
    pub params: BackboneParams<T>,
}

impl<T: Scalar> TinyBackbone<T> {
    /// One `[H×W×C]` image → `[h×w×d]` feature grid.
    pub fn features(&self, image: &Tensor<f32>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || !s[0].is_multiple_of(self.config.stride) || !s[1].is_multiple_of(self.config.stride) {
            return Err(Error::shape("backbone input", s, &[self.config.stride]));
        }
        let (gh, gw) = (s[0] / self.config.stride, s[1] / self.config.stride);
        let mut g = Graph::<T>::new();
        let mut shape = vec![1];
        shape.extend_from_slice(s);
        let img = g.constant(Tensor::new(shape, image.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?);
        let vars = [
            g.constant(self.params.conv1_weight.clone()),
            g.constant(self.params.conv1_bias.clone()),
            g.constant(self.params.conv2_weight.clone()),
            g.constant(self.params.conv2_bias.clone()),
        ];
        let out = backbone_forward(&mut g, &vars, &self.config, img)?;
        let d = g.value(out).last_dim();
        g.value(out).clone().reshape(vec![gh, gw, d])
    }
}

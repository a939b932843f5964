use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Weight decay, when non-zero, is added to the
/// gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, betas: (f64, f64), weight_decay: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves, so a rejected step leaves parameters and moments untouched.
    /// A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[params.len(), grads.len()], &[self.m.len()]));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam gradient", g.shape(), p.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { param: name.clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = T::from_f64_lossy;
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps, wd) = (c(self.learning_rate), c(self.eps), c(self.weight_decay));
        let one = T::one();
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi + wd * *x;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

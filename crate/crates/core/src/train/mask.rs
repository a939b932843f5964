use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabelState, StateAssignment};

/// How many labels are hidden per training example: `n` is uniform on the
/// integers `ceil(min_fraction·ℓ)..=ℓ`, then a uniform `n`-subset is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub num_labels: usize,
    pub min_fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(num_labels: usize, seed: u64) -> Self {
        MaskSpec {
            num_labels,
            min_fraction: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::Config("mask needs at least one label".into()));
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "mask min_fraction {} outside (0, 1]",
                self.min_fraction
            )));
        }
        Ok(())
    }

    /// Smallest number of unknown labels a draw can produce.
    pub fn min_unknown(&self) -> usize {
        ((self.min_fraction * self.num_labels as f64).ceil() as usize).clamp(1, self.num_labels)
    }
}

/// Sorted unknown-label indices and their count.
pub fn sample_mask<R: Rng + ?Sized>(spec: &MaskSpec, rng: &mut R) -> (Vec<usize>, usize) {
    let n = rng.random_range(spec.min_unknown()..=spec.num_labels);
    let mut unknown = index::sample(rng, spec.num_labels, n).into_vec();
    unknown.sort_unstable();
    (unknown, n)
}

/// Unknown on `unknown`, ground truth elsewhere.
pub fn build_states(targets: &[u8], unknown: &[usize]) -> StateAssignment {
    let mut states: Vec<LabelState> = targets.iter().map(|&t| LabelState::from_target(t == 1)).collect();
    for &i in unknown {
        states[i] = LabelState::Unknown;
    }
    StateAssignment::new(states)
}

/// Mean binary cross-entropy over the unknown labels only.
pub fn masked_bce(probs: &[f64], targets: &[u8], unknown: &[usize]) -> Result<f64> {
    if unknown.is_empty() {
        return Err(Error::Protocol("masked loss needs at least one unknown label".into()));
    }
    if probs.len() != targets.len() {
        return Err(Error::shape("masked_bce", &[probs.len()], &[targets.len()]));
    }
    let total: f64 = unknown
        .iter()
        .map(|&i| {
            let p = probs[i];
            if targets[i] == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / unknown.len() as f64)
}

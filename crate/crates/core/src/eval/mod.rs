//! Inference protocols and reports.
//!
//! A protocol decides, per image, which labels are revealed as known states
//! and which are scored. Known labels are never scored.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{binarize, mean_average_precision, prf_metrics, MetricsCounts, PrfMetrics};
use crate::model::{CTran, LabelPartition, LabelState, StateAssignment};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ProtocolMode {
    /// Nothing known, every label scored.
    Regular,
    /// `floor(ε·ℓ)` target labels per image revealed at random.
    Partial { epsilon: f64 },
    /// Every extra label in the named groups revealed; all target labels scored.
    Extra { known_groups: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    #[serde(flatten)]
    pub mode: ProtocolMode,
    /// Seeds the per-image known-label draw.
    pub seed: u64,
    pub threshold: f64,
    /// Size of the top-k variant of the thresholded metrics.
    pub top_k: usize,
}

impl EvalProtocol {
    pub fn new(mode: ProtocolMode, seed: u64) -> Self {
        EvalProtocol {
            mode,
            seed,
            threshold: 0.5,
            top_k: 3,
        }
    }

    pub fn regular() -> Self {
        EvalProtocol::new(ProtocolMode::Regular, 0)
    }

    pub fn partial(epsilon: f64, seed: u64) -> Self {
        EvalProtocol::new(ProtocolMode::Partial { epsilon }, seed)
    }

    pub fn extra(known_groups: Vec<String>) -> Self {
        EvalProtocol::new(ProtocolMode::Extra { known_groups }, 0)
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            ProtocolMode::Regular => "regular",
            ProtocolMode::Partial { .. } => "partial",
            ProtocolMode::Extra { .. } => "extra",
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self.mode {
            ProtocolMode::Partial { epsilon } => epsilon,
            _ => 0.0,
        }
    }

    pub fn known_groups(&self) -> &[String] {
        match &self.mode {
            ProtocolMode::Extra { known_groups } => known_groups,
            _ => &[],
        }
    }

    /// Checks the protocol against a dataset's label partition.
    pub fn validate(&self, partition: Option<&LabelPartition>) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        match &self.mode {
            ProtocolMode::Regular => Ok(()),
            ProtocolMode::Partial { epsilon } => {
                if (0.0..1.0).contains(epsilon) {
                    Ok(())
                } else {
                    Err(Error::Protocol(format!("epsilon {epsilon} outside [0, 1)")))
                }
            }
            ProtocolMode::Extra { known_groups } => {
                let p = partition.ok_or_else(|| {
                    Error::Protocol("known groups requested but the dataset has no extra labels".into())
                })?;
                for name in known_groups {
                    if p.group(name).is_none() {
                        let valid: Vec<&str> = p.groups.iter().map(|g| g.name.as_str()).collect();
                        return Err(Error::Protocol(format!(
                            "unknown label group `{name}` (valid: {})",
                            valid.join(", ")
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Number of labels revealed out of `num_labels` at fraction `epsilon`.
pub fn known_count(epsilon: f64, num_labels: usize) -> usize {
    ((epsilon * num_labels as f64 + 1e-9).floor() as usize).min(num_labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub assignment: StateAssignment,
    /// Sorted indices of the labels to score.
    pub scored: Vec<usize>,
}

/// Known states and scored labels for one image.
pub fn select_known<R: rand::Rng + ?Sized>(
    protocol: &EvalProtocol,
    targets: &[u8],
    partition: Option<&LabelPartition>,
    rng: &mut R,
) -> Result<Selection> {
    let l = targets.len();
    let num_target = partition.map_or(l, |p| p.num_target);
    let mut assignment = StateAssignment::all_unknown(l);
    let reveal = |a: &mut StateAssignment, i: usize| a.set(i, LabelState::from_target(targets[i] == 1));
    let scored = match &protocol.mode {
        ProtocolMode::Regular => (0..num_target).collect(),
        ProtocolMode::Partial { epsilon } => {
            let k = known_count(*epsilon, num_target);
            let known = index::sample(rng, num_target, k).into_vec();
            for &i in &known {
                reveal(&mut assignment, i);
            }
            (0..num_target).filter(|&i| !assignment.is_known(i)).collect()
        }
        ProtocolMode::Extra { known_groups } => {
            let p = partition.ok_or_else(|| Error::Protocol("extra-label protocol needs a label partition".into()))?;
            for name in known_groups {
                let g = p
                    .group(name)
                    .ok_or_else(|| Error::Protocol(format!("unknown label group `{name}`")))?;
                for &i in &g.labels {
                    if p.is_target(i) {
                        return Err(Error::Protocol(format!("group `{name}` reveals target label {i}")));
                    }
                    reveal(&mut assignment, i);
                }
            }
            (0..num_target).collect()
        }
    };
    Ok(Selection { assignment, scored })
}

/// Per-image draw, independent of evaluation order.
pub fn image_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

/// Model outputs for one image together with the protocol's scoring mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRow {
    pub id: u64,
    pub probs: Vec<f64>,
    pub targets: Vec<u8>,
    pub scored: Vec<bool>,
}

/// Runs the model under `protocol` without computing metrics.
pub fn score_dataset<T: Scalar>(model: &CTran<T>, ds: &Dataset, protocol: &EvalProtocol) -> Result<Vec<ScoredRow>> {
    ds.check_compatible(&model.config)?;
    protocol.validate(ds.partition.as_ref())?;
    const CHUNK: usize = 64;
    let mut rows = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(CHUNK) {
        let mut assignments = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for s in chunk {
            let mut rng = image_rng(protocol.seed, s.id);
            let sel = select_known(protocol, &s.targets, ds.partition.as_ref(), &mut rng)?;
            let mut mask = vec![false; s.targets.len()];
            for &i in &sel.scored {
                mask[i] = true;
            }
            assignments.push(sel.assignment);
            masks.push(mask);
        }
        let inputs: Vec<_> = chunk.iter().map(|s| &s.input).collect();
        let preds = model.predict_batch(&inputs, &assignments)?;
        for ((s, p), mask) in chunk.iter().zip(preds).zip(masks) {
            rows.push(ScoredRow {
                id: s.id,
                probs: p.probs,
                targets: s.targets.clone(),
                scored: mask,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAp {
    pub name: String,
    pub ap: Option<f64>,
    /// Positive scored pairs for this label.
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub images: usize,
    pub scored_pairs: usize,
    pub map: f64,
    pub map_excluded: usize,
    pub metrics: PrfMetrics,
    pub top_k_metrics: PrfMetrics,
    /// Argmax over target-label probabilities; multi-class datasets only.
    pub accuracy: Option<f64>,
    pub per_label: Vec<LabelAp>,
}

/// Metrics over the scored entries of `rows`. Unscored entries are not read.
pub fn report(rows: &[ScoredRow], ds: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let l = ds.num_labels();
    let num_target = ds.num_target();
    let mut columns: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); num_target];
    let mut counts = MetricsCounts::new(num_target);
    let mut top_counts = MetricsCounts::new(num_target);
    let mut scored_pairs = 0;
    let mut correct = 0usize;
    for row in rows {
        if row.probs.len() != l || row.targets.len() != l || row.scored.len() != l {
            return Err(Error::shape("scored row", &[row.probs.len(), row.scored.len()], &[l, l]));
        }
        let labels: Vec<usize> = (0..num_target).filter(|&i| row.scored[i]).collect();
        if labels.is_empty() {
            continue;
        }
        scored_pairs += labels.len();
        let scores: Vec<f64> = labels.iter().map(|&i| row.probs[i]).collect();
        let plain = binarize(&scores, protocol.threshold, None)?;
        let top = binarize(&scores, protocol.threshold, Some(protocol.top_k.min(scores.len())))?;
        for (k, &i) in labels.iter().enumerate() {
            let truth = row.targets[i] == 1;
            columns[i].0.push(row.probs[i]);
            columns[i].1.push(truth);
            counts.record(i, plain[k] == 1, truth);
            top_counts.record(i, top[k] == 1, truth);
        }
        if ds.multi_class {
            let best = labels
                .iter()
                .copied()
                .reduce(|a, b| if row.probs[b] > row.probs[a] { b } else { a })
                .expect("non-empty");
            correct += (row.targets[best] == 1) as usize;
        }
    }
    let summary = mean_average_precision(&columns);
    let per_label = summary
        .per_label
        .iter()
        .enumerate()
        .map(|(i, ap)| LabelAp {
            name: ds.label_names[i].clone(),
            ap: *ap,
            positives: columns[i].1.iter().filter(|&&t| t).count(),
        })
        .collect();
    Ok(EvalReport {
        protocol: protocol.clone(),
        images: rows.len(),
        scored_pairs,
        map: summary.map,
        map_excluded: summary.excluded,
        metrics: prf_metrics(&counts),
        top_k_metrics: prf_metrics(&top_counts),
        accuracy: ds.multi_class.then(|| correct as f64 / rows.len().max(1) as f64),
        per_label,
    })
}

pub fn evaluate<T: Scalar>(model: &CTran<T>, ds: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let rows = score_dataset(model, ds, protocol)?;
    report(&rows, ds, protocol)
}

/// Bumped whenever [`CSV_COLUMNS`] changes.
pub const CSV_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 25] = [
    "csv_version",
    "mode",
    "epsilon",
    "known_groups",
    "seed",
    "threshold",
    "top_k",
    "images",
    "scored_pairs",
    "map",
    "map_excluded",
    "cp",
    "cr",
    "cf1",
    "op",
    "or",
    "of1",
    "cp_top_k",
    "cr_top_k",
    "cf1_top_k",
    "op_top_k",
    "or_top_k",
    "of1_top_k",
    "accuracy",
    "labels",
];

impl EvalReport {
    pub fn csv_record(&self) -> Vec<String> {
        let p = &self.protocol;
        let (m, t) = (&self.metrics, &self.top_k_metrics);
        let mut rec = vec![
            CSV_VERSION.to_string(),
            p.mode_name().to_string(),
            p.epsilon().to_string(),
            p.known_groups().join(";"),
            p.seed.to_string(),
            p.threshold.to_string(),
            p.top_k.to_string(),
            self.images.to_string(),
            self.scored_pairs.to_string(),
            self.map.to_string(),
            self.map_excluded.to_string(),
        ];
        for v in [m.cp, m.cr, m.cf1, m.op, m.or, m.of1, t.cp, t.cr, t.cf1, t.op, t.or, t.of1] {
            rec.push(v.to_string());
        }
        rec.push(self.accuracy.map(|a| a.to_string()).unwrap_or_default());
        rec.push(self.per_label.len().to_string());
        rec
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_csv<W: Write>(w: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn csv_string(reports: &[EvalReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, reports)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn write_csv_file(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(f, reports)
}

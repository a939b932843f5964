//! Ranking and thresholded multi-label metrics.
//!
//! Average precision is the mean, over relevant items, of precision at that
//! item's rank (descending score, ties in original order). Per-class and
//! overall precision/recall use
//! `CP = (1/C) Σ Nc_i/Np_i`, `CR = (1/C) Σ Nc_i/Ng_i`,
//! `OP = Σ Nc_i / Σ Np_i`, `OR = Σ Nc_i / Σ Ng_i`, each F1 being the harmonic
//! mean of its own pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `None` when no item is relevant.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), relevance.len(), "scores and relevance differ in length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevance[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    /// Mean over labels with at least one relevant item; 0 when there are none.
    pub map: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels left out of the mean for lack of relevant items.
    pub excluded: usize,
}

/// One `(scores, relevance)` column per label.
pub fn mean_average_precision(columns: &[(Vec<f64>, Vec<bool>)]) -> MapSummary {
    let per_label: Vec<Option<f64>> = columns.iter().map(|(s, r)| average_precision(s, r)).collect();
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    let excluded = per_label.len() - defined.len();
    if excluded > 0 {
        log::warn!("{excluded} label(s) without positives excluded from mAP");
    }
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapSummary {
        map,
        per_label,
        excluded,
    }
}

/// Per-label true-positive, predicted-positive and ground-truth-positive counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsCounts {
    pub correct: Vec<u64>,
    pub predicted: Vec<u64>,
    pub ground_truth: Vec<u64>,
}

impl MetricsCounts {
    pub fn new(num_labels: usize) -> Self {
        MetricsCounts {
            correct: vec![0; num_labels],
            predicted: vec![0; num_labels],
            ground_truth: vec![0; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.correct.len()
    }

    pub fn record(&mut self, label: usize, predicted: bool, truth: bool) {
        self.predicted[label] += predicted as u64;
        self.ground_truth[label] += truth as u64;
        self.correct[label] += (predicted && truth) as u64;
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.correct.len();
        if self.predicted.len() != c || self.ground_truth.len() != c {
            return Err(Error::shape(
                "metric counts",
                &[c, self.predicted.len()],
                &[c, self.ground_truth.len()],
            ));
        }
        for i in 0..c {
            if self.correct[i] > self.predicted[i].min(self.ground_truth[i]) {
                return Err(Error::Config(format!(
                    "label {i}: {} true positives exceed predicted {} or actual {}",
                    self.correct[i], self.predicted[i], self.ground_truth[i]
                )));
            }
        }
        Ok(())
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    /// Labels whose precision term had a zero denominator and counted as 0.
    pub empty_precision_terms: usize,
    /// Labels whose recall term had a zero denominator and counted as 0.
    pub empty_recall_terms: usize,
}

pub fn prf_metrics(counts: &MetricsCounts) -> PrfMetrics {
    let c = counts.num_labels();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut cp = 0.0;
    let mut cr = 0.0;
    let mut empty_p = 0;
    let mut empty_r = 0;
    for i in 0..c {
        cp += ratio(counts.correct[i], counts.predicted[i]);
        cr += ratio(counts.correct[i], counts.ground_truth[i]);
        empty_p += (counts.predicted[i] == 0) as usize;
        empty_r += (counts.ground_truth[i] == 0) as usize;
    }
    if c > 0 {
        cp /= c as f64;
        cr /= c as f64;
    }
    let nc: u64 = counts.correct.iter().sum();
    let op = ratio(nc, counts.predicted.iter().sum());
    let or = ratio(nc, counts.ground_truth.iter().sum());
    PrfMetrics {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
        empty_precision_terms: empty_p,
        empty_recall_terms: empty_r,
    }
}

/// Thresholds one row of scores. With `top_k`, only the `k` highest scores
/// (ties to the lower label index) may be positive, and still need to clear
/// the threshold.
pub fn binarize(scores: &[f64], threshold: f64, top_k: Option<usize>) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut eligible = vec![true; scores.len()];
    if let Some(k) = top_k {
        if k > scores.len() {
            return Err(Error::Config(format!("top-{k} requested for {} labels", scores.len())));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        eligible.fill(false);
        for &i in &order[..k] {
            eligible[i] = true;
        }
    }
    Ok(scores
        .iter()
        .zip(&eligible)
        .map(|(&s, &e)| u8::from(e && s > threshold))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Precision at each relevant item's rank, with ranks counted directly.
    fn brute_ap(scores: &[f64], rel: &[bool]) -> Option<f64> {
        let rank = |j: usize| {
            1 + (0..scores.len())
                .filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
                .count()
        };
        let relevant: Vec<usize> = (0..scores.len()).filter(|&i| rel[i]).collect();
        if relevant.is_empty() {
            return None;
        }
        let sum: f64 = relevant
            .iter()
            .map(|&j| {
                let r = rank(j);
                let above = relevant.iter().filter(|&&i| rank(i) <= r).count();
                above as f64 / r as f64
            })
            .sum();
        Some(sum / relevant.len() as f64)
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
    }

    #[test]
    fn hand_enumerated_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ties_keep_original_order() {
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn labels_without_positives_are_excluded() {
        let s = mean_average_precision(&[
            (vec![0.9, 0.1], vec![true, false]),
            (vec![0.2, 0.3], vec![false, false]),
        ]);
        assert_eq!(s.excluded, 1);
        assert_eq!(s.map, 1.0);
        assert_eq!(s.per_label[1], None);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let mut c = MetricsCounts::new(3);
        for (p, t) in [(true, true), (false, false), (true, true)] {
            for l in 0..3 {
                c.record(l, p, t);
            }
        }
        let m = prf_metrics(&c);
        for v in [m.cp, m.cr, m.cf1, m.op, m.or, m.of1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let c = MetricsCounts {
            correct: vec![1, 0],
            predicted: vec![2, 1],
            ground_truth: vec![1, 1],
        };
        c.validate().unwrap();
        let m = prf_metrics(&c);
        assert!((m.op - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.or - 0.5).abs() < 1e-15);
        assert!((m.of1 - 0.4).abs() < 1e-15);
        assert!((m.cp - 0.25).abs() < 1e-15);
        assert!((m.cr - 0.5).abs() < 1e-15);
        assert!((m.cf1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equal_precision_and_recall_give_equal_f1() {
        let c = MetricsCounts {
            correct: vec![1, 1],
            predicted: vec![2, 2],
            ground_truth: vec![2, 2],
        };
        let m = prf_metrics(&c);
        assert_eq!(m.cp, m.cr);
        assert_eq!(m.cf1, m.cp);
    }

    #[test]
    fn zero_denominators_count_as_zero_and_are_tallied() {
        let c = MetricsCounts {
            correct: vec![0, 0],
            predicted: vec![0, 3],
            ground_truth: vec![2, 0],
        };
        let m = prf_metrics(&c);
        assert_eq!((m.cp, m.cr, m.cf1), (0.0, 0.0, 0.0));
        assert_eq!(m.empty_precision_terms, 1);
        assert_eq!(m.empty_recall_terms, 1);
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let c = MetricsCounts {
            correct: vec![3],
            predicted: vec![2],
            ground_truth: vec![5],
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(binarize(&[0.6, 0.4], 0.5, None).unwrap(), vec![1, 0]);
        assert_eq!(binarize(&[0.5], 0.5, None).unwrap(), vec![0]);
    }

    #[test]
    fn top_k_limits_eligibility() {
        let row = [0.9, 0.8, 0.7, 0.6, 0.55];
        assert_eq!(binarize(&row, 0.5, Some(3)).unwrap(), vec![1, 1, 1, 0, 0]);
        assert_eq!(binarize(&[0.1, 0.2, 0.3, 0.4], 0.5, Some(3)).unwrap(), vec![0; 4]);
        assert_eq!(binarize(&[0.7, 0.7, 0.7], 0.5, Some(2)).unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn top_k_larger_than_row_is_a_config_error() {
        assert!(matches!(binarize(&[0.9, 0.1], 0.5, Some(3)), Err(Error::Config(_))));
    }

    fn instance() -> impl Strategy<Value = Vec<(f64, bool)>> {
        let score = prop_oneof![0.0f64..1.0, Just(0.5), Just(0.25)];
        prop::collection::vec((score, any::<bool>()), 1..=8)
    }

    proptest! {
        #[test]
        fn ap_matches_rank_enumeration(items in instance()) {
            let scores: Vec<f64> = items.iter().map(|x| x.0).collect();
            let rel: Vec<bool> = items.iter().map(|x| x.1).collect();
            match (average_precision(&scores, &rel), brute_ap(&scores, &rel)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn f1_is_the_harmonic_mean(
            counts in prop::collection::vec((0u64..6, 0u64..6, 0u64..6), 1..6),
        ) {
            let mut c = MetricsCounts::new(counts.len());
            for (i, &(a, b, d)) in counts.iter().enumerate() {
                c.predicted[i] = a.max(b);
                c.ground_truth[i] = d.max(b.min(a));
                c.correct[i] = a.min(b).min(c.ground_truth[i]);
            }
            c.validate().unwrap();
            let m = prf_metrics(&c);
            for (p, r, f) in [(m.cp, m.cr, m.cf1), (m.op, m.or, m.of1)] {
                for v in [p, r, f] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!((f * (p + r) - 2.0 * p * r).abs() <= 1e-12);
            }
        }
    }
}

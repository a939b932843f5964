use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate, SynthSpec};
use crate::model::LabelState;

fn tiny_config(num_labels: usize) -> ModelConfig {
    ModelConfig {
        num_labels,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 2,
        grid_h: 2,
        grid_w: 2,
        dropout: 0.0,
        no_image: false,
        label_partition: None,
        backbone: None,
    }
}

fn tiny_data(num_labels: usize, n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        num_labels,
        embed_dim: 16,
        loadings: vec![vec![1.0; num_labels]],
        pairs: vec![],
        signal_labels: (0..num_labels).collect(),
        signal_strength: 1.0,
        num_train: n,
        num_test: 0,
        ..SynthSpec::planted(seed)
    };
    generate(&spec).unwrap().train
}

/// Probability that each label is unknown, by enumerating every subset.
fn enumerated_marginals(l: usize, lo: usize) -> Vec<f64> {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    let p_n = 1.0 / (l - lo + 1) as f64;
    let mut out = vec![0.0; l];
    for subset in 0u32..(1 << l) {
        let n = subset.count_ones() as usize;
        if n < lo {
            continue;
        }
        let p = p_n / choose(l, n);
        for (i, o) in out.iter_mut().enumerate() {
            if subset & (1 << i) != 0 {
                *o += p;
            }
        }
    }
    out
}

#[test]
fn unknown_count_range_for_eighty_labels() {
    let spec = MaskSpec::new(80, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let (set, n) = sample_mask(&spec, &mut rng);
        assert!((20..=80).contains(&n));
        assert_eq!(set.len(), n);
        assert!(set.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn four_labels_reach_every_count_from_one() {
    let spec = MaskSpec::new(4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = [false; 5];
    for _ in 0..500 {
        let (_, n) = sample_mask(&spec, &mut rng);
        seen[n] = true;
    }
    assert_eq!(seen, [false, true, true, true, true]);
}

#[test]
fn mask_draws_are_reproducible() {
    let spec = MaskSpec::new(12, 0);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| sample_mask(&spec, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
}

#[test]
fn mask_marginals_match_enumeration() {
    let spec = MaskSpec::new(8, 0);
    let want = enumerated_marginals(8, spec.min_unknown());
    let mut counts = [0usize; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_mask(&spec, &mut rng).0 {
            counts[i] += 1;
        }
    }
    for (c, w) in counts.iter().zip(&want) {
        let got = *c as f64 / draws as f64;
        assert!((got - w).abs() <= 0.03, "{got} vs {w}");
    }
    assert!((want[0] - 0.625).abs() < 1e-12);
}

#[test]
fn invalid_mask_fraction_is_rejected() {
    let spec = MaskSpec {
        min_fraction: 0.0,
        ..MaskSpec::new(4, 0)
    };
    assert!(spec.validate().is_err());
}

#[test]
fn states_follow_targets_outside_the_unknown_set() {
    use LabelState::*;
    assert_eq!(build_states(&[1, 0, 1], &[1]).states(), &[Positive, Unknown, Positive]);
    assert_eq!(build_states(&[1, 0, 1], &[0, 1, 2]).states(), &[Unknown, Unknown, Unknown]);
    assert_eq!(build_states(&[1, 0, 1], &[]).states(), &[Positive, Negative, Positive]);
}

#[test]
fn single_half_probability_costs_ln_two() {
    let loss = masked_bce(&[0.5], &[1], &[0]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn empty_unknown_set_is_a_protocol_error() {
    assert!(matches!(masked_bce(&[0.3], &[1], &[]), Err(Error::Protocol(_))));
}

proptest! {
    #[test]
    fn masked_bce_matches_direct_sum(
        raw in prop::collection::vec((0.001f64..0.999, any::<bool>(), any::<bool>()), 1..12),
    ) {
        let probs: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let y: Vec<u8> = raw.iter().map(|r| r.1 as u8).collect();
        let mut unknown: Vec<usize> = raw.iter().enumerate().filter(|(_, r)| r.2).map(|(i, _)| i).collect();
        if unknown.is_empty() {
            unknown.push(0);
        }
        let mut total = 0.0;
        for &i in &unknown {
            total += if y[i] == 1 { -probs[i].ln() } else { -(1.0 - probs[i]).ln() };
        }
        let want = total / unknown.len() as f64;
        let got = masked_bce(&probs, &y, &unknown).unwrap();
        prop_assert!((got - want).abs() <= 1e-12);

        let mut flipped = y.clone();
        for i in (0..y.len()).filter(|i| !unknown.contains(i)) {
            flipped[i] ^= 1;
        }
        prop_assert_eq!(masked_bce(&probs, &flipped, &unknown).unwrap().to_bits(), got.to_bits());
    }
}

#[test]
fn known_logits_receive_exactly_zero_gradient() {
    let cfg = tiny_config(6);
    let ds = tiny_data(6, 4, 3);
    let model = CTran::<f64>::new(cfg.clone(), None, 5).unwrap();
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let spec = MaskSpec::new(6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let batch = MaskedBatch::draw(&samples, Some((&spec, &mut rng)));
        let mut g = Graph::new();
        let vars = model.params.register(&mut g, true);
        let (loss, out) = masked_batch_loss(&mut g, &vars, &cfg, &batch, false, &mut rng).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(out.logits).unwrap().data().to_vec();
        for (b, unknown) in batch.unknown.iter().enumerate() {
            for i in 0..6 {
                let v = grad[b * 6 + i];
                if unknown.contains(&i) {
                    assert!(v != 0.0);
                } else {
                    assert_eq!(v.to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}

#[test]
fn graph_loss_matches_probability_space_loss() {
    let cfg = tiny_config(6);
    let ds = tiny_data(6, 3, 4);
    let model = CTran::<f64>::new(cfg.clone(), None, 6).unwrap();
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = MaskedBatch::draw(&samples, Some((&MaskSpec::new(6, 0), &mut rng)));
    let mut g = Graph::new();
    let vars = model.params.register(&mut g, false);
    let (loss, out) = masked_batch_loss(&mut g, &vars, &cfg, &batch, false, &mut rng).unwrap();
    let probs = g.value(out.probs).data().to_vec();
    let mut want = 0.0;
    for (b, unknown) in batch.unknown.iter().enumerate() {
        want += masked_bce(&probs[b * 6..(b + 1) * 6], batch.targets[b], unknown).unwrap();
    }
    want /= batch.len() as f64;
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let mut p = Tensor::from_vec(vec![0.3f64, -1.2, 4.0]);
    let before = p.clone();
    let mut adam = Adam::new(0.01, (0.9, 0.999), 0.0, &[vec![3]]);
    let g = Tensor::zeros(vec![3]);
    for _ in 0..5 {
        adam.step(&mut [("p".into(), &mut p)], &[Some(&g)]).unwrap();
    }
    assert!(p.bitwise_eq(&before));
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut p = Tensor::from_vec(vec![2.0f64]);
    let mut adam = Adam::new(0.01, (0.9, 0.999), 0.0, &[vec![1]]);
    adam.step(&mut [("p".into(), &mut p)], &[Some(&Tensor::from_vec(vec![1.0]))]).unwrap();
    let moved = 2.0 - p.item().unwrap();
    assert!((moved - 0.01).abs() < 1e-9, "{moved}");
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Tensor::from_vec((0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        let mut adam = Adam::new(1e-3, (0.9, 0.999), 0.0, &[vec![6]]);
        for _ in 0..100 {
            let g = Tensor::from_vec((0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            adam.step(&mut [("p".into(), &mut p)], &[Some(&g)]).unwrap();
        }
        p
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut a = Tensor::from_vec(vec![1.0f64]);
    let mut b = Tensor::from_vec(vec![1.0f64]);
    let mut adam = Adam::new(0.01, (0.9, 0.999), 0.0, &[vec![1], vec![1]]);
    let ga = Tensor::from_vec(vec![0.5]);
    let gb = Tensor::from_vec(vec![f64::NAN]);
    let err = adam
        .step(&mut [("a".into(), &mut a), ("bias".into(), &mut b)], &[Some(&ga), Some(&gb)])
        .unwrap_err();
    assert!(matches!(&err, Error::NonFiniteGradient { param } if param == "bias"));
    assert_eq!(a.item().unwrap(), 1.0);
    assert_eq!(adam.steps(), 0);
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        epochs: 500,
        ..TrainConfig::default()
    }
}

#[test]
fn eight_samples_are_memorized() {
    let cfg = tiny_config(6);
    let ds = tiny_data(6, 8, 11);
    let model = CTran::<f32>::new(cfg, None, 1).unwrap();
    let out = train(&model, &ds, &overfit_config(), &MaskSpec::new(6, 2)).unwrap();
    let last = *out.epoch_losses.last().unwrap();
    assert!(last <= 0.05, "final epoch loss {last}");

    let smoothed: Vec<f64> = out
        .epoch_losses
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "{smoothed:?}");

    assert!(out.trace.iter().all(|r| r.loss.is_finite()));
    assert_eq!(out.trace.len(), 500);
    let d = model_dim(&out.model);
    assert!(out.model.params.state_embeddings.data()[..d].iter().all(|&v| v.to_bits() == 0));
}

fn model_dim<T: Scalar>(m: &CTran<T>) -> usize {
    m.config.embed_dim
}

#[test]
fn same_seeds_give_identical_checkpoints() {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..tiny_config(6)
    };
    let ds = tiny_data(6, 24, 12);
    let model = CTran::<f32>::new(cfg, None, 1).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let a = train(&model, &ds, &tc, &MaskSpec::new(6, 2)).unwrap();
    let b = train(&model, &ds, &tc, &MaskSpec::new(6, 2)).unwrap();
    assert_eq!(checkpoint::to_bytes(&a.model), checkpoint::to_bytes(&b.model));
    assert_eq!(a.trace, b.trace);
    let c = train(&model, &ds, &tc, &MaskSpec::new(6, 3)).unwrap();
    assert_ne!(checkpoint::to_bytes(&a.model), checkpoint::to_bytes(&c.model));
}

#[test]
fn without_masking_the_loss_is_plain_bce_over_all_labels() {
    let cfg = tiny_config(6);
    let ds = tiny_data(6, 4, 13);
    let model = CTran::<f64>::new(cfg.clone(), None, 2).unwrap();
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let batch = MaskedBatch::draw::<ChaCha8Rng>(&samples, None);
    assert!(batch.assignments.iter().all(|a| a.known_count() == 0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let vars = model.params.register(&mut g, false);
    let (loss, out) = masked_batch_loss(&mut g, &vars, &cfg, &batch, false, &mut rng).unwrap();
    let probs = g.value(out.probs).data();
    let mut total = 0.0;
    for (k, s) in ds.samples.iter().enumerate() {
        for i in 0..6 {
            let p = probs[k * 6 + i];
            total -= if s.targets[i] == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    assert!((g.value(loss).item().unwrap() - total / 24.0).abs() < 1e-12);
}

#[test]
fn run_directory_holds_every_artifact() {
    let cfg = tiny_config(6);
    let ds = tiny_data(6, 8, 14);
    let model = CTran::<f32>::new(cfg, None, 1).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&model, &ds, &tc, &MaskSpec::new(6, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &tc, &out).unwrap();
    for f in [CONFIG_SNAPSHOT, LOSS_TRACE_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join(LOSS_TRACE_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,step,loss"));
    assert_eq!(csv.lines().count(), out.trace.len() + 1);
    let back: CTran<f32> = checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&out.model));
}

#[test]
fn label_count_mismatch_is_rejected_before_training() {
    let ds = tiny_data(6, 4, 1);
    let model = CTran::<f32>::new(tiny_config(5), None, 1).unwrap();
    let err = train(&model, &ds, &TrainConfig::default(), &MaskSpec::new(5, 0)).err().unwrap();
    assert!(matches!(err, Error::Shape { .. }));
}

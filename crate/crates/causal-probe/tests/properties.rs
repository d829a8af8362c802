//! Randomized cross-module invariants: probability semantics of the
//! softmax, file round-trips, masking and intervention exactness,
//! attack ball compliance, and degenerate-strength reductions.

use std::sync::OnceLock;

use proptest::prelude::*;

use causal_probe::attack::{craft, fgsm, AttackConfig, AttackMethod};
use causal_probe::causal::{
    apply_intervention, causal_effect, ce_report, concept_summaries, discretize_concept,
    pixel_mask, policy_classes, BaselineMode, CeConfig, ClassPolicy, Condition, Intervention,
};
use causal_probe::concept::{
    build_autoencoder, train_autoencoder, AeTrainConfig, ConceptAutoencoder, ConceptSpec,
};
use causal_probe::config::RunConfig;
use causal_probe::data::{
    load_idx_images, load_idx_labels, synth_bars, write_idx_images, write_idx_labels, Labels,
};
use causal_probe::graph::softmax_rows;
use causal_probe::net::{build_network, train_classifier, Network, Shape, TrainConfig};
use causal_probe::Tensor;

/// One trained stripe classifier with an inserted autoencoder, shared
/// across properties; training it per case would dominate the runtime.
fn fixture() -> &'static (Network, ConceptAutoencoder) {
    static FIX: OnceLock<(Network, ConceptAutoencoder)> = OnceLock::new();
    FIX.get_or_init(|| {
        let train = synth_bars(128, 0);
        let mut net = build_network(&RunConfig::default().model, 1).unwrap();
        let mut tc = TrainConfig::default();
        tc.epochs = 2;
        tc.shuffle_seed = 2;
        train_classifier(&mut net, &train, None, &tc).unwrap();
        let channels = match net.spec.level_shape(1).unwrap() {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(_) => unreachable!("level 1 of the stock net is spatial"),
        };
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels,
        };
        let mut ae = build_autoencoder(&spec, 3).unwrap();
        let mut acfg = AeTrainConfig::default();
        acfg.epochs = 1;
        acfg.shuffle_seed = 8;
        train_autoencoder(&net, &mut ae, &train, &acfg).unwrap();
        (net, ae)
    })
}

/// Cheap deterministic floats in [0, 1) for bulk tensor filling.
fn lcg_unit(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        raw in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 8), 1..4),
        cols in 2usize..8,
        shift in -25.0f64..25.0,
    ) {
        let rows = raw.len();
        let data: Vec<f64> = raw.iter().flat_map(|r| r[..cols].to_vec()).collect();
        let logits = Tensor::new(vec![rows, cols], data.clone()).unwrap();
        let probs = softmax_rows(&logits).unwrap();
        for r in 0..rows {
            let sum: f64 = probs.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
        let shifted = Tensor::new(
            vec![rows, cols],
            data.iter().map(|v| v + shift).collect(),
        ).unwrap();
        let probs2 = softmax_rows(&shifted).unwrap();
        for (a, b) in probs.data().iter().zip(probs2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn idx_files_round_trip(
        n in 1usize..4,
        h in 1usize..7,
        w in 1usize..7,
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        // Images survive exactly iff every value is a byte multiple.
        let bytes: Vec<u8> = lcg_unit(seed, n * h * w)
            .into_iter()
            .map(|v| (v * 255.0) as u8)
            .collect();
        let images = Tensor::new(
            vec![n, 1, h, w],
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        ).unwrap();
        let ipath = dir.path().join("im");
        write_idx_images(&ipath, &images).unwrap();
        let back = load_idx_images(&ipath).unwrap();
        prop_assert_eq!(back.shape(), images.shape());
        prop_assert_eq!(back.data(), images.data());

        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % 10).collect();
        let lpath = dir.path().join("lb");
        write_idx_labels(&lpath, &labels).unwrap();
        prop_assert_eq!(load_idx_labels(&lpath).unwrap(), labels);
    }

    #[test]
    fn masking_hits_exactly_the_requested_pixel_count(
        n in 1usize..4,
        h in 3usize..10,
        w in 3usize..10,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let plane = h * w;
        let images = Tensor::new(vec![n, 1, h, w], lcg_unit(seed, n * plane)).unwrap();
        // Fill value outside the data range so changed pixels are countable.
        let masked = pixel_mask(&images, fraction, 2.0, seed, None).unwrap();
        let want = (fraction * plane as f64).round() as usize;
        for i in 0..n {
            let changed = masked.data()[i * plane..(i + 1) * plane]
                .iter()
                .filter(|&&v| v == 2.0)
                .count();
            prop_assert_eq!(changed, want, "sample {} of {}x{} at fraction {}", i, h, w, fraction);
        }
    }

    #[test]
    fn discretization_is_a_probability_partition(
        summaries in proptest::collection::vec(-5.0f64..5.0, 8..64),
        bins in 2usize..8,
    ) {
        prop_assume!(summaries.len() >= bins);
        let d = discretize_concept(&summaries, bins).unwrap();
        let total: f64 = d.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "probs sum to {total}");
        prop_assert_eq!(d.probs.len(), d.representatives.len());
        if !d.degenerate {
            prop_assert_eq!(d.probs.len(), bins);
            let lo = summaries.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = summaries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for pair in d.representatives.windows(2) {
                prop_assert!(pair[0] <= pair[1], "representatives out of order");
            }
            for &r in &d.representatives {
                prop_assert!((lo..=hi).contains(&r));
            }
        }
    }

    #[test]
    fn do_lands_exactly_and_idle_is_bitwise_identity(
        n in 1usize..4,
        k in 1usize..4,
        h in 1usize..4,
        w in 1usize..4,
        channel_pick in any::<u32>(),
        value in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let z = Tensor::new(vec![n, k, h, w], lcg_unit(seed, n * k * h * w)).unwrap();
        let channel = channel_pick as usize % k;
        let idle = apply_intervention(&z, channel, Intervention::Idle).unwrap();
        prop_assert_eq!(idle.data(), z.data());
        let done = apply_intervention(&z, channel, Intervention::Do { value }).unwrap();
        for s in concept_summaries(&done, channel).unwrap() {
            prop_assert!((s - value).abs() < 1e-12, "summary {s} after Do({value})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn gradient_attacks_respect_the_ball_and_the_range(
        epsilon in 0.01f64..0.9,
        method_pick in 0usize..3,
        seed in any::<u64>(),
    ) {
        let (net, _) = fixture();
        let test = synth_bars(8, seed);
        let idx: Vec<usize> = (0..test.len()).collect();
        let (images, labels) = test.batch(&idx);
        let cfg = AttackConfig {
            epsilon,
            seed,
            ..AttackConfig::default()
        };
        let method = [AttackMethod::Fgsm, AttackMethod::Bim, AttackMethod::Pgd][method_pick];
        let batch = craft(net, &images, &labels, method, &cfg).unwrap();
        let bound = epsilon * (1.0 + 1e-12) + 1e-15;
        for (a, x) in batch.adversarials.data().iter().zip(images.data()) {
            prop_assert!((a - x).abs() <= bound, "|{a} - {x}| > {epsilon}");
            prop_assert!((0.0..=1.0).contains(a), "{a} escapes [0,1]");
        }
    }

    #[test]
    fn causal_effects_are_bounded_probability_differences(
        do_value in -2.0f64..2.0,
        seed in any::<u64>(),
        baseline_pick in 0usize..2,
    ) {
        let (net, ae) = fixture();
        let test = synth_bars(6, seed);
        let idx: Vec<usize> = (0..test.len()).collect();
        let (images, _) = test.batch(&idx);
        let classes = policy_classes(net, ae, &images, ClassPolicy::CleanPrediction).unwrap();
        let baseline = [BaselineMode::ZeroFill, BaselineMode::Clean][baseline_pick];
        let ce = causal_effect(net, ae, &images, 0, do_value, &classes, baseline).unwrap();
        prop_assert!(ce.is_finite());
        prop_assert!(ce.abs() <= 1.0 + 1e-12, "effect {ce} outside [-1, 1]");
    }
}

/// Attacks at zero strength are the identity, so every attack condition
/// collapses onto the clean-evidence row.
#[test]
fn zero_strength_attacks_match_clean_rows() {
    let (net, ae) = fixture();
    let test = synth_bars(32, 99);
    let idx: Vec<usize> = (0..test.len()).collect();
    let (images, labels) = test.batch(&idx);

    let zeroed = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::default()
    };
    let no_budget = AttackConfig {
        gamma: 0.0,
        ..AttackConfig::default()
    };
    let conditions = vec![
        Condition::Z0,
        Condition::Attack {
            method: AttackMethod::Fgsm,
            config: zeroed.clone(),
        },
        Condition::Attack {
            method: AttackMethod::Bim,
            config: zeroed.clone(),
        },
        Condition::Attack {
            method: AttackMethod::Pgd,
            config: zeroed,
        },
        Condition::Attack {
            method: AttackMethod::Jsma,
            config: no_budget,
        },
    ];
    let report = ce_report(
        net,
        ae,
        &images,
        &labels,
        &[0, 1],
        &conditions,
        &CeConfig::default(),
    )
    .unwrap();
    for node in [0usize, 1] {
        let z0 = report
            .rows
            .iter()
            .find(|r| r.node == node && r.condition == "Z0")
            .unwrap()
            .expected_ce;
        for row in report.rows.iter().filter(|r| r.node == node) {
            assert!(
                (row.expected_ce - z0).abs() < 1e-10,
                "node {node} condition {} gives {} vs clean {z0}",
                row.condition,
                row.expected_ce
            );
        }
    }
}

/// On a trained classifier, more adversarial budget never helps the
/// true class, checked on a fixed strength grid.
#[test]
fn stronger_fgsm_never_helps_the_true_class() {
    let (net, _) = fixture();
    let test = synth_bars(64, 5);
    let idx: Vec<usize> = (0..test.len()).collect();
    let (images, labels) = test.batch(&idx);
    let classes = match &labels {
        Labels::Classes(c) => c.clone(),
        Labels::MultiHot(_) => unreachable!("bars labels are classes"),
    };
    let mut last = f64::INFINITY;
    for epsilon in [0.0, 0.05, 0.1, 0.2, 0.3] {
        let adv = fgsm(net, &images, &labels, epsilon).unwrap();
        let probs = net.probabilities(&adv).unwrap();
        let cols = probs.shape()[1];
        let mean: f64 = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| probs.data()[i * cols + c])
            .sum::<f64>()
            / classes.len() as f64;
        assert!(
            mean <= last + 1e-9,
            "true-class probability rose from {last} to {mean} at epsilon {epsilon}"
        );
        last = mean;
    }
}

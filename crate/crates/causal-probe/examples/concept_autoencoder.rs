//! Insert a concept autoencoder into a trained classifier.
//!
//! The autoencoder compresses one activation level into a few concept
//! channels and decodes back. It trains against three objectives at
//! once: reconstruct the activation (shallow), keep the classifier's
//! output distribution intact through the insertion (deep, a KL term),
//! and keep the bottleneck sparse (interpretability). The host stays
//! frozen throughout.
//!
//! Usage: cargo run --release --example concept_autoencoder [seed]

use causal_probe::concept::{
    build_autoencoder, composite_loss_on, evaluate_augmented, identity_autoencoder,
    train_autoencoder, AeTrainConfig, ConceptSpec, LossWeights,
};
use causal_probe::config::RunConfig;
use causal_probe::data::synth_bars;
use causal_probe::net::{build_network, evaluate, train_classifier, Shape, TrainConfig};
use causal_probe::Graph;

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let train = synth_bars(512, seed);
    let test = synth_bars(128, seed + 7);
    let mut host = build_network(&RunConfig::default().model, seed + 1)?;
    let mut tc = TrainConfig::default();
    tc.shuffle_seed = seed + 2;
    train_classifier(&mut host, &train, Some(&test), &tc)?;
    let host_eval = evaluate(&host, &test)?;
    println!("host accuracy: {:.4}", host_eval.accuracy);

    let level = 1;
    let channels = match host.spec.level_shape(level)? {
        Shape::Spatial { c, .. } => c,
        Shape::Flat(_) => unreachable!("level 1 of the stock net is spatial"),
    };
    let spec = ConceptSpec {
        level,
        concepts: 4,
        channels,
    };
    println!(
        "inserting at level {level}: {channels} host channels -> {} concepts",
        spec.concepts
    );

    // An identity-initialized autoencoder reproduces the activation
    // exactly, so reconstruction and consistency losses start at zero.
    let identity = identity_autoencoder(&ConceptSpec {
        level,
        concepts: channels,
        channels,
    })?;
    let (bx, _) = synth_bars(8, seed + 3).batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
    let mut g = Graph::new();
    let built = composite_loss_on(&mut g, &host, &identity, &bx, false, &LossWeights::default())?;
    println!(
        "identity insertion: shallow {:.3e}  deep {:.3e}  (both exactly zero)",
        built.parts.shallow, built.parts.deep
    );

    let mut ae = build_autoencoder(&spec, seed + 3)?;
    let mut acfg = AeTrainConfig::default();
    acfg.shuffle_seed = seed + 8;
    let report = train_autoencoder(&host, &mut ae, &train, &acfg)?;
    for e in &report.epochs {
        println!(
            "epoch {}: shallow {:.5}  deep {:.5}  interp {:.5}  total {:.5}",
            e.epoch, e.mean.shallow, e.mean.deep, e.mean.interp, e.mean.total
        );
    }

    let aug_eval = evaluate_augmented(&host, &ae, &test)?;
    println!(
        "augmented accuracy: {:.4} (drop {:.4})",
        aug_eval.accuracy,
        host_eval.accuracy - aug_eval.accuracy
    );
    Ok(())
}

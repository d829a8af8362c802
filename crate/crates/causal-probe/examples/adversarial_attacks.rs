//! Craft adversarial examples with the four bundled attacks.
//!
//! FGSM takes one signed-gradient step of size epsilon; BIM iterates
//! smaller steps inside the epsilon-ball; PGD is BIM from a random
//! start; JSMA flips a budgeted number of single pixels chosen by a
//! saliency criterion (targeted at the least-likely class here). All
//! attacks keep outputs inside [0,1] and inside the epsilon-ball around
//! the original, and all are deterministic for a fixed seed.
//!
//! Usage: cargo run --release --example adversarial_attacks [seed]

use causal_probe::attack::{craft, AttackConfig, AttackMethod};
use causal_probe::config::RunConfig;
use causal_probe::data::synth_bars;
use causal_probe::net::{build_network, evaluate, train_classifier, TrainConfig};
use causal_probe::Tensor;

fn linf(orig: &Tensor, adv: &Tensor) -> f64 {
    orig.data()
        .iter()
        .zip(adv.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let train = synth_bars(512, seed);
    let test = synth_bars(64, seed + 7);
    let mut net = build_network(&RunConfig::default().model, seed + 1)?;
    let mut tc = TrainConfig::default();
    tc.shuffle_seed = seed + 2;
    train_classifier(&mut net, &train, None, &tc)?;
    println!(
        "clean accuracy: {:.4}",
        evaluate(&net, &test)?.accuracy
    );

    let idx: Vec<usize> = (0..test.len()).collect();
    let (images, labels) = test.batch(&idx);
    let cfg = AttackConfig {
        seed: seed + 5,
        ..AttackConfig::default()
    };
    println!(
        "epsilon {}  steps {}  step size {}  theta {}  gamma {}",
        cfg.epsilon,
        cfg.steps,
        cfg.resolved_step_size(),
        cfg.theta,
        cfg.gamma
    );
    println!();

    for method in [
        AttackMethod::Fgsm,
        AttackMethod::Bim,
        AttackMethod::Pgd,
        AttackMethod::Jsma,
    ] {
        let batch = craft(&net, &images, &labels, method, &cfg)?;
        let max_linf = linf(&batch.originals, &batch.adversarials);
        let in_range = batch
            .adversarials
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v));
        println!(
            "{:<5} success rate {:.4}  max Linf {:.4}  range ok: {}",
            method.name(),
            batch.success_rate(),
            max_linf,
            in_range
        );
    }

    // One step of BIM at full step size is exactly FGSM: same graph,
    // same gradient, same clamp.
    let one_step = AttackConfig {
        steps: 1,
        step_size: Some(cfg.epsilon),
        ..cfg.clone()
    };
    let b = craft(&net, &images, &labels, AttackMethod::Bim, &one_step)?;
    let f = craft(&net, &images, &labels, AttackMethod::Fgsm, &one_step)?;
    println!();
    println!(
        "BIM(1 step) == FGSM bitwise: {}",
        b.adversarials.data() == f.adversarials.data()
    );
    Ok(())
}

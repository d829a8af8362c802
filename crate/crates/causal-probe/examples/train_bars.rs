//! Train a small convolutional classifier on synthetic stripe images.
//!
//! Even samples carry a bright horizontal row, odd samples a vertical
//! column; the network learns to tell the two apart. Training is fully
//! deterministic: rerunning with the same seed reproduces every loss
//! digit.
//!
//! Usage: cargo run --release --example train_bars [seed]

use causal_probe::config::RunConfig;
use causal_probe::data::synth_bars;
use causal_probe::net::{build_network, evaluate, train_classifier, TrainConfig};

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let train = synth_bars(512, seed);
    let test = synth_bars(128, seed + 7);
    println!("data: bars (train=512, test=128)");

    // The stock stripe classifier: conv(8,3x3) -> relu -> pool ->
    // flatten -> dense(2), softmax head.
    let spec = RunConfig::default().model;
    let mut net = build_network(&spec, seed + 1)?;
    let params: usize = net.params.iter().map(|p| p.value.numel()).sum();
    println!("parameters: {params}");

    let mut cfg = TrainConfig::default();
    cfg.shuffle_seed = seed + 2;
    let report = train_classifier(&mut net, &train, Some(&test), &cfg)?;
    for e in &report.epochs {
        println!(
            "epoch {}: mean loss {:.6}  test accuracy {:.4}",
            e.epoch,
            e.mean_loss,
            e.test_accuracy.unwrap_or(f64::NAN)
        );
    }

    let eval = evaluate(&net, &test)?;
    println!("final: accuracy {:.4}  mean loss {:.6}", eval.accuracy, eval.mean_loss);
    for c in &eval.per_class {
        println!("  class {} ({}): {}/{}", c.class, ["horizontal", "vertical"][c.class], c.correct, c.total);
    }
    Ok(())
}

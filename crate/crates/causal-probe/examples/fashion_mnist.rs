//! Desk-scale clothing-image run: a two-convolution classifier, a
//! concept autoencoder at each pooling level, and the causal-effect
//! table under clean, masked, and adversarial evidence.
//!
//! Expects the four standard IDX files
//! (train-images-idx3-ubyte, train-labels-idx1-ubyte,
//!  t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte)
//! in the data directory; see scripts/fetch-fashion-mnist.sh.
//!
//! Usage: cargo run --release --example fashion_mnist -- \
//!            [data_dir] [train_limit] [test_limit]
//! Defaults: data/fashion-mnist 10000 2000

use std::path::PathBuf;

use causal_probe::attack::{AttackConfig, AttackMethod};
use causal_probe::causal::{ce_report, format_ce_table, CeConfig, Condition};
use causal_probe::concept::{
    build_autoencoder, evaluate_augmented, train_autoencoder, AeTrainConfig, ConceptSpec,
};
use causal_probe::data::{load_idx_pair, Dataset};
use causal_probe::net::{
    build_network, evaluate, train_classifier, Head, LayerSpec, NetworkSpec, Shape, TrainConfig,
};

fn spec_2conv() -> NetworkSpec {
    NetworkSpec {
        input: [1, 28, 28],
        layers: vec![
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
        ],
        head: Head::Softmax,
    }
}

fn load(dir: &PathBuf, images: &str, labels: &str, limit: usize) -> causal_probe::Result<Dataset> {
    Ok(load_idx_pair(&dir.join(images), &dir.join(labels))?.take(limit))
}

fn main() -> causal_probe::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(
        args.next()
            .unwrap_or_else(|| "data/fashion-mnist".to_string()),
    );
    let train_limit: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let test_limit: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2_000);
    let seed = 0u64;

    let train = load(&dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_limit)?;
    let test = load(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_limit)?;
    println!("data: {} train, {} test", train.len(), test.len());

    let mut net = build_network(&spec_2conv(), seed + 1)?;
    let mut tc = TrainConfig::default();
    tc.shuffle_seed = seed + 2;
    let t0 = std::time::Instant::now();
    let report = train_classifier(&mut net, &train, Some(&test), &tc)?;
    for e in &report.epochs {
        println!(
            "epoch {}: mean loss {:.4}  test accuracy {:.4}  [{:.0}s]",
            e.epoch,
            e.mean_loss,
            e.test_accuracy.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    }
    let host_eval = evaluate(&net, &test)?;
    println!("host accuracy: {:.4}", host_eval.accuracy);

    // One autoencoder per pooling level; effects at both levels go into
    // one table so rows are comparable across depths.
    let idx: Vec<usize> = (0..512.min(test.len())).collect();
    let (images, labels) = test.batch(&idx);
    let conditions = [
        Condition::Z0,
        Condition::Pwm {
            fraction: 0.10,
            seed: seed + 4,
        },
        Condition::Attack {
            method: AttackMethod::Fgsm,
            config: AttackConfig {
                seed: seed + 5,
                ..AttackConfig::default()
            },
        },
    ];
    for level in [1usize, 2] {
        let channels = match net.spec.level_shape(level)? {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(_) => continue,
        };
        let spec = ConceptSpec {
            level,
            concepts: 8,
            channels,
        };
        let mut ae = build_autoencoder(&spec, seed + 3)?;
        let mut acfg = AeTrainConfig::default();
        acfg.shuffle_seed = seed + 8;
        train_autoencoder(&net, &mut ae, &train, &acfg)?;
        let aug = evaluate_augmented(&net, &ae, &test)?;
        println!(
            "level {level}: augmented accuracy {:.4} (drop {:.4})  [{:.0}s]",
            aug.accuracy,
            host_eval.accuracy - aug.accuracy,
            t0.elapsed().as_secs_f64()
        );

        let targets: Vec<usize> = (0..2).collect();
        let table = ce_report(
            &net,
            &ae,
            &images,
            &labels,
            &targets,
            &conditions,
            &CeConfig::default(),
        )?;
        print!("{}", format_ce_table(&table));
    }
    println!("total time: {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}

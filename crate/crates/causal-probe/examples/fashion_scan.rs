//! Scratch: full 16-row CE scan on fashion with checkpoint caching.

use std::path::{Path, PathBuf};
use std::time::Instant;

use causal_probe::attack::{AttackConfig, AttackMethod};
use causal_probe::causal::{ce_report, CeConfig, Condition};
use causal_probe::checkpoint::{load_autoencoder, load_network, save_autoencoder, save_network};
use causal_probe::concept::{
    build_autoencoder, evaluate_augmented, train_autoencoder, AeTrainConfig, ConceptSpec,
    LossWeights,
};
use causal_probe::data::{load_idx_pair, Dataset};
use causal_probe::net::{
    build_network, evaluate, train_classifier, Head, LayerSpec, NetworkSpec, Shape, TrainConfig,
};

fn load(dir: &Path, images: &str, labels: &str, limit: usize) -> causal_probe::Result<Dataset> {
    Ok(load_idx_pair(&dir.join(images), &dir.join(labels))?.take(limit))
}

fn main() -> causal_probe::Result<()> {
    let t0 = Instant::now();
    let dir = PathBuf::from("data/fashion-mnist");
    let cache = PathBuf::from("/tmp/fscan");
    std::fs::create_dir_all(&cache).unwrap();
    let train = load(&dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 10_000)?;
    let test = load(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 2_000)?;

    let spec = NetworkSpec {
        input: [1, 28, 28],
        layers: vec![
            LayerSpec::Conv { out_channels: 16, kernel: 3, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Conv { out_channels: 32, kernel: 3, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
        ],
        head: Head::Softmax,
    };
    let model_path = cache.join("model.cpck");
    let net = if model_path.is_file() {
        load_network(&model_path)?
    } else {
        let mut net = build_network(&spec, 1)?;
        let mut tc = TrainConfig::default();
        tc.shuffle_seed = 2;
        train_classifier(&mut net, &train, None, &tc)?;
        save_network(&model_path, &net)?;
        net
    };
    let host_eval = evaluate(&net, &test)?;
    println!("host accuracy: {:.4}  [{:.0}s]", host_eval.accuracy, t0.elapsed().as_secs_f64());

    let mut ce_cfg = CeConfig::default();
    if std::env::args().nth(1).as_deref() == Some("clean") {
        ce_cfg.baseline = causal_probe::causal::BaselineMode::Clean;
        println!("baseline: clean");
    }
    let concepts: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ae_seed: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n_ce: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(512);
    println!("concepts: {concepts}, ae seed: {ae_seed}, ce samples: {n_ce}");
    let seed = 0u64;
    let conditions = vec![
        Condition::Z0,
        Condition::Pwm { fraction: 0.10, seed: seed + 4 },
        Condition::Attack {
            method: AttackMethod::Fgsm,
            config: AttackConfig { seed: seed + 5, ..AttackConfig::default() },
        },
    ];
    let (images, labels) = {
        let t = test.take(n_ce);
        let idx: Vec<usize> = (0..t.len()).collect();
        t.batch(&idx)
    };

    for level in [1usize, 2] {
        let channels = match net.spec.level_shape(level)? {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(_) => continue,
        };
        let cspec = ConceptSpec { level, concepts, channels };
        let ae_path = cache.join(format!("ae{level}-c{concepts}-s{ae_seed}.cpck"));
        let ae = if ae_path.is_file() {
            load_autoencoder(&ae_path)?.0
        } else {
            let mut ae = build_autoencoder(&cspec, ae_seed)?;
            let mut acfg = AeTrainConfig::default();
            acfg.shuffle_seed = ae_seed + 5;
            train_autoencoder(&net, &mut ae, &train, &acfg)?;
            save_autoencoder(&ae_path, &ae, &LossWeights::default())?;
            let aug = evaluate_augmented(&net, &ae, &test)?;
            println!(
                "level {level}: augmented accuracy {:.4} (drop {:.4})  [{:.0}s]",
                aug.accuracy,
                host_eval.accuracy - aug.accuracy,
                t0.elapsed().as_secs_f64()
            );
            ae
        };

        let targets: Vec<usize> = (0..concepts).collect();
        let table = ce_report(&net, &ae, &images, &labels, &targets, &conditions, &ce_cfg)?;
        // One summary line per node: Z0, PWM, FGSM and the two ratios.
        for node in 0..concepts {
            let find = |label_prefix: &str| {
                table
                    .rows
                    .iter()
                    .find(|r| r.node == node && r.condition.starts_with(label_prefix))
                    .map(|r| r.expected_ce)
                    .unwrap()
            };
            let z0 = find("Z0");
            let pwm = find("PWM");
            let fg = find("FGSM");
            println!(
                "L{level} N{node}: Z0 {z0:+.4e}  PWM {pwm:+.4e} (x{:.1})  FGSM {fg:+.4e} (x{:.1})",
                z0.abs() / pwm.abs(),
                z0.abs() / fg.abs()
            );
        }
        println!("  [{:.0}s]", t0.elapsed().as_secs_f64());
    }
    Ok(())
}

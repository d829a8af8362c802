//! Scratch diagnostic: per-bin structure of expected effects on the
//! clothing host.

use causal_probe::attack::{AttackConfig, AttackMethod};
use causal_probe::causal::{
    apply_condition, expected_causal_effect, expected_causal_effect_under, policy_classes,
    BaselineMode, ClassPolicy, Condition,
};
use causal_probe::checkpoint::{load_autoencoder, load_network};
use causal_probe::data::load_idx_pair;
use causal_probe::tensor::Tensor;

fn main() {
    let dir = std::path::Path::new("/tmp/fscan");
    let host = load_network(&dir.join("model.cpck")).unwrap();
    let test = load_idx_pair(
        std::path::Path::new("data/fashion-mnist/t10k-images-idx3-ubyte.gz"),
        std::path::Path::new("data/fashion-mnist/t10k-labels-idx1-ubyte.gz"),
    )
    .unwrap()
    .take(256)
    .unwrap();
    let n = 256usize;
    let sample: usize = test.images.numel() / test.images.shape()[0];
    let images = Tensor::new(
        vec![n, 1, 28, 28],
        test.images.data()[..n * sample].to_vec(),
    )
    .unwrap();
    let labels = causal_probe::data::Labels(test.labels.0[..n].to_vec());

    for level in [1usize, 2] {
        let ae = load_autoencoder(&dir.join(format!("ae{level}-c8-s3.cpck"))).unwrap();
        let classes =
            policy_classes(&host, &ae, &images, ClassPolicy::CleanPrediction).unwrap();
        let pwm = apply_condition(
            &host,
            &images,
            &labels,
            &Condition::Pwm { fraction: 0.10, seed: 4 },
        )
        .unwrap();
        let att = apply_condition(
            &host,
            &images,
            &labels,
            &Condition::Attack {
                method: AttackMethod::Fgsm,
                config: AttackConfig { seed: 5, ..AttackConfig::default() },
            },
        )
        .unwrap();
        for node in 0..8usize {
            let clean = expected_causal_effect(
                &host, &ae, &images, node, &classes, 8, BaselineMode::ZeroFill,
            )
            .unwrap();
            let wp = expected_causal_effect_under(
                &host, &ae, &images, &pwm, node, &classes, 8, BaselineMode::ZeroFill,
            )
            .unwrap();
            let wa = expected_causal_effect_under(
                &host, &ae, &images, &att, node, &classes, 8, BaselineMode::ZeroFill,
            )
            .unwrap();
            println!("L{level} N{node}  base {:+.4e}", clean.baseline_prob);
            let fmt = |v: &[f64]| {
                v.iter().map(|x| format!("{x:+.3e}")).collect::<Vec<_>>().join(" ")
            };
            println!("  reps    {}", fmt(&clean.discretization.representatives));
            println!("  effects {}", fmt(&clean.bin_effects));
            println!("  w clean {}", fmt(&clean.weights));
            println!("  w pwm   {}", fmt(&wp.weights));
            println!("  w fgsm  {}", fmt(&wa.weights));
            println!(
                "  E: Z0 {:+.4e}  PWM {:+.4e}  FGSM {:+.4e}",
                clean.expected_ce, wp.expected_ce, wa.expected_ce
            );
        }
    }
}

//! Scratch: inspect CAM/CEM internals on the bars classifier.

use causal_probe::concept::level_activations;
use causal_probe::config::RunConfig;
use causal_probe::data::{bars_stripe_index, synth_bars};
use causal_probe::graph::Graph;
use causal_probe::heatmap::{compute_cam, compute_cem, Heatmap};
use causal_probe::net::{build_network, evaluate, train_classifier, TrainConfig};
use causal_probe::Tensor;

fn stripe_mass(map: &Heatmap, image: &Tensor, class: usize) -> f64 {
    let stripe = bars_stripe_index(image, class);
    let (h, w) = (map.values.shape()[0], map.values.shape()[1]);
    let (mut on, mut total) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = map.values.data()[r * w + c].max(0.0);
            total += v;
            if (class == 0 && r == stripe) || (class == 1 && c == stripe) {
                on += v;
            }
        }
    }
    if total == 0.0 { 0.0 } else { on / total }
}

fn main() -> causal_probe::Result<()> {
    let scan: bool = std::env::args().nth(2).is_some();
    if scan {
        return seed_scan();
    }
    let train = synth_bars(512, 0);
    let test = synth_bars(8, 13);
    let mut net = build_network(&RunConfig::default().model, 1)?;
    let mut tc = TrainConfig::default();
    tc.epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    tc.batch_size = 32;
    tc.shuffle_seed = 2;
    let report = train_classifier(&mut net, &train, None, &tc)?;
    println!(
        "final mean loss {:.4}, test acc {:.3}, epochs {}",
        report.epochs.last().unwrap().mean_loss,
        evaluate(&net, &test)?.accuracy,
        report.epochs.len()
    );

    // Image 0 in detail.
    let image = test.image(0);
    let class = {
        let p = net.probabilities(&image)?;
        if p.data()[0] >= p.data()[1] { 0 } else { 1 }
    };
    let stripe = bars_stripe_index(&image, class);
    println!("image 0: class {class}, stripe index {stripe}");

    let tap = level_activations(&net, 1, &image)?;
    let k = tap.shape()[1];
    println!("per-channel activation row sums (channel x row):");
    for c in 0..k {
        let mut rows = vec![0.0; 8];
        for r in 0..8 {
            for q in 0..8 {
                rows[r] += tap.data()[c * 64 + r * 8 + q];
            }
        }
        let line: Vec<String> = rows.iter().map(|v| format!("{v:5.1}")).collect();
        println!("  ch{c}: {}", line.join(" "));
    }

    // Gradient weights per channel.
    let mut g = Graph::new();
    let x = g.leaf(image.clone().with_requires_grad(true));
    let fp = net.forward_on(&mut g, x, false)?;
    let score = g.select(fp.logits, class)?;
    let grads = g.backward(score)?;
    let gt = grads.wrt(fp.taps[0])?;
    let weights: Vec<f64> = (0..k)
        .map(|c| gt[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0)
        .collect();
    println!("channel weights: {weights:?}");

    let cam = compute_cam(&net, &image, class)?;
    println!("CAM rows:");
    for r in 0..8 {
        let line: Vec<String> =
            (0..8).map(|q| format!("{:6.3}", cam.values.data()[r * 8 + q])).collect();
        println!("  {}", line.join(" "));
    }

    for (patch, stride) in [(4usize, 2usize), (2, 1), (1, 1)] {
        let mut cam_m = 0.0;
        let mut cem_m = 0.0;
        for i in 0..test.len() {
            let im = test.image(i);
            let cl = {
                let p = net.probabilities(&im)?;
                if p.data()[0] >= p.data()[1] { 0 } else { 1 }
            };
            cam_m += stripe_mass(&compute_cam(&net, &im, cl)?, &im, cl);
            cem_m += stripe_mass(&compute_cem(&net, &im, cl, patch, stride)?, &im, cl);
        }
        println!(
            "patch {patch} stride {stride}: mean CAM mass {:.3}, mean CEM mass {:.3}",
            cam_m / 8.0,
            cem_m / 8.0
        );
    }
    Ok(())
}

fn seed_scan() -> causal_probe::Result<()> {
    use causal_probe::net::{Head, LayerSpec, NetworkSpec};
    let train = synth_bars(512, 0);
    let test = synth_bars(8, 13);
    let two_conv = NetworkSpec {
        input: [1, 8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 8, kernel: 3, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { out_channels: 8, kernel: 3, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
        ],
        head: Head::Softmax,
    };
    let _ = two_conv;
    let bars_spec = |channels: usize, pool: bool| {
        let mut layers = vec![
            LayerSpec::Conv { out_channels: channels, kernel: 3, pad: 1 },
            LayerSpec::Relu,
        ];
        if pool {
            layers.push(LayerSpec::MaxPool);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: 2 });
        NetworkSpec { input: [1, 8, 8], layers, head: Head::Softmax }
    };
    let variants: Vec<(String, NetworkSpec, usize, usize, f64)> = vec![
        ("4ch pool e50".into(), bars_spec(4, true), 50, 32, 1e-3),
        ("8ch pool e20".into(), bars_spec(8, true), 20, 32, 1e-3),
        ("8ch nopool e20".into(), bars_spec(8, false), 20, 32, 1e-3),
    ];
    for (label, spec, epochs, batch, lr) in variants {
        let mut masses = Vec::new();
        let mut accs = Vec::new();
        for seed in 0..48u64 {
            let mut net = build_network(&spec, seed)?;
            let mut tc = TrainConfig::default();
            tc.epochs = epochs;
            tc.batch_size = batch;
            tc.adam.lr = lr;
            tc.shuffle_seed = seed + 1;
            train_classifier(&mut net, &train, None, &tc)?;
            accs.push(evaluate(&net, &test)?.accuracy);
            let mut cam_m = 0.0;
            for i in 0..test.len() {
                let im = test.image(i);
                let cl = {
                    let p = net.probabilities(&im)?;
                    if p.data()[0] >= p.data()[1] { 0 } else { 1 }
                };
                cam_m += stripe_mass(&compute_cam(&net, &im, cl)?, &im, cl);
            }
            masses.push(cam_m / 8.0);
        }
        let over = masses.iter().filter(|&&m| m >= 0.6).count();
        let acc_ok = accs.iter().filter(|&&a| a >= 0.99).count();
        let strs: Vec<String> = masses.iter().map(|m| format!("{m:.2}")).collect();
        println!("{label}: {over}/48 pass, {acc_ok}/48 acc>=0.99  [{}]", strs.join(" "));
        let mut best: Vec<(usize, f64)> = masses.iter().copied().enumerate().collect();
        best.sort_by(|a, b| b.1.total_cmp(&a.1));
        println!("  top seeds: {:?}", &best[..5]);
    }
    Ok(())
}

//! Render activation maps and causal-effect maps for one image.
//!
//! The activation map (CAM) weights the last convolution's channels by
//! their pooled gradients; it shows where the network looked. The
//! effect map (CEM) occludes image patches and scores the drop in the
//! chosen class's probability per pixel; it shows where evidence
//! actually moved the decision. The effect map reacts much more
//! strongly to adversarial perturbation, which the printed L1 gap
//! quantifies.
//!
//! PNGs land in runs/heatmaps/ with a .txt sidecar of raw statistics.
//!
//! Usage: cargo run --release --example heatmaps [seed]

use std::path::Path;

use causal_probe::attack::fgsm;
use causal_probe::config::RunConfig;
use causal_probe::data::{bars_stripe_index, synth_bars};
use causal_probe::heatmap::{compute_cam, compute_cem, l1_distance, render_heatmap, Heatmap};
use causal_probe::net::{build_network, train_classifier, TrainConfig};
use causal_probe::Tensor;

/// Fraction of a map's positive mass that lies on the stripe pixels.
fn stripe_mass(map: &Heatmap, image: &Tensor, class: usize) -> f64 {
    let stripe = bars_stripe_index(image, class);
    let (h, w) = (map.values.shape()[0], map.values.shape()[1]);
    let mut on = 0.0;
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = map.values.data()[r * w + c].max(0.0);
            total += v;
            let hit = if class == 0 { r == stripe } else { c == stripe };
            if hit {
                on += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        on / total
    }
}

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let train = synth_bars(512, seed);
    let test = synth_bars(8, seed + 7);
    let mut net = build_network(&RunConfig::default().model, seed + 1)?;
    let mut tc = TrainConfig::default();
    tc.shuffle_seed = seed + 2;
    train_classifier(&mut net, &train, None, &tc)?;

    let out = Path::new("runs/heatmaps");
    std::fs::create_dir_all(out).map_err(|e| causal_probe::Error::io(out, e))?;

    let image = test.image(0);
    let class = {
        let p = net.probabilities(&image)?;
        if p.data()[0] >= p.data()[1] { 0 } else { 1 }
    };
    println!(
        "image 0: predicted class {class} ({})",
        ["horizontal", "vertical"][class]
    );

    let cam = compute_cam(&net, &image, class)?;
    let cem = compute_cem(&net, &image, class, 4, 2)?;
    println!("CAM stripe mass: {:.1}%", 100.0 * stripe_mass(&cam, &image, class));
    println!("CEM stripe mass: {:.1}%", 100.0 * stripe_mass(&cem, &image, class));
    render_heatmap(&cam, Some(&image), &out.join("cam-clean.png"))?;
    render_heatmap(&cem, Some(&image), &out.join("cem-clean.png"))?;

    // Same maps for an adversarially perturbed copy of the same image.
    let idx: Vec<usize> = vec![0];
    let (one, label) = test.batch(&idx);
    let adv = fgsm(&net, &one, &label, 0.3)?;
    let cam_adv = compute_cam(&net, &adv, class)?;
    let cem_adv = compute_cem(&net, &adv, class, 4, 2)?;
    render_heatmap(&cam_adv, Some(&adv), &out.join("cam-fgsm.png"))?;
    render_heatmap(&cem_adv, Some(&adv), &out.join("cem-fgsm.png"))?;

    println!();
    println!("clean vs FGSM(0.3) sensitivity:");
    println!("  CAM L1 {:.6e}", l1_distance(&cam, &cam_adv)?);
    println!("  CEM L1 {:.6e}", l1_distance(&cem, &cem_adv)?);
    println!();
    println!("wrote 4 maps to {}", out.display());
    Ok(())
}

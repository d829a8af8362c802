//! The whole pipeline through the runner, exactly as the CLI would do
//! it: train a classifier, train a concept autoencoder, write the
//! causal-effect table, craft attacks, and render maps. Artifacts land
//! in runs/full-pipeline/ with a manifest that makes the directory
//! self-describing.
//!
//! Usage: cargo run --release --example full_pipeline [seed]

use std::path::PathBuf;

use causal_probe::config::RunConfig;
use causal_probe::runner::{run, Command};

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.out = PathBuf::from("runs/full-pipeline");
    cfg.causal.samples = 128;
    cfg.attack.samples = 32;
    cfg.attack.methods = vec![
        "fgsm".to_string(),
        "bim".to_string(),
        "pgd".to_string(),
        "jsma".to_string(),
    ];
    cfg.cem.images = 2;

    for command in [
        Command::Train,
        Command::TrainAe,
        Command::Ce,
        Command::Attack,
        Command::Cem,
        Command::Gradcheck,
    ] {
        println!("running {} ...", command.name());
        run(command, &cfg)?;
    }

    println!();
    println!("artifacts in {}:", cfg.out.display());
    let mut names: Vec<String> = std::fs::read_dir(&cfg.out)
        .map_err(|e| causal_probe::Error::io(&cfg.out, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for n in &names {
        println!("  {n}");
    }

    println!();
    let table = std::fs::read_to_string(cfg.out.join("ce-table.tsv"))
        .map_err(|e| causal_probe::Error::io(cfg.out.join("ce-table.tsv"), e))?;
    for line in table.lines().filter(|l| !l.starts_with('#')) {
        println!("{line}");
    }
    Ok(())
}

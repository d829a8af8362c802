//! Thin command-line front door. All behavior lives in the library;
//! this binary only parses arguments, applies overrides, and maps
//! errors onto exit codes (0 success, 2 config, 3 contract, 4 I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_probe::config::parse_config;
use causal_probe::runner::{self, Command};

#[derive(Parser)]
#[command(
    name = "causal-probe",
    version,
    about = "Train convolutional classifiers, insert concept autoencoders, and measure causal effects under clean, masked, and adversarial evidence"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; overrides the config's `out`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the classifier and write model.cpck
    Train(RunArgs),
    /// Train a concept autoencoder against the trained classifier
    TrainAe(RunArgs),
    /// Write the expected causal-effect table over the configured conditions
    Ce(RunArgs),
    /// Craft adversarial batches and, with an autoencoder present, an attack effect table
    Attack(RunArgs),
    /// Render activation and effect maps for clean and attacked images
    Cem(RunArgs),
    /// Finite-difference checks over every differentiable primitive
    Gradcheck(RunArgs),
}

fn dispatch(sub: Sub) -> causal_probe::Result<()> {
    let (command, args) = match sub {
        Sub::Train(a) => (Command::Train, a),
        Sub::TrainAe(a) => (Command::TrainAe, a),
        Sub::Ce(a) => (Command::Ce, a),
        Sub::Attack(a) => (Command::Attack, a),
        Sub::Cem(a) => (Command::Cem, a),
        Sub::Gradcheck(a) => (Command::Gradcheck, a),
    };
    let mut cfg = parse_config(&args.config)?;
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    runner::run(command, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("causal-probe: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}

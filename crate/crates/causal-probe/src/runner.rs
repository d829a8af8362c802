//! Command orchestration: each CLI command maps to one function here
//! that loads its inputs, runs the library, and writes artifacts into
//! the output directory.
//!
//! Every run first writes `manifest.toml` echoing the command and the
//! fully resolved config, so any artifact directory is self-describing.
//! Artifact files never contain wall-clock times or absolute paths;
//! identical config plus seed means byte-identical outputs.
//!
//! The global seed fans out to the stages at fixed offsets:
//!
//! | stage                  | seed     |
//! |------------------------|----------|
//! | train split synthesis  | seed     |
//! | model init             | seed + 1 |
//! | model shuffle          | seed + 2 |
//! | autoencoder init       | seed + 3 |
//! | pixel masking          | seed + 4 |
//! | attacks                | seed + 5 |
//! | test split synthesis   | seed + 7 |
//! | autoencoder shuffle    | seed + 8 |

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{craft, fgsm, AttackConfig, AttackMethod};
use crate::causal::{attack_ce_sweep, ce_report, write_ce_table, CeConfig, Condition};
use crate::checkpoint::{
    load_autoencoder, load_network, save_adversarial_batch, save_autoencoder, save_network,
};
use crate::concept::{
    build_autoencoder, evaluate_augmented, train_autoencoder, ConceptAutoencoder, ConceptSpec,
};
use crate::config::{DataKind, RunConfig};
use crate::data::{load_idx_pair, synth_bars, synth_blobs, Dataset, Labels};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOL};
use crate::heatmap::{
    compute_cam, compute_cem, compute_cem_augmented, l1_distance, render_heatmap,
};
use crate::net::{build_network, evaluate, train_classifier, LayerSpec, Network, Shape};
use crate::tensor::Tensor;

const SEED_MODEL_INIT: u64 = 1;
const SEED_MODEL_SHUFFLE: u64 = 2;
const SEED_AE_INIT: u64 = 3;
const SEED_PWM: u64 = 4;
const SEED_ATTACK: u64 = 5;
const SEED_TEST_DATA: u64 = 7;
const SEED_AE_SHUFFLE: u64 = 8;

/// The six CLI commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    TrainAe,
    Ce,
    Attack,
    Cem,
    Gradcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::TrainAe => "train-ae",
            Command::Ce => "ce",
            Command::Attack => "attack",
            Command::Cem => "cem",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Process exit code for an error. 0 is success; 2 config, 3 contract
/// or invariant violation, 4 I/O or file format.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Contract(_)
        | Error::ShapeMismatch { .. }
        | Error::Range(_)
        | Error::Diverged { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

/// Run one command with a fully resolved config. Validates, creates the
/// output directory, writes the manifest, then dispatches.
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_manifest(&out, command, cfg)?;
    match command {
        Command::Train => run_train(cfg, &out),
        Command::TrainAe => run_train_ae(cfg, &out),
        Command::Ce => run_ce(cfg, &out),
        Command::Attack => run_attack(cfg, &out),
        Command::Cem => run_cem(cfg, &out),
        Command::Gradcheck => run_gradcheck(cfg, &out),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    command: String,
    config: RunConfig,
}

fn write_manifest(out: &Path, command: Command, cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest {
        command: command.name().to_string(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    write_text(&out.join("manifest.toml"), &text)
}

/// Read back a manifest; the config equals the one the run resolved.
pub fn read_manifest(path: &Path) -> Result<(String, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((m.command, m.config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load one split per the data section. Synthetic kinds draw the train
/// and test splits from different seed streams; IDX kinds read the four
/// conventionally named files from `data.dir`.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let seed = match split {
        Split::Train => cfg.seed,
        Split::Test => cfg.seed + SEED_TEST_DATA,
    };
    match cfg.data.kind {
        DataKind::Bars => {
            let n = match split {
                Split::Train => cfg.data.train_samples,
                Split::Test => cfg.data.test_samples,
            };
            Ok(synth_bars(n, seed))
        }
        DataKind::Blobs => {
            let n = match split {
                Split::Train => cfg.data.train_samples,
                Split::Test => cfg.data.test_samples,
            };
            Ok(synth_blobs(n, seed))
        }
        DataKind::Idx => {
            let dir = cfg
                .data
                .dir
                .as_ref()
                .ok_or_else(|| Error::config("data.kind = \"idx\" requires data.dir"))?;
            let (images, labels, limit) = match split {
                Split::Train => (
                    "train-images-idx3-ubyte",
                    "train-labels-idx1-ubyte",
                    cfg.data.limit_train,
                ),
                Split::Test => (
                    "t10k-images-idx3-ubyte",
                    "t10k-labels-idx1-ubyte",
                    cfg.data.limit_test,
                ),
            };
            let ds = load_idx_pair(&dir.join(images), &dir.join(labels))?;
            Ok(match limit {
                Some(n) => ds.take(n),
                None => ds,
            })
        }
    }
}

fn require_file(path: &Path, remedy: &str) -> Result<()> {
    if path.is_file() {
        return Ok(());
    }
    Err(Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("not found; {remedy}"),
        ),
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn whole_batch(ds: &Dataset) -> (Tensor, Labels) {
    let idx: Vec<usize> = (0..ds.len()).collect();
    ds.batch(&idx)
}

fn describe_network(net: &Network) -> String {
    let layers: Vec<String> = net
        .spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                pad,
            } => format!("conv({out_channels},k{kernel},p{pad})"),
            LayerSpec::Relu => "relu".to_string(),
            LayerSpec::Sigmoid => "sigmoid".to_string(),
            LayerSpec::MaxPool => "max_pool".to_string(),
            LayerSpec::Flatten => "flatten".to_string(),
            LayerSpec::Dense { units } => format!("dense({units})"),
        })
        .collect();
    format!(
        "[{},{},{}] {} head={:?}",
        net.spec.input[0],
        net.spec.input[1],
        net.spec.input[2],
        layers.join(" "),
        net.spec.head
    )
    .to_lowercase()
}

fn describe_data(cfg: &RunConfig, train_n: usize, test_n: usize) -> String {
    let kind = match cfg.data.kind {
        DataKind::Bars => "bars",
        DataKind::Blobs => "blobs",
        DataKind::Idx => "idx",
    };
    format!("{kind} (train={train_n}, test={test_n})")
}

fn run_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train_ds = load_split(cfg, Split::Train)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let mut net = build_network(&cfg.model, cfg.seed + SEED_MODEL_INIT)?;
    let mut tc = cfg.train.clone();
    tc.shuffle_seed = cfg.seed + SEED_MODEL_SHUFFLE;
    let report = train_classifier(&mut net, &train_ds, Some(&test_ds), &tc)?;
    let eval = evaluate(&net, &test_ds)?;
    save_network(&out.join("model.cpck"), &net)?;

    let mut text = String::new();
    let _ = writeln!(text, "command: train");
    let _ = writeln!(text, "data: {}", describe_data(cfg, train_ds.len(), test_ds.len()));
    let _ = writeln!(text, "network: {}", describe_network(&net));
    let params: usize = net.params.iter().map(|p| p.value.numel()).sum();
    let _ = writeln!(text, "parameters: {params}");
    let _ = writeln!(text, "epochs: {}  batch_size: {}", tc.epochs, tc.batch_size);
    for e in &report.epochs {
        match e.test_accuracy {
            Some(a) => {
                let _ = writeln!(
                    text,
                    "epoch {}: mean_loss {:.6e}  test_accuracy {:.4}",
                    e.epoch, e.mean_loss, a
                );
            }
            None => {
                let _ = writeln!(text, "epoch {}: mean_loss {:.6e}", e.epoch, e.mean_loss);
            }
        }
    }
    let _ = writeln!(
        text,
        "final: test_accuracy {:.4}  mean_loss {:.6e}",
        eval.accuracy, eval.mean_loss
    );
    for c in &eval.per_class {
        let _ = writeln!(text, "class {}: {}/{}", c.class, c.correct, c.total);
    }
    write_text(&out.join("train-report.txt"), &text)
}

fn load_host(out: &Path) -> Result<Network> {
    let path = out.join("model.cpck");
    require_file(&path, "run `causal-probe train --config <path>` first")?;
    load_network(&path)
}

fn load_ae(out: &Path) -> Result<(ConceptAutoencoder, crate::concept::LossWeights)> {
    let path = out.join("autoencoder.cpck");
    require_file(&path, "run `causal-probe train-ae --config <path>` first")?;
    load_autoencoder(&path)
}

fn run_train_ae(cfg: &RunConfig, out: &Path) -> Result<()> {
    let host = load_host(out)?;
    let train_ds = load_split(cfg, Split::Train)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let level = cfg.autoencoder.level;
    let channels = match host.spec.level_shape(level)? {
        Shape::Spatial { c, .. } => c,
        Shape::Flat(_) => {
            return Err(Error::config(format!(
                "autoencoder.level {level} addresses a flat activation; insertion needs a spatial one"
            )))
        }
    };
    let spec = ConceptSpec {
        level,
        concepts: cfg.autoencoder.concepts,
        channels,
    };
    let mut ae = build_autoencoder(&spec, cfg.seed + SEED_AE_INIT)?;
    let mut tc = cfg.autoencoder.train.clone();
    tc.shuffle_seed = cfg.seed + SEED_AE_SHUFFLE;
    let report = train_autoencoder(&host, &mut ae, &train_ds, &tc)?;
    let host_eval = evaluate(&host, &test_ds)?;
    let aug_eval = evaluate_augmented(&host, &ae, &test_ds)?;
    save_autoencoder(&out.join("autoencoder.cpck"), &ae, &tc.weights)?;

    let mut text = String::new();
    let _ = writeln!(text, "command: train-ae");
    let _ = writeln!(text, "host: {}", describe_network(&host));
    let _ = writeln!(
        text,
        "insertion: level {}  concepts {}  host_channels {}",
        level, spec.concepts, channels
    );
    let _ = writeln!(
        text,
        "lambda: shallow={} deep={} interp={}",
        tc.weights.shallow, tc.weights.deep, tc.weights.interp
    );
    let _ = writeln!(text, "epochs: {}  batch_size: {}", tc.epochs, tc.batch_size);
    for e in &report.epochs {
        let _ = writeln!(
            text,
            "epoch {}: shallow {:.6e}  deep {:.6e}  interp {:.6e}  total {:.6e}",
            e.epoch, e.mean.shallow, e.mean.deep, e.mean.interp, e.mean.total
        );
    }
    let _ = writeln!(text, "host_accuracy: {:.4}", host_eval.accuracy);
    let _ = writeln!(text, "augmented_accuracy: {:.4}", aug_eval.accuracy);
    let _ = writeln!(
        text,
        "accuracy_drop: {:.4}",
        host_eval.accuracy - aug_eval.accuracy
    );
    write_text(&out.join("ae-report.txt"), &text)
}

/// Conditions named in the config, with seeds already derived.
fn build_conditions(cfg: &RunConfig) -> Result<Vec<Condition>> {
    cfg.causal
        .conditions
        .iter()
        .map(|name| {
            Ok(match name.as_str() {
                "z0" => Condition::Z0,
                "pwm" => Condition::Pwm {
                    fraction: cfg.causal.pwm_fraction,
                    seed: cfg.seed + SEED_PWM,
                },
                other => Condition::Attack {
                    method: AttackMethod::parse(other)?,
                    config: cfg.attack.to_config(cfg.seed + SEED_ATTACK),
                },
            })
        })
        .collect()
}

fn resolve_targets(cfg: &RunConfig, concepts: usize) -> Result<Vec<usize>> {
    if cfg.causal.targets.is_empty() {
        return Ok((0..concepts).collect());
    }
    for &t in &cfg.causal.targets {
        if t >= concepts {
            return Err(Error::config(format!(
                "causal target {t} out of range; the autoencoder has {concepts} concept channels"
            )));
        }
    }
    Ok(cfg.causal.targets.clone())
}

fn run_ce(cfg: &RunConfig, out: &Path) -> Result<()> {
    let host = load_host(out)?;
    let (ae, lambdas) = load_ae(out)?;
    let ds = load_split(cfg, Split::Test)?.take(cfg.causal.samples);
    let (images, labels) = whole_batch(&ds);
    let targets = resolve_targets(cfg, ae.spec.concepts)?;
    let conditions = build_conditions(cfg)?;
    let ce_cfg = CeConfig {
        bins: cfg.causal.bins,
        baseline: cfg.causal.baseline,
        policy: cfg.causal.policy,
        lambda: lambdas,
    };
    let report = ce_report(&host, &ae, &images, &labels, &targets, &conditions, &ce_cfg)?;
    write_ce_table(&out.join("ce-table.tsv"), &report)
}

/// Per-sample max |adv - x|, reduced to (mean, max) over the batch.
fn distortion_stats(orig: &Tensor, adv: &Tensor) -> (f64, f64) {
    let n = orig.shape()[0];
    let per = orig.numel() / n;
    let mut sum = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut m = 0.0f64;
        for j in 0..per {
            m = m.max((orig.data()[i * per + j] - adv.data()[i * per + j]).abs());
        }
        sum += m;
        worst = worst.max(m);
    }
    (sum / n as f64, worst)
}

/// Spatial positions of sample `i` where any channel moved.
fn changed_pixels(orig: &Tensor, adv: &Tensor, i: usize) -> usize {
    let s = orig.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let per = c * plane;
    (0..plane)
        .filter(|&p| {
            (0..c).any(|ch| {
                let at = i * per + ch * plane + p;
                orig.data()[at] != adv.data()[at]
            })
        })
        .count()
}

fn run_attack(cfg: &RunConfig, out: &Path) -> Result<()> {
    let host = load_host(out)?;
    let ds = load_split(cfg, Split::Test)?.take(cfg.attack.samples);
    let (images, labels) = whole_batch(&ds);
    let acfg = cfg.attack.to_config(cfg.seed + SEED_ATTACK);

    let mut text = String::new();
    let _ = writeln!(text, "command: attack");
    let _ = writeln!(text, "samples: {}", ds.len());
    let _ = writeln!(
        text,
        "epsilon: {}  steps: {}  step_size: {}  theta: {}  gamma: {}  seed: {}",
        acfg.epsilon,
        acfg.steps,
        acfg.resolved_step_size(),
        acfg.theta,
        acfg.gamma,
        acfg.seed
    );
    for name in &cfg.attack.methods {
        let method = AttackMethod::parse(name)?;
        let batch = craft(&host, &images, &labels, method, &acfg)?;
        save_adversarial_batch(&out.join(format!("attack-{name}.cpck")), &batch)?;
        let (mean_linf, max_linf) = distortion_stats(&batch.originals, &batch.adversarials);
        if method == AttackMethod::Jsma {
            let counts: Vec<usize> = (0..ds.len())
                .map(|i| changed_pixels(&batch.originals, &batch.adversarials, i))
                .collect();
            let s = images.shape();
            let budget = (acfg.gamma * (s[2] * s[3]) as f64).ceil() as usize;
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            let max = counts.iter().max().copied().unwrap_or(0);
            let _ = writeln!(
                text,
                "{name}: success_rate {:.4}  changed_pixels mean {:.2} max {}  budget {}",
                batch.success_rate(),
                mean,
                max,
                budget
            );
        } else {
            let _ = writeln!(
                text,
                "{name}: success_rate {:.4}  mean_linf {:.6}  max_linf {:.6}",
                batch.success_rate(),
                mean_linf,
                max_linf
            );
        }
    }

    // With an autoencoder present, add the effect table across attack
    // regimes at the first configured target.
    let ae_path = out.join("autoencoder.cpck");
    if ae_path.is_file() {
        let (ae, lambdas) = load_autoencoder(&ae_path)?;
        let node = resolve_targets(cfg, ae.spec.concepts)?[0];
        let attacks: Vec<(AttackMethod, AttackConfig)> = cfg
            .attack
            .methods
            .iter()
            .map(|m| Ok((AttackMethod::parse(m)?, acfg.clone())))
            .collect::<Result<_>>()?;
        let ce_cfg = CeConfig {
            bins: cfg.causal.bins,
            baseline: cfg.causal.baseline,
            policy: cfg.causal.policy,
            lambda: lambdas,
        };
        let report = attack_ce_sweep(&host, &ae, &images, &labels, node, &attacks, &ce_cfg)?;
        write_ce_table(&out.join("attack-ce.tsv"), &report)?;
        let _ = writeln!(text, "attack_ce_table: attack-ce.tsv (node {node})");
    }
    write_text(&out.join("attack-report.txt"), &text)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn image_of(batch: &Tensor, i: usize) -> Tensor {
    let mut shape = batch.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    shape[0] = 1;
    Tensor::new(shape, batch.data()[i * per..(i + 1) * per].to_vec()).expect("valid slice")
}

fn run_cem(cfg: &RunConfig, out: &Path) -> Result<()> {
    let host = load_host(out)?;
    let ae = if cfg.cem.augmented {
        Some(load_ae(out)?.0)
    } else {
        None
    };
    let ds = load_split(cfg, Split::Test)?.take(cfg.cem.images);
    let (images, labels) = whole_batch(&ds);
    let adv = fgsm(&host, &images, &labels, cfg.cem.epsilon)?;

    let mut text = String::new();
    let _ = writeln!(text, "command: cem");
    let _ = writeln!(
        text,
        "images: {}  patch: {}  stride: {}  epsilon: {}  scorer: {}",
        ds.len(),
        cfg.cem.patch,
        cfg.cem.stride,
        cfg.cem.epsilon,
        if cfg.cem.augmented { "augmented" } else { "plain" }
    );
    for i in 0..ds.len() {
        let clean = ds.image(i);
        let advi = image_of(&adv, i);
        let class = argmax(host.probabilities(&clean)?.data());

        let cam_clean = compute_cam(&host, &clean, class)?;
        render_heatmap(&cam_clean, Some(&clean), &out.join(format!("cam-{i}.png")))?;
        let cam_adv = compute_cam(&host, &advi, class)?;
        render_heatmap(&cam_adv, Some(&advi), &out.join(format!("cam-fgsm-{i}.png")))?;

        let effect = |img: &Tensor| match &ae {
            Some(ae) => {
                compute_cem_augmented(&host, ae, img, class, cfg.cem.patch, cfg.cem.stride)
            }
            None => compute_cem(&host, img, class, cfg.cem.patch, cfg.cem.stride),
        };
        let cem_clean = effect(&clean)?;
        render_heatmap(&cem_clean, Some(&clean), &out.join(format!("cem-{i}.png")))?;
        let cem_adv = effect(&advi)?;
        render_heatmap(&cem_adv, Some(&advi), &out.join(format!("cem-fgsm-{i}.png")))?;

        let cem_l1 = l1_distance(&cem_clean, &cem_adv)?;
        let cam_l1 = l1_distance(&cam_clean, &cam_adv)?;
        let _ = writeln!(text, "image {i}: class {class}");
        let _ = writeln!(text, "image {i}: cem_l1_clean_vs_adv {cem_l1:.6e}");
        let _ = writeln!(text, "image {i}: cam_l1_clean_vs_adv {cam_l1:.6e}");
    }
    write_text(&out.join("cem-report.txt"), &text)
}

fn run_gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let reports = run_suite(100, cfg.seed, DEFAULT_EPS)?;
    let mut text = String::new();
    let _ = writeln!(text, "command: gradcheck");
    let _ = writeln!(
        text,
        "cases: {}  eps: {:.0e}  tolerance: {:.0e}",
        reports.len(),
        DEFAULT_EPS,
        DEFAULT_TOL
    );
    let mut failures = Vec::new();
    let mut worst: Option<&crate::gradcheck::CheckReport> = None;
    for r in &reports {
        let _ = writeln!(
            text,
            "{}: elements {}  max_rel_err {:.3e}",
            r.name, r.elements, r.max_rel_err
        );
        if r.max_rel_err >= DEFAULT_TOL {
            failures.push(r.name.clone());
        }
        if worst.map_or(true, |w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    if let Some(w) = worst {
        let _ = writeln!(text, "worst: {} ({:.3e})", w.name, w.max_rel_err);
    }
    let _ = writeln!(
        text,
        "result: {}",
        if failures.is_empty() { "pass" } else { "FAIL" }
    );
    write_text(&out.join("gradcheck-report.txt"), &text)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AutoencoderSection, CausalSection};

    fn tiny_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.out = out.to_path_buf();
        cfg.data.train_samples = 64;
        cfg.data.test_samples = 32;
        cfg.train.epochs = 1;
        cfg.autoencoder = AutoencoderSection {
            level: 1,
            concepts: 2,
            train: {
                let mut t = crate::concept::AeTrainConfig::default();
                t.epochs = 1;
                t
            },
        };
        cfg.causal = CausalSection {
            samples: 16,
            bins: 4,
            ..CausalSection::default()
        };
        cfg.attack.samples = 4;
        cfg.attack.methods = vec!["fgsm".to_string(), "jsma".to_string()];
        cfg.cem.images = 1;
        cfg
    }

    fn run_pipeline(cfg: &RunConfig) {
        run(Command::Train, cfg).unwrap();
        run(Command::TrainAe, cfg).unwrap();
        run(Command::Ce, cfg).unwrap();
        run(Command::Attack, cfg).unwrap();
        run(Command::Cem, cfg).unwrap();
    }

    #[test]
    fn bars_pipeline_writes_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        run_pipeline(&cfg);
        for name in [
            "manifest.toml",
            "model.cpck",
            "train-report.txt",
            "autoencoder.cpck",
            "ae-report.txt",
            "ce-table.tsv",
            "attack-fgsm.cpck",
            "attack-jsma.cpck",
            "attack-report.txt",
            "attack-ce.tsv",
            "cam-0.png",
            "cam-0.txt",
            "cam-fgsm-0.png",
            "cem-0.png",
            "cem-0.txt",
            "cem-fgsm-0.png",
            "cem-report.txt",
        ] {
            assert!(dir.path().join(name).is_file(), "missing {name}");
        }

        let (command, echoed) = read_manifest(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(command, "cem");
        assert_eq!(echoed, cfg);

        // 2 concepts x 3 conditions, plus preamble and header.
        let table = std::fs::read_to_string(dir.path().join("ce-table.tsv")).unwrap();
        let data_rows = table
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("level"))
            .count();
        assert_eq!(data_rows, 6);

        let report = std::fs::read_to_string(dir.path().join("cem-report.txt")).unwrap();
        assert!(report.contains("cem_l1_clean_vs_adv"));
        assert!(report.contains("cam_l1_clean_vs_adv"));
    }

    #[test]
    fn identical_configs_give_identical_tables_and_images() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = tiny_cfg(d1.path());
        let c2 = tiny_cfg(d2.path());
        run_pipeline(&c1);
        run_pipeline(&c2);
        for name in ["ce-table.tsv", "attack-ce.tsv", "cem-0.png", "cam-0.png"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn missing_checkpoint_names_path_and_remedy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let err = run(Command::Ce, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.cpck"), "{msg}");
        assert!(msg.contains("train"), "{msg}");
        assert_eq!(exit_code(&err), 4);
    }

    #[test]
    fn out_of_range_target_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        run(Command::Train, &cfg).unwrap();
        run(Command::TrainAe, &cfg).unwrap();
        cfg.causal.targets = vec![9];
        let err = run(Command::Ce, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::contract("x")), 3);
        assert_eq!(exit_code(&Error::range("x")), 3);
        assert_eq!(
            exit_code(&Error::Diverged { epoch: 0, step: 0 }),
            3
        );
        assert_eq!(
            exit_code(&Error::io(
                "p",
                std::io::Error::new(std::io::ErrorKind::NotFound, "gone")
            )),
            4
        );
        assert_eq!(
            exit_code(&Error::Format {
                path: "p".into(),
                offset: 0,
                message: "bad".into()
            }),
            4
        );
    }
}

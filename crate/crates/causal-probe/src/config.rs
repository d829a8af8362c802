//! Run configuration: one TOML file drives every command.
//!
//! Parsing fills defaults immediately, so a parsed config is fully
//! concrete and can be echoed verbatim into a run manifest; re-parsing
//! the manifest yields an equal config. Unknown keys are errors.
//!
//! Seeds: the file carries one global seed (overridable on the command
//! line). Every stochastic stage derives its own seed from it at fixed
//! offsets; see the runner for the table. Per-stage seeds are not
//! separately configurable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal::{BaselineMode, ClassPolicy};
use crate::concept::AeTrainConfig;
use crate::error::{Error, Result};
use crate::net::{Head, LayerSpec, NetworkSpec, TrainConfig};

/// Where evaluation and training data come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Synthetic 8x8 stripe images, class = horizontal vs vertical.
    Bars,
    /// Synthetic 4x4 intensity blobs, two well-separated classes.
    Blobs,
    /// IDX files (MNIST family) under `dir`.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Synthetic sample counts; ignored for IDX data.
    pub train_samples: usize,
    pub test_samples: usize,
    /// Directory holding the four standard IDX files; required for
    /// `kind = "idx"`.
    pub dir: Option<PathBuf>,
    /// Keep only the first n samples of each IDX split.
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Bars,
            train_samples: 512,
            test_samples: 128,
            dir: None,
            limit_train: None,
            limit_test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    /// Insertion level: 1-based index over the host's post-activation
    /// layers.
    pub level: usize,
    /// Bottleneck channel count.
    pub concepts: usize,
    pub train: AeTrainConfig,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            level: 1,
            concepts: 4,
            train: AeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalSection {
    /// Concept channels to probe; empty means all of them.
    pub targets: Vec<usize>,
    pub bins: usize,
    pub baseline: BaselineMode,
    pub policy: ClassPolicy,
    /// Evaluation subset size (prefix of the test split).
    pub samples: usize,
    /// Conditions, by name: z0, pwm, fgsm, bim, pgd, jsma.
    pub conditions: Vec<String>,
    pub pwm_fraction: f64,
}

impl Default for CausalSection {
    fn default() -> Self {
        CausalSection {
            targets: Vec::new(),
            bins: 8,
            baseline: BaselineMode::default(),
            policy: ClassPolicy::default(),
            samples: 256,
            conditions: vec!["z0".to_string(), "pwm".to_string(), "fgsm".to_string()],
            pwm_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Which attacks the `attack` command runs.
    pub methods: Vec<String>,
    /// Batch size (prefix of the test split).
    pub samples: usize,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-iteration step; `None` resolves to
    /// `min(epsilon, 2.5 * epsilon / steps)`.
    pub step_size: Option<f64>,
    pub theta: f64,
    pub gamma: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            methods: vec![
                "fgsm".to_string(),
                "bim".to_string(),
                "pgd".to_string(),
                "jsma".to_string(),
            ],
            samples: 256,
            epsilon: 0.3,
            steps: 10,
            step_size: None,
            theta: 1.0,
            gamma: 0.1,
        }
    }
}

impl AttackSection {
    /// The shared attack knobs with a caller-chosen seed.
    pub fn to_config(&self, seed: u64) -> crate::attack::AttackConfig {
        crate::attack::AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            theta: self.theta,
            gamma: self.gamma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemSection {
    pub patch: usize,
    pub stride: usize,
    /// How many test images to map.
    pub images: usize,
    /// Score occlusions through the autoencoder-augmented network.
    pub augmented: bool,
    /// Strength of the adversarial copy used for the sensitivity
    /// comparison.
    pub epsilon: f64,
}

impl Default for CemSection {
    fn default() -> Self {
        CemSection {
            patch: 4,
            stride: 2,
            images: 2,
            augmented: false,
            epsilon: 0.3,
        }
    }
}

/// Everything a run needs. Defaults describe the synthetic bars
/// pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact directory; `--out` overrides.
    pub out: PathBuf,
    pub data: DataSection,
    pub model: NetworkSpec,
    pub train: TrainConfig,
    pub autoencoder: AutoencoderSection,
    pub causal: CausalSection,
    pub attack: AttackSection,
    pub cem: CemSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            model: NetworkSpec {
                input: [1, 8, 8],
                layers: vec![
                    LayerSpec::Conv {
                        out_channels: 8,
                        kernel: 3,
                        pad: 1,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 2 },
                ],
                head: Head::Softmax,
            },
            train: TrainConfig::default(),
            autoencoder: AutoencoderSection::default(),
            causal: CausalSection::default(),
            attack: AttackSection::default(),
            cem: CemSection::default(),
        }
    }
}

const CONDITION_NAMES: [&str; 6] = ["z0", "pwm", "fgsm", "bim", "pgd", "jsma"];
const METHOD_NAMES: [&str; 4] = ["fgsm", "bim", "pgd", "jsma"];

impl RunConfig {
    /// Cross-field checks that type-level parsing cannot express.
    /// Violations are config errors, not contract errors.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.data.kind == DataKind::Idx && self.data.dir.is_none() {
            return fail("data.kind = \"idx\" requires data.dir".to_string());
        }
        if self.causal.bins < 2 {
            return fail(format!("causal.bins must be at least 2, got {}", self.causal.bins));
        }
        if self.causal.samples < self.causal.bins {
            return fail(format!(
                "causal.samples ({}) must cover causal.bins ({})",
                self.causal.samples, self.causal.bins
            ));
        }
        if !(0.0..1.0).contains(&self.causal.pwm_fraction) || self.causal.pwm_fraction == 0.0 {
            return fail(format!(
                "causal.pwm_fraction must lie in (0, 1), got {}",
                self.causal.pwm_fraction
            ));
        }
        for c in &self.causal.conditions {
            if !CONDITION_NAMES.contains(&c.as_str()) {
                return fail(format!(
                    "unknown condition '{c}'; choose from {CONDITION_NAMES:?}"
                ));
            }
        }
        if self.causal.conditions.is_empty() {
            return fail("causal.conditions must name at least one condition".to_string());
        }
        for m in &self.attack.methods {
            if !METHOD_NAMES.contains(&m.as_str()) {
                return fail(format!(
                    "unknown attack method '{m}'; choose from {METHOD_NAMES:?}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.attack.epsilon) {
            return fail(format!(
                "attack.epsilon must lie in [0, 1], got {}",
                self.attack.epsilon
            ));
        }
        if self.attack.steps == 0 {
            return fail("attack.steps must be positive".to_string());
        }
        if let Some(s) = self.attack.step_size {
            if !(s > 0.0 && s <= self.attack.epsilon) {
                return fail(format!(
                    "attack.step_size must lie in (0, epsilon], got {s}"
                ));
            }
        }
        if self.cem.patch == 0 || self.cem.stride == 0 {
            return fail("cem.patch and cem.stride must be positive".to_string());
        }
        if self.cem.stride > self.cem.patch {
            return fail(format!(
                "cem.stride ({}) must not exceed cem.patch ({}) or pixels go uncovered",
                self.cem.stride, self.cem.patch
            ));
        }
        if self.autoencoder.concepts == 0 {
            return fail("autoencoder.concepts must be positive".to_string());
        }
        Ok(())
    }
}

/// Parse a config file; defaults are filled in the returned value.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| {
        Error::Config(format!("{}: {e}", path.display()))
    })?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_the_documented_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.attack.epsilon, 0.3);
        assert_eq!(cfg.attack.steps, 10);
        assert_eq!(cfg.causal.pwm_fraction, 0.10);
        assert_eq!(cfg.causal.bins, 8);
        assert_eq!(cfg.autoencoder.train.weights.shallow, 1.0);
        assert_eq!(cfg.autoencoder.train.weights.deep, 1.0);
        assert_eq!(cfg.autoencoder.train.weights.interp, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_attack_section_still_gets_attack_defaults() {
        let cfg: RunConfig = toml::from_str("[attack]\n").unwrap();
        assert_eq!(cfg.attack.epsilon, 0.3);
        assert_eq!(cfg.attack.steps, 10);
    }

    #[test]
    fn unknown_keys_are_errors_naming_the_key() {
        let err = toml::from_str::<RunConfig>("[attack]\nepsilonn = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
        let err = toml::from_str::<RunConfig>("sneed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sneed"), "{err}");
    }

    #[test]
    fn serialized_config_reparses_equal() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.causal.targets = vec![1, 3];
        cfg.attack.step_size = Some(0.05);
        cfg.causal.policy = ClassPolicy::Fixed(1);
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cross_field_validation_catches_bad_combinations() {
        let mut cfg = RunConfig::default();
        cfg.data.kind = DataKind::Idx;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.causal.conditions = vec!["zz9".to_string()];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.causal.samples = 4;
        cfg.causal.bins = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.cem.stride = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.attack.step_size = Some(0.4);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn a_full_config_file_parses() {
        let text = r#"
seed = 7

[data]
kind = "idx"
dir = "data/fashion-mnist"
limit_train = 6000
limit_test = 1000

[model]
input = [1, 28, 28]
head = "softmax"

[[model.layers]]
kind = "conv"
out_channels = 16
kernel = 3
pad = 1

[[model.layers]]
kind = "relu"

[[model.layers]]
kind = "max_pool"

[[model.layers]]
kind = "flatten"

[[model.layers]]
kind = "dense"
units = 10

[train]
epochs = 2
batch_size = 100

[autoencoder]
level = 1
concepts = 4

[causal]
targets = [0, 1]
conditions = ["z0", "pwm", "fgsm"]

[attack]
methods = ["fgsm", "pgd"]

[cem]
patch = 4
stride = 2
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.input, [1, 28, 28]);
        assert_eq!(cfg.model.layers.len(), 5);
        assert_eq!(cfg.causal.targets, vec![0, 1]);
    }
}

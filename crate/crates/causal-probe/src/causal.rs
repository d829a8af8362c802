//! Do-operator on bottleneck concepts and the causal-effect estimates
//! built on it.
//!
//! A concept is one bottleneck channel of the inserted autoencoder; its
//! scalar summary is the per-sample spatial mean. The effect of forcing
//! a concept to a value is the change it makes to the probability the
//! augmented network assigns to a policy class, averaged over an
//! evaluation set. The expected effect averages the per-bin effects of
//! the concept's observed values under an evidence distribution: the
//! bins, the replayed do-values and the baseline always come from the
//! observed inputs, while the evidence condition (clean inputs, random
//! pixel masking, or an adversarial attack) decides how much weight
//! each bin receives.
//!
//! Everything here treats the networks as read only; per-sample work is
//! reduced in index order, so results are bit-identical across runs.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMethod, JsmaTarget};
use crate::concept::{level_activations, ConceptAutoencoder, LossWeights};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, stable_sigmoid, Graph};
use crate::net::{Head, Network};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// State of an intervention variable: leave the concept alone or force
/// it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intervention {
    Idle,
    Do { value: f64 },
}

/// Apply an intervention to bottleneck activations `[N, K, h, w]`.
///
/// Idle is the identity, bitwise. `Do(v)` shifts each sample's channel
/// additively so its spatial mean lands exactly on `v`, preserving the
/// spatial pattern; `Do(0)` is the degenerate shift-to-zero case and
/// zero-fills the channel outright.
pub fn apply_intervention(
    bottleneck: &Tensor,
    channel: usize,
    state: Intervention,
) -> Result<Tensor> {
    if bottleneck.rank() != 4 {
        return Err(Error::contract(format!(
            "bottleneck must be [N,K,h,w], got {:?}",
            bottleneck.shape()
        )));
    }
    let [n, k, h, w] = [
        bottleneck.shape()[0],
        bottleneck.shape()[1],
        bottleneck.shape()[2],
        bottleneck.shape()[3],
    ];
    if channel >= k {
        return Err(Error::range(format!(
            "concept channel {channel} out of range for {k} channels"
        )));
    }
    let value = match state {
        Intervention::Idle => return Ok(bottleneck.clone()),
        Intervention::Do { value } => value,
    };
    let mut out = bottleneck.clone();
    let plane = h * w;
    for i in 0..n {
        let base = i * k * plane + channel * plane;
        let slice = &mut out.data_mut()[base..base + plane];
        if value == 0.0 {
            slice.fill(0.0);
        } else {
            let mean = slice.iter().sum::<f64>() / plane as f64;
            let shift = value - mean;
            for v in slice.iter_mut() {
                *v += shift;
            }
        }
    }
    Ok(out)
}

/// Per-sample spatial mean of one bottleneck channel.
pub fn concept_summaries(bottleneck: &Tensor, channel: usize) -> Result<Vec<f64>> {
    if bottleneck.rank() != 4 {
        return Err(Error::contract(format!(
            "bottleneck must be [N,K,h,w], got {:?}",
            bottleneck.shape()
        )));
    }
    let [n, k, h, w] = [
        bottleneck.shape()[0],
        bottleneck.shape()[1],
        bottleneck.shape()[2],
        bottleneck.shape()[3],
    ];
    if channel >= k {
        return Err(Error::range(format!(
            "concept channel {channel} out of range for {k} channels"
        )));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let base = i * k * plane + channel * plane;
            bottleneck.data()[base..base + plane].iter().sum::<f64>() / plane as f64
        })
        .collect())
}

/// Evidence regime that sets the weighting distribution of an expected
/// effect. The regime transforms the inputs whose concept summaries are
/// histogrammed; it never touches the do or baseline passes.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Clean inputs; the zero-out regime lives entirely in the baseline
    /// term.
    Z0,
    /// Random pixel masking, `fraction` of each image zeroed.
    Pwm { fraction: f64, seed: u64 },
    /// Inputs replaced by adversarial examples.
    Attack {
        method: AttackMethod,
        config: AttackConfig,
    },
}

impl Condition {
    /// Short label used in report rows.
    pub fn label(&self) -> String {
        match self {
            Condition::Z0 => "Z0".to_string(),
            Condition::Pwm { fraction, .. } => format!("PWM({fraction:.2})"),
            Condition::Attack { method, config } => match method {
                AttackMethod::Jsma => format!(
                    "JSMA({:.2},{:.2})",
                    config.theta, config.gamma
                ),
                _ => format!(
                    "{}({:.2})",
                    method.name().to_uppercase(),
                    config.epsilon
                ),
            },
        }
    }

    /// Full parameter echo for report metadata.
    pub fn describe(&self) -> String {
        match self {
            Condition::Z0 => "clean inputs".to_string(),
            Condition::Pwm { fraction, seed } => {
                format!("pixel mask fraction={fraction} fill=0 seed={seed}")
            }
            Condition::Attack { method, config } => format!(
                "{} epsilon={} steps={} step_size={} theta={} gamma={} seed={}",
                method.name(),
                config.epsilon,
                config.steps,
                config.resolved_step_size(),
                config.theta,
                config.gamma,
                config.seed
            ),
        }
    }
}

/// What the baseline term of an effect measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Channel zero-filled: the zero-out counterfactual reading.
    ZeroFill,
    /// Channel untouched: the plain conditioned forward.
    Clean,
}

impl BaselineMode {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMode::ZeroFill => "zero_fill",
            BaselineMode::Clean => "clean",
        }
    }
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::ZeroFill
    }
}

/// Which output class an effect is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPolicy {
    /// Per sample, the class the augmented network predicts on the
    /// clean input.
    CleanPrediction,
    /// One class for every sample.
    Fixed(usize),
}

impl ClassPolicy {
    pub fn label(&self) -> String {
        match self {
            ClassPolicy::CleanPrediction => "clean_prediction".to_string(),
            ClassPolicy::Fixed(c) => format!("fixed({c})"),
        }
    }
}

impl Default for ClassPolicy {
    fn default() -> Self {
        ClassPolicy::CleanPrediction
    }
}

/// Mask pixels of a batch: per image, exactly `round(fraction * H * W)`
/// distinct pixels (or the given fixed region) set to `fill` across all
/// channels. Sample `i` draws its mask from a stream seeded
/// `seed + i`, so any batch prefix masks identically.
pub fn pixel_mask(
    images: &Tensor,
    fraction: f64,
    fill: f64,
    seed: u64,
    region: Option<&[bool]>,
) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::contract(format!(
            "mask input must be [N,C,H,W], got {:?}",
            images.shape()
        )));
    }
    let [n, c, h, w] = [
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    ];
    let plane = h * w;
    let mut out = images.clone();
    match region {
        Some(mask) => {
            if mask.len() != plane {
                return Err(Error::contract(format!(
                    "region mask has {} entries for {h}x{w} images",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::contract("region mask selects no pixels"));
            }
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for (p, &m) in mask.iter().enumerate() {
                        if m {
                            out.data_mut()[base + p] = fill;
                        }
                    }
                }
            }
        }
        None => {
            if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
                return Err(Error::range(format!(
                    "mask fraction must lie in (0, 1), got {fraction}"
                )));
            }
            let count = (fraction * plane as f64).round() as usize;
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut order: Vec<usize> = (0..plane).collect();
                // Partial Fisher-Yates: only the first `count` draws
                // matter.
                for j in 0..count {
                    let k = rng.random_range(j..plane);
                    order.swap(j, k);
                }
                for &p in &order[..count] {
                    for ch in 0..c {
                        out.data_mut()[(i * c + ch) * plane + p] = fill;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transform evaluation inputs according to a condition. Labels feed
/// the loss the gradient attacks ascend.
pub fn apply_condition(
    host: &Network,
    images: &Tensor,
    labels: &Labels,
    condition: &Condition,
) -> Result<Tensor> {
    match condition {
        Condition::Z0 => Ok(images.clone()),
        Condition::Pwm { fraction, seed } => pixel_mask(images, *fraction, 0.0, *seed, None),
        Condition::Attack { method, config } => match method {
            AttackMethod::Fgsm => attack::fgsm(host, images, labels, config.epsilon),
            AttackMethod::Bim => attack::bim(
                host,
                images,
                labels,
                config.epsilon,
                config.steps,
                config.resolved_step_size(),
            ),
            AttackMethod::Pgd => attack::pgd(
                host,
                images,
                labels,
                config.epsilon,
                config.steps,
                config.resolved_step_size(),
                config.seed,
            ),
            AttackMethod::Jsma => Ok(attack::jsma(
                host,
                images,
                JsmaTarget::LeastLikely,
                config.theta,
                config.gamma,
            )?
            .adversarials),
        },
    }
}

/// Quantile discretization of a concept summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    /// Bin edges, `bins + 1` values from min to max.
    pub edges: Vec<f64>,
    /// Per-bin mean summary, the value a do-intervention replays.
    pub representatives: Vec<f64>,
    /// Empirical bin frequencies; they sum to 1.
    pub probs: Vec<f64>,
    /// All summaries equal; collapsed to a single bin of probability 1.
    pub degenerate: bool,
}

/// Equal-frequency binning. Needs `bins >= 2` and at least `bins`
/// samples; a constant summary collapses to one bin.
pub fn discretize_concept(summaries: &[f64], bins: usize) -> Result<Discretization> {
    if bins < 2 {
        return Err(Error::contract(format!("need at least 2 bins, got {bins}")));
    }
    if summaries.len() < bins {
        return Err(Error::contract(format!(
            "need at least {bins} samples to fill {bins} bins, got {}",
            summaries.len()
        )));
    }
    if summaries.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite concept summary"));
    }
    let mut sorted = summaries.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if sorted[0] == sorted[n - 1] {
        return Ok(Discretization {
            edges: vec![sorted[0], sorted[0]],
            representatives: vec![sorted[0]],
            probs: vec![1.0],
            degenerate: true,
        });
    }
    let mut edges = Vec::with_capacity(bins + 1);
    let mut representatives = Vec::with_capacity(bins);
    let mut probs = Vec::with_capacity(bins);
    edges.push(sorted[0]);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        let slice = &sorted[lo..hi];
        representatives.push(slice.iter().sum::<f64>() / slice.len() as f64);
        probs.push(slice.len() as f64 / n as f64);
        edges.push(if hi == n { sorted[n - 1] } else { sorted[hi] });
    }
    Ok(Discretization {
        edges,
        representatives,
        probs,
        degenerate: false,
    })
}

/// Bin index of a summary value against fixed bins. Interior edges are
/// the lower bounds of the bin above them; values beyond either extreme
/// land in the end bins.
pub fn classify_summary(disc: &Discretization, value: f64) -> usize {
    let bins = disc.representatives.len();
    let mut b = 0;
    for e in &disc.edges[1..bins] {
        if value >= *e {
            b += 1;
        } else {
            break;
        }
    }
    b
}

/// Empirical bin frequencies of a summary sample over fixed bins; they
/// sum to 1 for any nonempty sample.
pub fn condition_weights(disc: &Discretization, summaries: &[f64]) -> Result<Vec<f64>> {
    if summaries.is_empty() {
        return Err(Error::contract("empty summary sample"));
    }
    if summaries.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite concept summary"));
    }
    let mut counts = vec![0usize; disc.representatives.len()];
    for &s in summaries {
        counts[classify_summary(disc, s)] += 1;
    }
    let n = summaries.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Encoder pass of the augmented trunk: images through the host up to
/// the insertion level, then through the encoder. Chunked; output
/// `[N, K, h, w]`.
pub fn bottlenecks(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let sample = images.numel() / n;
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let lo = chunk[0] * sample;
        let hi = (chunk[chunk.len() - 1] + 1) * sample;
        let mut cs = images.shape().to_vec();
        cs[0] = chunk.len();
        let part = Tensor::new(cs, images.data()[lo..hi].to_vec())?;
        let tap = level_activations(host, ae.spec.level, &part)?;
        let z = ae.encode(&tap)?;
        if shape.is_empty() {
            shape = z.shape().to_vec();
        }
        data.extend_from_slice(z.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Probabilities of the augmented network resumed from bottleneck
/// activations: decoder, then the host tail past the insertion level.
/// Chunked; output `[N, classes]`.
pub fn tail_probabilities(
    host: &Network,
    ae: &ConceptAutoencoder,
    z: &Tensor,
) -> Result<Tensor> {
    let n = z.shape()[0];
    let sample = z.numel() / n;
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let lo = chunk[0] * sample;
        let hi = (chunk[chunk.len() - 1] + 1) * sample;
        let mut cs = z.shape().to_vec();
        cs[0] = chunk.len();
        let part = Tensor::new(cs, z.data()[lo..hi].to_vec())?;
        let mut g = Graph::new();
        let zi = g.leaf(part);
        let dec = ae.decode_on(&mut g, zi)?;
        let logits = host.forward_tail_on(&mut g, ae.spec.level, dec)?;
        let lv = g.value(logits);
        let probs = match host.spec.head {
            Head::Softmax => softmax_rows(lv)?,
            Head::Sigmoid => {
                let d = lv.data().iter().map(|&v| stable_sigmoid(v)).collect();
                Tensor::new(lv.shape().to_vec(), d)?
            }
        };
        if shape.is_empty() {
            shape = probs.shape().to_vec();
        }
        data.extend_from_slice(probs.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Probabilities of the augmented network on raw inputs, no
/// intervention.
pub fn augmented_probabilities(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
) -> Result<Tensor> {
    let z = bottlenecks(host, ae, images)?;
    tail_probabilities(host, ae, &z)
}

/// Resolve the policy into one output class per sample, from clean
/// inputs.
pub fn policy_classes(
    host: &Network,
    ae: &ConceptAutoencoder,
    clean_images: &Tensor,
    policy: ClassPolicy,
) -> Result<Vec<usize>> {
    let n = clean_images.shape()[0];
    match policy {
        ClassPolicy::Fixed(c) => {
            let classes = host.spec.output_dim()?;
            if c >= classes {
                return Err(Error::range(format!(
                    "policy class {c} out of range for {classes} classes"
                )));
            }
            Ok(vec![c; n])
        }
        ClassPolicy::CleanPrediction => {
            let probs = augmented_probabilities(host, ae, clean_images)?;
            let k = probs.shape()[1];
            Ok((0..n)
                .map(|i| {
                    let row = &probs.data()[i * k..(i + 1) * k];
                    let mut arg = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[arg] {
                            arg = j;
                        }
                    }
                    arg
                })
                .collect())
        }
    }
}

fn mean_policy_prob(probs: &Tensor, classes: &[usize]) -> Result<f64> {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    if classes.len() != n {
        return Err(Error::contract(format!(
            "{n} probability rows but {} policy classes",
            classes.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::range(format!(
                "policy class {c} out of range for {k} classes"
            )));
        }
        sum += probs.data()[i * k + c];
    }
    Ok(sum / n as f64)
}

fn baseline_prob(
    host: &Network,
    ae: &ConceptAutoencoder,
    z: &Tensor,
    channel: usize,
    classes: &[usize],
    baseline: BaselineMode,
) -> Result<f64> {
    let zb = match baseline {
        BaselineMode::ZeroFill => {
            apply_intervention(z, channel, Intervention::Do { value: 0.0 })?
        }
        BaselineMode::Clean => apply_intervention(z, channel, Intervention::Idle)?,
    };
    mean_policy_prob(&tail_probabilities(host, ae, &zb)?, classes)
}

/// Effect of forcing one concept to one value on the evaluation
/// inputs: the mean policy-class probability under `Do(do_value)` minus
/// the baseline term.
pub fn causal_effect(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    channel: usize,
    do_value: f64,
    classes: &[usize],
    baseline: BaselineMode,
) -> Result<f64> {
    if images.shape()[0] == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    let z = bottlenecks(host, ae, images)?;
    let zd = apply_intervention(&z, channel, Intervention::Do { value: do_value })?;
    let p_do = mean_policy_prob(&tail_probabilities(host, ae, &zd)?, classes)?;
    let p_base = baseline_prob(host, ae, &z, channel, classes, baseline)?;
    Ok(p_do - p_base)
}

/// One expected-effect estimate with everything needed to audit it.
#[derive(Debug, Clone)]
pub struct CeEstimate {
    pub expected_ce: f64,
    pub n: usize,
    /// Bins of the observed summary distribution.
    pub discretization: Discretization,
    /// Weight each bin received; the observed frequencies themselves
    /// unless an evidence condition reweighted them.
    pub weights: Vec<f64>,
    /// Per-bin effect against the shared baseline term.
    pub bin_effects: Vec<f64>,
    pub baseline_prob: f64,
}

/// Condition-independent half of an expected effect: the observed bins
/// and what replaying each bin's representative does.
struct TargetBins {
    disc: Discretization,
    bin_effects: Vec<f64>,
    baseline_prob: f64,
}

/// Bins from the cached bottlenecks plus one do-pass per bin. The
/// encoder never reruns here; every pass reuses `z`.
fn target_bins(
    host: &Network,
    ae: &ConceptAutoencoder,
    z: &Tensor,
    channel: usize,
    classes: &[usize],
    bins: usize,
    baseline: BaselineMode,
) -> Result<TargetBins> {
    let summaries = concept_summaries(z, channel)?;
    let disc = discretize_concept(&summaries, bins)?;
    let p_base = baseline_prob(host, ae, z, channel, classes, baseline)?;
    let mut bin_effects = Vec::with_capacity(disc.representatives.len());
    for &rep in &disc.representatives {
        let zd = apply_intervention(z, channel, Intervention::Do { value: rep })?;
        let p_do = mean_policy_prob(&tail_probabilities(host, ae, &zd)?, classes)?;
        bin_effects.push(p_do - p_base);
    }
    Ok(TargetBins {
        disc,
        bin_effects,
        baseline_prob: p_base,
    })
}

impl TargetBins {
    /// Weighted average in bin order, so reruns sum identically.
    fn expected(&self, weights: &[f64]) -> f64 {
        weights
            .iter()
            .zip(&self.bin_effects)
            .map(|(w, e)| w * e)
            .sum()
    }

    fn estimate(self, weights: Vec<f64>, n: usize) -> CeEstimate {
        CeEstimate {
            expected_ce: self.expected(&weights),
            n,
            discretization: self.disc,
            weights,
            bin_effects: self.bin_effects,
            baseline_prob: self.baseline_prob,
        }
    }
}

/// Expected effect of a concept over its observed value distribution:
/// summaries of the evaluation inputs are discretized, each bin's
/// representative is replayed as a do-intervention on those same
/// inputs, and the per-bin effects are averaged under the observed bin
/// frequencies.
pub fn expected_causal_effect(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    channel: usize,
    classes: &[usize],
    bins: usize,
    baseline: BaselineMode,
) -> Result<CeEstimate> {
    if images.shape()[0] == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    let z = bottlenecks(host, ae, images)?;
    let t = target_bins(host, ae, &z, channel, classes, bins, baseline)?;
    let weights = t.disc.probs.clone();
    Ok(t.estimate(weights, images.shape()[0]))
}

/// Expected effect under an evidence condition. Bins, do-values and
/// the baseline still come from the observed inputs; the condition
/// enters only through the weighting distribution, the frequencies of
/// the conditioned summaries over those fixed bins. Evidence that
/// suppresses a concept therefore concentrates weight in the low bins,
/// whose do-values sit closest to the baseline, and the expected
/// effect collapses toward zero.
pub fn expected_causal_effect_under(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    conditioned: &Tensor,
    channel: usize,
    classes: &[usize],
    bins: usize,
    baseline: BaselineMode,
) -> Result<CeEstimate> {
    if images.shape()[0] == 0 || conditioned.shape()[0] == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    let z = bottlenecks(host, ae, images)?;
    let t = target_bins(host, ae, &z, channel, classes, bins, baseline)?;
    let zc = bottlenecks(host, ae, conditioned)?;
    let weights = condition_weights(&t.disc, &concept_summaries(&zc, channel)?)?;
    Ok(t.estimate(weights, images.shape()[0]))
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct CeRow {
    pub level: usize,
    pub node: usize,
    pub condition: String,
    pub expected_ce: f64,
    pub n: usize,
    pub policy: String,
    pub degenerate: bool,
}

/// Report: rows plus ordered metadata echoed into the table preamble.
#[derive(Debug, Clone, PartialEq)]
pub struct CeReport {
    pub rows: Vec<CeRow>,
    pub metadata: Vec<(String, String)>,
}

/// Knobs of a report run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    pub bins: usize,
    pub baseline: BaselineMode,
    pub policy: ClassPolicy,
    /// Loss weights of the autoencoder being probed; echoed into
    /// metadata only.
    pub lambda: LossWeights,
}

impl Default for CeConfig {
    fn default() -> Self {
        CeConfig {
            bins: 8,
            baseline: BaselineMode::default(),
            policy: ClassPolicy::default(),
            lambda: LossWeights::default(),
        }
    }
}

fn base_metadata(
    host: &Network,
    ae: &ConceptAutoencoder,
    cfg: &CeConfig,
    n: usize,
) -> Vec<(String, String)> {
    vec![
        (
            "level_convention".to_string(),
            "1-based index over post-activation layers".to_string(),
        ),
        ("level".to_string(), ae.spec.level.to_string()),
        (
            "discretization".to_string(),
            format!("equal_frequency bins={}", cfg.bins),
        ),
        ("baseline".to_string(), cfg.baseline.name().to_string()),
        ("policy".to_string(), cfg.policy.label()),
        (
            "lambda".to_string(),
            format!(
                "{},{},{}",
                cfg.lambda.shallow, cfg.lambda.deep, cfg.lambda.interp
            ),
        ),
        ("host_init_seed".to_string(), host.init_seed.to_string()),
        ("ae_init_seed".to_string(), ae.init_seed.to_string()),
        ("n_samples".to_string(), n.to_string()),
    ]
}

/// Expected effects for every target concept under every condition.
/// Policy classes, bins, do-effects and baselines all come from the
/// clean inputs once; each condition only redistributes bin weight. A
/// row therefore measures how much support the concept's evidence still
/// lends to the decisions the model made before that evidence was
/// disturbed.
pub fn ce_report(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    labels: &Labels,
    targets: &[usize],
    conditions: &[Condition],
    cfg: &CeConfig,
) -> Result<CeReport> {
    let classes = policy_classes(host, ae, images, cfg.policy)?;
    let mut metadata = base_metadata(host, ae, cfg, images.shape()[0]);
    for cond in conditions {
        metadata.push((format!("condition {}", cond.label()), cond.describe()));
    }
    let z = bottlenecks(host, ae, images)?;
    let mut per_target = Vec::with_capacity(targets.len());
    for &node in targets {
        per_target.push(target_bins(host, ae, &z, node, &classes, cfg.bins, cfg.baseline)?);
    }
    let n = images.shape()[0];
    let mut rows = Vec::new();
    for cond in conditions {
        let zc = match cond {
            Condition::Z0 => None,
            _ => {
                let conditioned = apply_condition(host, images, labels, cond)?;
                Some(bottlenecks(host, ae, &conditioned)?)
            }
        };
        for (&node, t) in targets.iter().zip(&per_target) {
            let expected = match &zc {
                None => t.expected(&t.disc.probs),
                Some(zc) => {
                    t.expected(&condition_weights(&t.disc, &concept_summaries(zc, node)?)?)
                }
            };
            if !expected.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite expected effect at node {node} under {}",
                    cond.label()
                )));
            }
            rows.push(CeRow {
                level: ae.spec.level,
                node,
                condition: cond.label(),
                expected_ce: expected,
                n,
                policy: cfg.policy.label(),
                degenerate: t.disc.degenerate,
            });
        }
    }
    rows.sort_by(|a, b| (a.node, &a.condition).cmp(&(b.node, &b.condition)));
    Ok(CeReport { rows, metadata })
}

/// Expected effects at one concept across attack regimes, with the
/// most harmful attack named in the metadata.
pub fn attack_ce_sweep(
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    labels: &Labels,
    node: usize,
    attacks: &[(AttackMethod, AttackConfig)],
    cfg: &CeConfig,
) -> Result<CeReport> {
    let conditions: Vec<Condition> = attacks
        .iter()
        .map(|(m, c)| Condition::Attack {
            method: *m,
            config: c.clone(),
        })
        .collect();
    let mut report = ce_report(host, ae, images, labels, &[node], &conditions, cfg)?;
    if let Some(worst) = report
        .rows
        .iter()
        .min_by(|a, b| a.expected_ce.total_cmp(&b.expected_ce))
    {
        report.metadata.push((
            "most_negative_attack".to_string(),
            format!("{} ({:.5e})", worst.condition, worst.expected_ce),
        ));
    }
    Ok(report)
}

/// Serialize a report as the tab-separated table format: `#` metadata
/// preamble, a header row, then one row per estimate with the effect in
/// scientific notation at six significant digits.
pub fn format_ce_table(report: &CeReport) -> String {
    let mut out = String::new();
    for (k, v) in &report.metadata {
        let _ = writeln!(out, "# {k}: {v}");
    }
    let mut flagged: Vec<(usize, usize)> = Vec::new();
    for row in &report.rows {
        if row.degenerate && !flagged.contains(&(row.level, row.node)) {
            flagged.push((row.level, row.node));
            let _ = writeln!(
                out,
                "# degenerate: node {} summaries collapsed to one bin",
                row.node
            );
        }
    }
    out.push_str("level\tnode\tcondition\texpected_ce\tn\tpolicy\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.5e}\t{}\t{}",
            row.level, row.node, row.condition, row.expected_ce, row.n, row.policy
        );
    }
    out
}

/// Write a report to disk; the byte stream is a pure function of the
/// report.
pub fn write_ce_table(path: &Path, report: &CeReport) -> Result<()> {
    std::fs::write(path, format_ce_table(report)).map_err(|e| Error::io(path, e))
}

//! Adversarial example generation against a trained classifier.
//!
//! All pixel-space methods keep two contracts: outputs stay in `[0, 1]`,
//! and the max-norm distance to the original never exceeds epsilon.
//! Gradient steps use `sign0` (zero maps to zero), and the single-step
//! method is literally the iterated method run for one full-size step,
//! so the two agree bitwise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::graph::{sign0, Graph};
use crate::net::Network;
use crate::tensor::Tensor;

/// Shared knobs; every method reads the subset it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Max-norm perturbation budget.
    pub epsilon: f64,
    /// Iteration count of the iterated methods.
    pub steps: usize,
    /// Per-iteration step size; `None` means `min(epsilon, 2.5 * epsilon / steps)`.
    pub step_size: Option<f64>,
    /// Saturating increment of the saliency method.
    pub theta: f64,
    /// Fraction of pixels the saliency method may touch.
    pub gamma: f64,
    /// Base seed of the random-start method; sample `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            steps: 10,
            step_size: None,
            theta: 1.0,
            gamma: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn resolved_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or_else(|| self.epsilon.min(2.5 * self.epsilon / self.steps as f64))
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::range(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::range("steps must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::range(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.theta <= 0.0 {
            return Err(Error::range(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s <= self.epsilon) {
                return Err(Error::range(format!(
                    "step_size must lie in (0, epsilon], got {s} with epsilon {}",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// A crafted batch with everything needed to rerun or audit it.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub method: String,
    pub originals: Tensor,
    pub adversarials: Tensor,
    pub labels: Labels,
    pub config: AttackConfig,
    /// Per-sample: does the network now predict something other than the
    /// label (untargeted) or exactly the target (targeted)?
    pub success: Vec<bool>,
}

impl AdversarialBatch {
    /// Fraction of samples whose prediction was flipped.
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::range(format!(
            "epsilon must lie in [0, 1], got {eps}"
        )));
    }
    Ok(())
}

fn check_inputs(net: &Network, images: &Tensor, labels: &Labels) -> Result<()> {
    if images.rank() != 4 {
        return Err(Error::contract(format!(
            "attack input must be [N,C,H,W], got {:?}",
            images.shape()
        )));
    }
    if images.shape()[0] != labels.len() {
        return Err(Error::contract(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::range(
            "attack input pixels must lie in [0, 1]".to_string(),
        ));
    }
    let _ = net;
    Ok(())
}

/// Gradient of the training loss with respect to the input pixels.
fn input_gradient(net: &Network, images: &Tensor, labels: &Labels) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone().with_requires_grad(true));
    let fp = net.forward_on(&mut g, x, false)?;
    let loss = net.loss_on(&mut g, fp.logits, labels)?;
    let grads = g.backward(loss)?;
    Ok(grads.wrt(x)?.to_vec())
}

/// One clamped ascent iteration on every pixel:
/// `clamp(x + alpha * sign0(g), max(0, x0 - eps), min(1, x0 + eps))`.
fn ascent_step(x: &mut [f64], x0: &[f64], grad: &[f64], alpha: f64, eps: f64) {
    for i in 0..x.len() {
        let lo = (x0[i] - eps).max(0.0);
        let hi = (x0[i] + eps).min(1.0);
        x[i] = (x[i] + alpha * sign0(grad[i])).clamp(lo, hi);
    }
}

fn predictions(net: &Network, images: &Tensor) -> Result<Vec<usize>> {
    let logits = net.logits(images)?;
    let c = logits.shape()[1];
    Ok((0..logits.shape()[0])
        .map(|b| {
            let row = &logits.data()[b * c..(b + 1) * c];
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

fn untargeted_success(net: &Network, adv: &Tensor, labels: &Labels) -> Result<Vec<bool>> {
    match labels {
        Labels::Classes(ts) => {
            let preds = predictions(net, adv)?;
            Ok(preds.iter().zip(ts).map(|(&p, &t)| p != t).collect())
        }
        Labels::MultiHot(t) => {
            let logits = net.logits(adv)?;
            let k = logits.shape()[1];
            Ok((0..logits.shape()[0])
                .map(|b| {
                    (0..k).any(|j| {
                        let hit = (logits.data()[b * k + j] >= 0.0)
                            == (t.data()[b * k + j] >= 0.5);
                        !hit
                    })
                })
                .collect())
        }
    }
}

/// Iterated loss-ascent core. `start` may differ from the clean images
/// (random-start method); the epsilon ball always centers on the clean
/// images.
fn iterated_ascent(
    net: &Network,
    originals: &Tensor,
    start: Tensor,
    labels: &Labels,
    eps: f64,
    steps: usize,
    alpha: f64,
) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let n = originals.shape()[0];
    let sample = originals.numel() / n;
    let mut out = vec![0.0; originals.numel()];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let lo = chunk[0] * sample;
        let hi = (chunk[chunk.len() - 1] + 1) * sample;
        let mut shape = originals.shape().to_vec();
        shape[0] = chunk.len();
        let x0 = &originals.data()[lo..hi];
        let mut x = start.data()[lo..hi].to_vec();
        let blabels = labels.gather(chunk);
        for _ in 0..steps {
            let xt = Tensor::new(shape.clone(), x.clone())?;
            let grad = input_gradient(net, &xt, &blabels)?;
            ascent_step(&mut x, x0, &grad, alpha, eps);
        }
        out[lo..hi].copy_from_slice(&x);
    }
    Tensor::new(originals.shape().to_vec(), out)
}

/// Single full-budget loss-ascent step.
pub fn fgsm(net: &Network, images: &Tensor, labels: &Labels, epsilon: f64) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    check_inputs(net, images, labels)?;
    iterated_ascent(net, images, images.clone(), labels, epsilon, 1, epsilon)
}

/// Iterated small steps inside the epsilon ball. With `steps = 1` and
/// `step_size = epsilon` this is bitwise identical to [`fgsm`].
pub fn bim(
    net: &Network,
    images: &Tensor,
    labels: &Labels,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    check_inputs(net, images, labels)?;
    if steps == 0 {
        return Err(Error::range("steps must be positive".to_string()));
    }
    iterated_ascent(net, images, images.clone(), labels, epsilon, steps, step_size)
}

/// Iterated ascent from a random point of the ball. Sample `i` draws its
/// start from a stream seeded `seed + i`, so any subset of the batch
/// reproduces the same starts.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    net: &Network,
    images: &Tensor,
    labels: &Labels,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    check_inputs(net, images, labels)?;
    if steps == 0 {
        return Err(Error::range("steps must be positive".to_string()));
    }
    let n = images.shape()[0];
    let sample = images.numel() / n;
    let mut start = images.data().to_vec();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for v in &mut start[i * sample..(i + 1) * sample] {
            let u = rng.random_range(-epsilon..=epsilon);
            let lo = (*v - epsilon).max(0.0);
            let hi = (*v + epsilon).min(1.0);
            *v = (*v + u).clamp(lo, hi);
        }
    }
    let start = Tensor::new(images.shape().to_vec(), start)?;
    iterated_ascent(net, images, start, labels, epsilon, steps, step_size)
}

/// Target selection of the saliency method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsmaTarget {
    /// Per sample, the class the clean input rates least likely.
    LeastLikely,
    /// One class for the whole batch.
    Fixed(usize),
}

/// Result of the saliency-pair method.
#[derive(Debug, Clone)]
pub struct JsmaOutcome {
    pub adversarials: Tensor,
    /// Per-sample target class actually attacked.
    pub targets: Vec<usize>,
    /// Per-sample count of distinct modified pixels.
    pub changed_pixels: Vec<usize>,
    pub success: Vec<bool>,
}

/// Jacobian of the logits with respect to one sample's pixels:
/// `jac[c][p]` for class `c`, pixel `p`. One graph, one backward pass
/// per class.
fn logit_jacobian(net: &Network, image: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let x = g.leaf(image.clone().with_requires_grad(true));
    let fp = net.forward_on(&mut g, x, false)?;
    let classes = g.value(fp.logits).numel();
    let mut jac = Vec::with_capacity(classes);
    for c in 0..classes {
        let s = g.select(fp.logits, c)?;
        let grads = g.backward(s)?;
        jac.push(grads.wrt(x)?.to_vec());
    }
    Ok(jac)
}

/// Targeted saliency attack. Pixels move in saturating increments of
/// `theta` (clipped to 1), chosen in pairs maximizing the saliency
/// product, within a budget of `ceil(gamma * H * W)` distinct pixels per
/// sample.
pub fn jsma(
    net: &Network,
    images: &Tensor,
    target: JsmaTarget,
    theta: f64,
    gamma: f64,
) -> Result<JsmaOutcome> {
    if images.rank() != 4 {
        return Err(Error::contract(format!(
            "attack input must be [N,C,H,W], got {:?}",
            images.shape()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || theta <= 0.0 {
        return Err(Error::range(format!(
            "need gamma in [0, 1] and positive theta, got gamma={gamma} theta={theta}"
        )));
    }
    let n = images.shape()[0];
    let sample = images.numel() / n;
    let budget = (gamma * (images.shape()[2] * images.shape()[3]) as f64).ceil() as usize;
    let clean_probs = net.probabilities(images)?;
    let classes = clean_probs.shape()[1];

    let mut out = images.data().to_vec();
    let mut targets = Vec::with_capacity(n);
    let mut changed_counts = Vec::with_capacity(n);
    let mut success = Vec::with_capacity(n);
    for i in 0..n {
        let target = match target {
            JsmaTarget::LeastLikely => {
                let row = &clean_probs.data()[i * classes..(i + 1) * classes];
                let mut arg = 0usize;
                for (c, &p) in row.iter().enumerate() {
                    if p < row[arg] {
                        arg = c;
                    }
                }
                arg
            }
            JsmaTarget::Fixed(c) => {
                if c >= classes {
                    return Err(Error::range(format!(
                        "target class {c} out of range for {classes} classes"
                    )));
                }
                c
            }
        };
        targets.push(target);

        let mut shape = images.shape().to_vec();
        shape[0] = 1;
        let mut x = images.data()[i * sample..(i + 1) * sample].to_vec();
        let mut changed = std::collections::BTreeSet::new();
        let mut done = false;
        while !done {
            let xt = Tensor::new(shape.clone(), x.clone())?;
            let preds = predictions(net, &xt)?;
            if preds[0] == target {
                done = true;
                break;
            }
            if changed.len() >= budget {
                break;
            }
            let jac = logit_jacobian(net, &xt)?;
            // Saliency over unsaturated pixel pairs: increase the target
            // logit (alpha > 0) while decreasing the rest (beta < 0).
            let eligible: Vec<usize> = (0..sample).filter(|&p| x[p] < 1.0).collect();
            let mut best: Option<(usize, usize, f64)> = None;
            for (ai, &p) in eligible.iter().enumerate() {
                for &q in &eligible[ai + 1..] {
                    let alpha = jac[target][p] + jac[target][q];
                    if alpha <= 0.0 {
                        continue;
                    }
                    let mut beta = 0.0;
                    for (c, jrow) in jac.iter().enumerate() {
                        if c != target {
                            beta += jrow[p] + jrow[q];
                        }
                    }
                    if beta >= 0.0 {
                        continue;
                    }
                    let score = -alpha * beta;
                    if best.map_or(true, |(_, _, s)| score > s) {
                        best = Some((p, q, score));
                    }
                }
            }
            let Some((p, q, _)) = best else {
                break;
            };
            let mut next = changed.clone();
            next.insert(p);
            next.insert(q);
            if next.len() > budget {
                break;
            }
            changed = next;
            x[p] = (x[p] + theta).clamp(0.0, 1.0);
            x[q] = (x[q] + theta).clamp(0.0, 1.0);
        }
        changed_counts.push(changed.len());
        success.push(done);
        out[i * sample..(i + 1) * sample].copy_from_slice(&x);
    }
    Ok(JsmaOutcome {
        adversarials: Tensor::new(images.shape().to_vec(), out)?,
        targets,
        changed_pixels: changed_counts,
        success,
    })
}

/// Which method [`craft`] should run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Jsma,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Jsma => "jsma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            "jsma" => Ok(AttackMethod::Jsma),
            other => Err(Error::config(format!("unknown attack method '{other}'"))),
        }
    }
}

/// Run one configured attack over a batch and evaluate its success.
pub fn craft(
    net: &Network,
    images: &Tensor,
    labels: &Labels,
    method: AttackMethod,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let adversarials = match method {
        AttackMethod::Fgsm => fgsm(net, images, labels, cfg.epsilon)?,
        AttackMethod::Bim => bim(
            net,
            images,
            labels,
            cfg.epsilon,
            cfg.steps,
            cfg.resolved_step_size(),
        )?,
        AttackMethod::Pgd => pgd(
            net,
            images,
            labels,
            cfg.epsilon,
            cfg.steps,
            cfg.resolved_step_size(),
            cfg.seed,
        )?,
        AttackMethod::Jsma => {
            let out = jsma(net, images, JsmaTarget::LeastLikely, cfg.theta, cfg.gamma)?;
            return Ok(AdversarialBatch {
                method: method.name().to_string(),
                originals: images.clone(),
                adversarials: out.adversarials,
                labels: labels.clone(),
                config: cfg.clone(),
                success: out.success,
            });
        }
    };
    let success = untargeted_success(net, &adversarials, labels)?;
    Ok(AdversarialBatch {
        method: method.name().to_string(),
        originals: images.clone(),
        adversarials,
        labels: labels.clone(),
        config: cfg.clone(),
        success,
    })
}

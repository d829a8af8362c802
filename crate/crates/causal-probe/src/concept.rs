//! Concept autoencoders: five stride-1 3x3 convolutions with relu,
//! squeezed to a small bottleneck of concept channels, inserted at an
//! activation level of a trained host network.
//!
//! Channel schedule for host channels `C` and `K` concepts, with
//! `h = max(ceil(C/2), K)`:
//!
//! ```text
//! C -> h -> K    encoder (bottleneck after the third relu)
//! K -> h -> C    decoder
//! ```
//!
//! The middle `K -> K` convolution belongs to the encoder; its output is
//! the bottleneck read by all concept measurements.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::net::{EvalReport, Head, Network, Param};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    /// 1-based activation level of the host where the autoencoder sits.
    pub level: usize,
    /// Number of bottleneck concept channels.
    pub concepts: usize,
    /// Channel count of the host activation at that level.
    pub channels: usize,
}

impl ConceptSpec {
    pub fn hidden(&self) -> usize {
        (self.channels).div_ceil(2).max(self.concepts)
    }

    /// `(in, out)` channels of the five convolutions.
    pub fn channel_schedule(&self) -> [(usize, usize); 5] {
        let (c, h, k) = (self.channels, self.hidden(), self.concepts);
        [(c, h), (h, k), (k, k), (k, h), (h, c)]
    }
}

#[derive(Debug, Clone)]
pub struct ConceptAutoencoder {
    pub spec: ConceptSpec,
    /// Ten tensors: weight and bias for each of the five convolutions.
    pub params: Vec<Param>,
    pub init_seed: u64,
}

/// He-uniform weights (every convolution feeds a relu), zero biases, one
/// seeded stream in layer order.
pub fn build_autoencoder(spec: &ConceptSpec, seed: u64) -> Result<ConceptAutoencoder> {
    if spec.concepts == 0 || spec.channels == 0 {
        return Err(Error::contract(format!(
            "concept spec needs positive channel counts, got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(10);
    for (i, (cin, cout)) in spec.channel_schedule().into_iter().enumerate() {
        let fan_in = cin * 9;
        let limit = (6.0 / fan_in as f64).sqrt();
        let n = cout * cin * 9;
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        params.push(Param {
            name: format!("conv{i}.weight"),
            value: Tensor::new(vec![cout, cin, 3, 3], data).expect("valid shape"),
            init: "he_uniform",
        });
        params.push(Param {
            name: format!("conv{i}.bias"),
            value: Tensor::zeros(vec![cout]),
            init: "zeros",
        });
    }
    Ok(ConceptAutoencoder {
        spec: spec.clone(),
        params,
        init_seed: seed,
    })
}

/// Exact reconstruction for activations: each convolution routes channel
/// `i` to channel `i` through its kernel center, so any input whose
/// channels fit through the bottleneck passes unchanged (relu is the
/// identity on non-negative activations). Used to pin down loss
/// semantics in tests.
pub fn identity_autoencoder(spec: &ConceptSpec) -> Result<ConceptAutoencoder> {
    if spec.concepts < spec.channels {
        return Err(Error::contract(format!(
            "identity construction needs concepts >= channels, got {spec:?}"
        )));
    }
    let mut params = Vec::with_capacity(10);
    for (i, (cin, cout)) in spec.channel_schedule().into_iter().enumerate() {
        let mut w = Tensor::zeros(vec![cout, cin, 3, 3]);
        for c in 0..cin.min(cout) {
            let at = w.offset4(c, c, 1, 1);
            w.data_mut()[at] = 1.0;
        }
        params.push(Param {
            name: format!("conv{i}.weight"),
            value: w,
            init: "identity",
        });
        params.push(Param {
            name: format!("conv{i}.bias"),
            value: Tensor::zeros(vec![cout]),
            init: "zeros",
        });
    }
    Ok(ConceptAutoencoder {
        spec: spec.clone(),
        params,
        init_seed: 0,
    })
}

/// Node handles from one autoencoder construction on the tape.
pub struct AePass {
    /// Encoder output (pre-intervention), `[B, K, H, W]`.
    pub bottleneck: NodeId,
    /// What the decoder actually consumed; equals `bottleneck` unless an
    /// intervention rewrote it.
    pub decoded_from: NodeId,
    /// Reconstruction, same shape as the input.
    pub output: NodeId,
    /// Parameter leaves aligned with `ConceptAutoencoder::params`.
    pub params: Vec<NodeId>,
}

impl ConceptAutoencoder {
    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != self.spec.channels {
            return Err(Error::ShapeMismatch {
                op: "autoencoder input",
                lhs: s.to_vec(),
                rhs: vec![0, self.spec.channels, 0, 0],
            });
        }
        Ok(())
    }

    /// Encode and decode `x` on the tape, optionally rewriting the
    /// bottleneck through `intervene` before decoding.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        x: NodeId,
        trainable: bool,
        mut intervene: Option<&mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>>,
    ) -> Result<AePass> {
        self.check_input(g, x)?;
        let mut param_nodes = Vec::with_capacity(10);
        let mut cur = x;
        let mut bottleneck = None;
        let mut decoded_from = None;
        for conv in 0..5 {
            let w = g.leaf(
                self.params[2 * conv]
                    .value
                    .clone()
                    .with_requires_grad(trainable),
            );
            let b = g.leaf(
                self.params[2 * conv + 1]
                    .value
                    .clone()
                    .with_requires_grad(trainable),
            );
            param_nodes.push(w);
            param_nodes.push(b);
            let c = g.conv2d(cur, w, 1)?;
            let c = g.bias_channel(c, b)?;
            cur = g.relu(c)?;
            if conv == 2 {
                bottleneck = Some(cur);
                if let Some(f) = intervene.as_mut() {
                    let replaced = f(g, cur)?;
                    if g.value(replaced).shape() != g.value(cur).shape() {
                        return Err(Error::ShapeMismatch {
                            op: "bottleneck intervention",
                            lhs: g.value(cur).shape().to_vec(),
                            rhs: g.value(replaced).shape().to_vec(),
                        });
                    }
                    cur = replaced;
                }
                decoded_from = Some(cur);
            }
        }
        Ok(AePass {
            bottleneck: bottleneck.expect("five convolutions"),
            decoded_from: decoded_from.expect("five convolutions"),
            output: cur,
            params: param_nodes,
        })
    }

    /// Decoder alone: run the last two convolutions on a bottleneck
    /// tensor already on the tape. Parameters stay gradient-free.
    pub fn decode_on(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let s = g.value(z).shape();
        if s.len() != 4 || s[1] != self.spec.concepts {
            return Err(Error::ShapeMismatch {
                op: "decoder input",
                lhs: s.to_vec(),
                rhs: vec![0, self.spec.concepts, 0, 0],
            });
        }
        let mut cur = z;
        for conv in 3..5 {
            let w = g.leaf(self.params[2 * conv].value.clone());
            let b = g.leaf(self.params[2 * conv + 1].value.clone());
            let c = g.conv2d(cur, w, 1)?;
            let c = g.bias_channel(c, b)?;
            cur = g.relu(c)?;
        }
        Ok(cur)
    }

    /// Gradient-free bottleneck for a batch of level activations.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let pass = self.forward_on(&mut g, xi, false, None)?;
        Ok(g.value(pass.bottleneck).clone())
    }

    /// Gradient-free reconstruction for a batch of level activations.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let pass = self.forward_on(&mut g, xi, false, None)?;
        Ok(g.value(pass.output).clone())
    }
}

/// Weights of the three loss parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub shallow: f64,
    pub deep: f64,
    pub interp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            shallow: 1.0,
            deep: 1.0,
            interp: 0.1,
        }
    }
}

/// Reported values of one composite-loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompositeLossParts {
    /// Mean L1 between the host activation and its reconstruction.
    pub shallow: f64,
    /// KL divergence from the host's output distribution to the
    /// insertion-augmented one, batch mean (exact, entropy included).
    pub deep: f64,
    /// Mean absolute bottleneck activation.
    pub interp: f64,
    /// Weighted sum of the three parts above.
    pub total: f64,
}

/// Handles and values of one composite-loss construction.
pub struct CompositeLoss {
    /// Scalar node to differentiate. Its value is the weighted sum with
    /// cross-entropy in place of KL; both have the same gradient because
    /// the reference entropy is constant.
    pub loss: NodeId,
    pub ae_params: Vec<NodeId>,
    pub parts: CompositeLossParts,
}

/// Build the three-part autoencoder loss for one image batch. The host
/// stays frozen: its parameter leaves never request gradients here.
pub fn composite_loss_on(
    g: &mut Graph,
    host: &Network,
    ae: &ConceptAutoencoder,
    images: &Tensor,
    trainable_ae: bool,
    weights: &LossWeights,
) -> Result<CompositeLoss> {
    let level = ae.spec.level;
    // Reference distribution from the unmodified host, treated as a
    // constant.
    let p_ref = host.probabilities(images)?;

    let x = g.leaf(images.clone());
    let mut ae_in = None;
    let mut ae_pass: Option<AePass> = None;
    let inserted = host.forward_spliced(g, x, false, level, &mut |g, tap| {
        ae_in = Some(tap);
        let pass = ae.forward_on(g, tap, trainable_ae, None)?;
        let out = pass.output;
        ae_pass = Some(pass);
        Ok(out)
    })?;
    let ae_in = ae_in.expect("splice ran");
    let ae_pass = ae_pass.expect("splice ran");

    let diff = g.sub(ae_in, ae_pass.output)?;
    let l1 = g.abs(diff)?;
    let shallow = g.mean_all(l1)?;

    let deep_ce = match host.spec.head {
        Head::Softmax => {
            let logq = g.log_softmax(inserted.logits)?;
            g.cross_entropy_mean(logq, &p_ref)?
        }
        Head::Sigmoid => g.bce_with_logits_mean(inserted.logits, &p_ref)?,
    };

    let babs = g.abs(ae_pass.bottleneck)?;
    let interp = g.mean_all(babs)?;

    let s1 = g.scale(shallow, weights.shallow)?;
    let s2 = g.scale(deep_ce, weights.deep)?;
    let s3 = g.scale(interp, weights.interp)?;
    let partial = g.add(s1, s2)?;
    let loss = g.add(partial, s3)?;

    let deep = match host.spec.head {
        Head::Softmax => {
            let q = crate::graph::softmax_rows(g.value(inserted.logits))?;
            kl_rows_mean(&p_ref, &q)?
        }
        Head::Sigmoid => {
            let q_logits = g.value(inserted.logits);
            let q: Vec<f64> = q_logits
                .data()
                .iter()
                .map(|&z| crate::graph::stable_sigmoid(z))
                .collect();
            kl_bernoulli_mean(p_ref.data(), &q)
        }
    };

    let shallow_v = g.value(shallow).item();
    let interp_v = g.value(interp).item();
    let parts = CompositeLossParts {
        shallow: shallow_v,
        deep,
        interp: interp_v,
        total: weights.shallow * shallow_v + weights.deep * deep + weights.interp * interp_v,
    };
    Ok(CompositeLoss {
        loss,
        ae_params: ae_pass.params,
        parts,
    })
}

/// Batch-mean KL divergence between row distributions, `sum p ln(p/q)`.
/// Terms with `p = 0` contribute nothing.
pub fn kl_rows_mean(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_rows_mean",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let rows = p.shape()[0];
    let mut acc = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            acc += pv * (pv.ln() - qv.ln());
        }
    }
    Ok(acc / rows as f64)
}

/// Elementwise-mean Bernoulli KL for sigmoid heads.
fn kl_bernoulli_mean(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > 0.0 {
            acc += pv * (pv.ln() - qv.ln());
        }
        let (pc, qc) = (1.0 - pv, 1.0 - qv);
        if pc > 0.0 {
            acc += pc * (pc.ln() - qc.ln());
        }
    }
    acc / p.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub shuffle_seed: u64,
    pub weights: LossWeights,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 2,
            batch_size: 100,
            adam: AdamConfig::default(),
            shuffle_seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AeEpochReport {
    pub epoch: usize,
    pub mean: CompositeLossParts,
}

#[derive(Debug, Clone, Default)]
pub struct AeTrainReport {
    pub epochs: Vec<AeEpochReport>,
    pub steps: usize,
}

/// Train the autoencoder against a frozen host on the images of `data`.
pub fn train_autoencoder(
    host: &Network,
    ae: &mut ConceptAutoencoder,
    data: &Dataset,
    cfg: &AeTrainConfig,
) -> Result<AeTrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if data.is_empty() {
        return Err(Error::contract("empty autoencoder training set"));
    }
    let sizes: Vec<usize> = ae.params.iter().map(|p| p.value.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut report = AeTrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let mut sums = CompositeLossParts::default();
        let mut batches = 0usize;
        for (step, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let (bx, _) = data.batch(chunk);
            let mut g = Graph::new();
            let built = composite_loss_on(&mut g, host, ae, &bx, true, &cfg.weights)?;
            if !g.value(built.loss).item().is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            sums.shallow += built.parts.shallow;
            sums.deep += built.parts.deep;
            sums.interp += built.parts.interp;
            sums.total += built.parts.total;
            batches += 1;
            let grads = g.backward(built.loss)?;
            let gslices: Vec<&[f64]> = built
                .ae_params
                .iter()
                .map(|&n| grads.wrt(n))
                .collect::<Result<_>>()?;
            let mut pslices: Vec<&mut [f64]> = ae
                .params
                .iter_mut()
                .map(|p| p.value.data_mut())
                .collect();
            adam.step(&cfg.adam, &mut pslices, &gslices)?;
        }
        report.steps += batches;
        let n = batches as f64;
        report.epochs.push(AeEpochReport {
            epoch,
            mean: CompositeLossParts {
                shallow: sums.shallow / n,
                deep: sums.deep / n,
                interp: sums.interp / n,
                total: sums.total / n,
            },
        });
    }
    Ok(report)
}

/// Host activations at the autoencoder's level for a batch of images.
pub fn level_activations(host: &Network, level: usize, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone());
    let fp = host.forward_on(&mut g, x, false)?;
    let tap = *fp
        .taps
        .get(level - 1)
        .ok_or_else(|| Error::contract(format!("level {level} beyond network taps")))?;
    Ok(g.value(tap).clone())
}

/// Accuracy of the host with the autoencoder spliced in, dataset-chunked.
pub fn evaluate_augmented(
    host: &Network,
    ae: &ConceptAutoencoder,
    ds: &Dataset,
) -> Result<EvalReport> {
    // Reuse the plain evaluator by wrapping the forward pass: build a
    // stand-in network is not possible without new parameters, so walk
    // chunks directly.
    const CHUNK: usize = 256;
    if ds.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let out_dim = host.spec.output_dim()?;
    let mut per_class: Vec<crate::net::ClassStat> = (0..out_dim)
        .map(|c| crate::net::ClassStat {
            class: c,
            correct: 0,
            total: 0,
        })
        .collect();
    let (mut correct, mut total) = (0usize, 0usize);
    let mut loss_sum = 0.0;
    let mut loss_batches = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (bx, bl) = ds.batch(chunk);
        let mut g = Graph::new();
        let x = g.leaf(bx);
        let fp = host.forward_spliced(&mut g, x, false, ae.spec.level, &mut |g, tap| {
            Ok(ae.forward_on(g, tap, false, None)?.output)
        })?;
        let loss = host.loss_on(&mut g, fp.logits, &bl)?;
        loss_sum += g.value(loss).item();
        loss_batches += 1;
        let logits = g.value(fp.logits);
        if let crate::data::Labels::Classes(ts) = &bl {
            for (b, &t) in ts.iter().enumerate() {
                let row = &logits.data()[b * out_dim..(b + 1) * out_dim];
                let mut arg = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = c;
                    }
                }
                per_class[t].total += 1;
                total += 1;
                if arg == t {
                    per_class[t].correct += 1;
                    correct += 1;
                }
            }
        } else {
            return Err(Error::contract(
                "augmented evaluation supports class labels only",
            ));
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        mean_loss: loss_sum / loss_batches as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::net::{
        build_network, evaluate, train_classifier, LayerSpec, NetworkSpec, TrainConfig,
    };

    fn trained_host() -> (Network, Dataset) {
        let spec = NetworkSpec {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
            head: Head::Softmax,
        };
        let mut net = build_network(&spec, 7).unwrap();
        let train = synth_blobs(64, 1);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            shuffle_seed: 3,
        };
        train_classifier(&mut net, &train, None, &cfg).unwrap();
        (net, train)
    }

    #[test]
    fn channel_schedule_matches_the_halving_rule() {
        let spec = ConceptSpec {
            level: 2,
            concepts: 4,
            channels: 16,
        };
        assert_eq!(spec.hidden(), 8);
        assert_eq!(
            spec.channel_schedule(),
            [(16, 8), (8, 4), (4, 4), (4, 8), (8, 16)]
        );
        // Hidden width never shrinks below the bottleneck.
        let narrow = ConceptSpec {
            level: 1,
            concepts: 5,
            channels: 4,
        };
        assert_eq!(narrow.hidden(), 5);
    }

    #[test]
    fn bottleneck_has_concept_channels() {
        let spec = ConceptSpec {
            level: 1,
            concepts: 3,
            channels: 2,
        };
        let ae = build_autoencoder(&spec, 9).unwrap();
        let x = Tensor::ones(vec![2, 2, 4, 4]);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 3, 4, 4]);
        let y = ae.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Relu outputs everywhere.
        assert!(z.data().iter().all(|&v| v >= 0.0));
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_autoencoder_reconstructs_exactly() {
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels: 2,
        };
        let ae = identity_autoencoder(&spec).unwrap();
        let x = Tensor::new(
            vec![1, 2, 2, 2],
            vec![0.5, 1.25, 0.0, 2.0, 0.75, 0.25, 3.0, 0.125],
        )
        .unwrap();
        let y = ae.reconstruct(&x).unwrap();
        assert_eq!(y.data(), x.data());
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn decoder_alone_matches_the_full_pass() {
        let spec = ConceptSpec {
            level: 1,
            concepts: 3,
            channels: 2,
        };
        let ae = build_autoencoder(&spec, 21).unwrap();
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let z = ae.encode(&x).unwrap();
        let full = ae.reconstruct(&x).unwrap();
        let mut g = Graph::new();
        let zi = g.leaf(z);
        let out = ae.decode_on(&mut g, zi).unwrap();
        assert_eq!(g.value(out).data(), full.data());
    }

    #[test]
    fn composite_loss_zeroes_out_for_identity() {
        let (host, data) = trained_host();
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels: 2,
        };
        let ae = identity_autoencoder(&spec).unwrap();
        let weights = LossWeights::default();
        let mut g = Graph::new();
        let batch = data.batch(&[0, 1, 2, 3]).0;
        let built = composite_loss_on(&mut g, &host, &ae, &batch, false, &weights).unwrap();
        assert_eq!(built.parts.shallow, 0.0);
        assert!(built.parts.deep.abs() < 1e-12, "kl {}", built.parts.deep);
        assert!(built.parts.deep >= 0.0);
        assert!(built.parts.interp > 0.0);
        let lam_sum = weights.shallow * built.parts.shallow
            + weights.deep * built.parts.deep
            + weights.interp * built.parts.interp;
        assert!((built.parts.total - lam_sum).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let (host, data) = trained_host();
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels: 2,
        };
        let mut ae = build_autoencoder(&spec, 11).unwrap();
        let cfg = AeTrainConfig {
            epochs: 12,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            shuffle_seed: 5,
            weights: LossWeights::default(),
        };
        let report = train_autoencoder(&host, &mut ae, &data, &cfg).unwrap();
        let first = report.epochs.first().unwrap().mean;
        let last = report.epochs.last().unwrap().mean;
        assert!(
            last.shallow < first.shallow,
            "shallow {} -> {}",
            first.shallow,
            last.shallow
        );
        assert!(last.total < first.total);
        // The augmented model should stay close to the host on accuracy.
        let host_acc = evaluate(&host, &data).unwrap().accuracy;
        let aug_acc = evaluate_augmented(&host, &ae, &data).unwrap().accuracy;
        assert!(
            aug_acc >= host_acc - 0.15,
            "host {host_acc} augmented {aug_acc}"
        );
    }

    #[test]
    fn host_stays_frozen_during_ae_training() {
        let (host, data) = trained_host();
        let before: Vec<Tensor> = host.params.iter().map(|p| p.value.clone()).collect();
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels: 2,
        };
        let mut ae = build_autoencoder(&spec, 11).unwrap();
        let cfg = AeTrainConfig {
            epochs: 2,
            batch_size: 16,
            ..AeTrainConfig::default()
        };
        train_autoencoder(&host, &mut ae, &data, &cfg).unwrap();
        for (p, b) in host.params.iter().zip(&before) {
            assert_eq!(&p.value, b, "{} moved", p.name);
        }
    }

    #[test]
    fn intervention_hook_rewrites_the_decode_path_only() {
        let spec = ConceptSpec {
            level: 1,
            concepts: 2,
            channels: 2,
        };
        let ae = identity_autoencoder(&spec).unwrap();
        let x = Tensor::full(vec![1, 2, 2, 2], 0.5);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let mut hook: Box<dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>> =
            Box::new(|g: &mut Graph, z: NodeId| g.scale(z, 0.0));
        let pass = ae.forward_on(&mut g, xi, false, Some(hook.as_mut())).unwrap();
        // Pre-intervention bottleneck unchanged, decode sees zeros.
        assert_eq!(g.value(pass.bottleneck).data(), x.data());
        assert!(g.value(pass.decoded_from).data().iter().all(|&v| v == 0.0));
        assert!(g.value(pass.output).data().iter().all(|&v| v == 0.0));
    }
}

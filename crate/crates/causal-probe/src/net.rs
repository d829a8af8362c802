//! Layered convolutional classifiers: specification, initialization,
//! forward construction on the tape, training, and evaluation.
//!
//! "Level L" always means the output of the L-th activation layer,
//! counting from 1 in network order. Taps and insertion points are
//! addressed by level, never by raw layer index.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, stable_sigmoid, Graph, NodeId};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// 3x3-style convolution, stride 1, explicit zero padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    /// 2x2 max pool, stride 2.
    MaxPool,
    Flatten,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::MaxPool => "max_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Sigmoid)
    }
}

/// Output interpretation of the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Mutually exclusive classes; probabilities via softmax, trained with
    /// mean negative log-likelihood.
    #[default]
    Softmax,
    /// Independent binary outputs; probabilities via sigmoid, trained with
    /// mean binary cross-entropy on logits.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Input image shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub head: Head,
}

/// Shape flowing between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn describe(&self) -> String {
        match self {
            Shape::Spatial { c, h, w } => format!("[{c}, {h}, {w}]"),
            Shape::Flat(n) => format!("[{n}]"),
        }
    }
}

impl NetworkSpec {
    /// Shape after each layer; errors name the offending layer.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut cur = Shape::Spatial {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        };
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "input shape {:?} has a zero extent",
                self.input
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |need: &str| {
                Error::contract(format!(
                    "layer {i} ({}) requires {need}, got {}",
                    layer.kind_name(),
                    cur.describe()
                ))
            };
            cur = match (layer, &cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        pad,
                    },
                    Shape::Spatial { h, w, .. },
                ) => {
                    if *out_channels == 0 || *kernel == 0 {
                        return Err(bad("positive out_channels and kernel"));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad("a padded extent at least the kernel size"));
                    }
                    Shape::Spatial {
                        c: *out_channels,
                        h: h + 2 * pad - kernel + 1,
                        w: w + 2 * pad - kernel + 1,
                    }
                }
                (LayerSpec::Conv { .. }, Shape::Flat(_)) => return Err(bad("a spatial input")),
                (LayerSpec::Relu | LayerSpec::Sigmoid, s) => s.clone(),
                (LayerSpec::MaxPool, Shape::Spatial { c, h, w }) => {
                    if *h < 2 || *w < 2 {
                        return Err(bad("spatial extents of at least 2"));
                    }
                    Shape::Spatial {
                        c: *c,
                        h: h / 2,
                        w: w / 2,
                    }
                }
                (LayerSpec::MaxPool, Shape::Flat(_)) => return Err(bad("a spatial input")),
                (LayerSpec::Flatten, Shape::Spatial { c, h, w }) => Shape::Flat(c * h * w),
                (LayerSpec::Flatten, Shape::Flat(_)) => return Err(bad("a spatial input")),
                (LayerSpec::Dense { units }, Shape::Flat(_)) => {
                    if *units == 0 {
                        return Err(bad("positive units"));
                    }
                    Shape::Flat(*units)
                }
                (LayerSpec::Dense { .. }, Shape::Spatial { .. }) => {
                    return Err(bad("a flattened input"))
                }
            };
            out.push(cur.clone());
        }
        match out.last() {
            Some(Shape::Flat(_)) => Ok(out),
            _ => Err(Error::contract(
                "network must end in a flat logit layer".to_string(),
            )),
        }
    }

    /// Number of activation layers, i.e. addressable levels.
    pub fn level_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_activation()).count()
    }

    /// Layer index of 1-based activation level `level`.
    pub fn level_to_layer(&self, level: usize) -> Result<usize> {
        if level == 0 {
            return Err(Error::contract("levels are numbered from 1".to_string()));
        }
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_activation())
            .nth(level - 1)
            .map(|(i, _)| i)
            .ok_or_else(|| {
                Error::contract(format!(
                    "level {level} out of range, network has {} levels",
                    self.level_count()
                ))
            })
    }

    /// Shape of the activation at 1-based `level`.
    pub fn level_shape(&self, level: usize) -> Result<Shape> {
        let layer = self.level_to_layer(level)?;
        Ok(self.layer_shapes()?[layer].clone())
    }

    pub fn output_dim(&self) -> Result<usize> {
        match self.layer_shapes()?.last() {
            Some(Shape::Flat(n)) => Ok(*n),
            _ => unreachable!("layer_shapes enforces a flat tail"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Initialization scheme recorded for checkpoints.
    pub init: &'static str,
}

/// A specification bound to concrete parameter tensors.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Param>,
    pub init_seed: u64,
}

/// Uniform draw with the He limit `sqrt(6 / fan_in)`; used ahead of relu.
fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Uniform draw with the Glorot limit `sqrt(6 / (fan_in + fan_out))`.
fn xavier_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Does a relu follow layer `i` before the next parametric layer?
fn feeds_relu(layers: &[LayerSpec], i: usize) -> bool {
    for layer in &layers[i + 1..] {
        match layer {
            LayerSpec::Relu => return true,
            LayerSpec::Sigmoid => return false,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => return false,
            _ => {}
        }
    }
    false
}

/// Validate a spec and draw its parameters. Weights use He-uniform where
/// the layer feeds a relu and Glorot-uniform otherwise; biases start at
/// zero. Draws come from one seeded stream in layer order, so the full
/// parameter set is a function of `(spec, seed)`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let shapes = spec.layer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut cur_c = spec.input[0];
    let mut cur_flat = 0usize;
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = cur_c * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                let shape = vec![*out_channels, cur_c, *kernel, *kernel];
                let (w, scheme) = if feeds_relu(&spec.layers, i) {
                    (he_uniform(&mut rng, shape, fan_in), "he_uniform")
                } else {
                    (xavier_uniform(&mut rng, shape, fan_in, fan_out), "xavier_uniform")
                };
                params.push(Param {
                    name: format!("layer{i}.conv.weight"),
                    value: w,
                    init: scheme,
                });
                params.push(Param {
                    name: format!("layer{i}.conv.bias"),
                    value: Tensor::zeros(vec![*out_channels]),
                    init: "zeros",
                });
            }
            LayerSpec::Dense { units } => {
                let fan_in = cur_flat;
                let shape = vec![fan_in, *units];
                let (w, scheme) = if feeds_relu(&spec.layers, i) {
                    (he_uniform(&mut rng, shape, fan_in), "he_uniform")
                } else {
                    (xavier_uniform(&mut rng, shape, fan_in, *units), "xavier_uniform")
                };
                params.push(Param {
                    name: format!("layer{i}.dense.weight"),
                    value: w,
                    init: scheme,
                });
                params.push(Param {
                    name: format!("layer{i}.dense.bias"),
                    value: Tensor::zeros(vec![*units]),
                    init: "zeros",
                });
            }
            _ => {}
        }
        match &shapes[i] {
            Shape::Spatial { c, .. } => cur_c = *c,
            Shape::Flat(n) => cur_flat = *n,
        }
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        init_seed: seed,
    })
}

/// Node handles from one forward construction.
pub struct ForwardPass {
    pub input: NodeId,
    pub logits: NodeId,
    /// Parameter leaf nodes, aligned with `Network::params`.
    pub params: Vec<NodeId>,
    /// Post-activation nodes; `taps[level - 1]` is what flows downstream
    /// of that level (after any splice).
    pub taps: Vec<NodeId>,
}

impl Network {
    /// Build the forward computation on `g` starting from node `x`.
    /// `trainable` controls whether parameter leaves request gradients.
    pub fn forward_on(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<ForwardPass> {
        self.forward_inner(g, x, trainable, None)
    }

    /// Same as [`Network::forward_on`], but after activation level
    /// `level` the tap is rewritten by `splice` (shape-preserving) before
    /// flowing on. This is how autoencoders and interventions enter the
    /// network.
    pub fn forward_spliced(
        &self,
        g: &mut Graph,
        x: NodeId,
        trainable: bool,
        level: usize,
        splice: &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<ForwardPass> {
        self.spec.level_to_layer(level)?;
        self.forward_inner(g, x, trainable, Some((level, splice)))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        x: NodeId,
        trainable: bool,
        mut splice: Option<(usize, &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>)>,
    ) -> Result<ForwardPass> {
        let in_shape = g.value(x).shape().to_vec();
        if in_shape.len() != 4 || in_shape[1..] != self.spec.input[..] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: in_shape,
                rhs: self.spec.input.to_vec(),
            });
        }
        self.spec.layer_shapes()?;
        let batch = g.value(x).shape()[0];
        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut next_param = 0usize;
        let mut take_param = |g: &mut Graph, nodes: &mut Vec<NodeId>| -> NodeId {
            let t = self.params[next_param]
                .value
                .clone()
                .with_requires_grad(trainable);
            next_param += 1;
            let id = g.leaf(t);
            nodes.push(id);
            id
        };
        let mut cur = x;
        let mut taps = Vec::new();
        let mut level = 0usize;
        for layer in &self.spec.layers {
            cur = match layer {
                LayerSpec::Conv { pad, .. } => {
                    let w = take_param(g, &mut param_nodes);
                    let b = take_param(g, &mut param_nodes);
                    let c = g.conv2d(cur, w, *pad)?;
                    g.bias_channel(c, b)?
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => {
                    let mut act = if matches!(layer, LayerSpec::Relu) {
                        g.relu(cur)?
                    } else {
                        g.sigmoid(cur)?
                    };
                    level += 1;
                    if let Some((at, f)) = splice.as_mut() {
                        if *at == level {
                            let replaced = f(g, act)?;
                            if g.value(replaced).shape() != g.value(act).shape() {
                                return Err(Error::ShapeMismatch {
                                    op: "level splice",
                                    lhs: g.value(act).shape().to_vec(),
                                    rhs: g.value(replaced).shape().to_vec(),
                                });
                            }
                            act = replaced;
                        }
                    }
                    taps.push(act);
                    act
                }
                LayerSpec::MaxPool => g.max_pool2(cur)?,
                LayerSpec::Flatten => {
                    let n = g.value(cur).numel() / batch;
                    g.reshape(cur, vec![batch, n])?
                }
                LayerSpec::Dense { .. } => {
                    let w = take_param(g, &mut param_nodes);
                    let b = take_param(g, &mut param_nodes);
                    g.dense(cur, w, b)?
                }
            };
        }
        Ok(ForwardPass {
            input: x,
            logits: cur,
            params: param_nodes,
            taps,
        })
    }

    /// Resume the network after activation level `level`: run every layer
    /// past that activation starting from `start` (shaped like the level
    /// output) and return the logits node. Parameters stay gradient-free.
    ///
    /// Forward passes that only change data at a level (interventions on
    /// an inserted bottleneck) use this to avoid recomputing the trunk.
    pub fn forward_tail_on(&self, g: &mut Graph, level: usize, start: NodeId) -> Result<NodeId> {
        let from_layer = self.spec.level_to_layer(level)? + 1;
        let shapes = self.spec.layer_shapes()?;
        let want = &shapes[from_layer - 1];
        let got = g.value(start).shape().to_vec();
        let matches = match want {
            Shape::Spatial { c, h, w } => got.len() == 4 && got[1..] == [*c, *h, *w],
            Shape::Flat(n) => got.len() == 2 && got[1] == *n,
        };
        if !matches {
            return Err(Error::ShapeMismatch {
                op: "network tail input",
                lhs: got,
                rhs: match want {
                    Shape::Spatial { c, h, w } => vec![*c, *h, *w],
                    Shape::Flat(n) => vec![*n],
                },
            });
        }
        let batch = g.value(start).shape()[0];
        let mut pidx = 0usize;
        for layer in &self.spec.layers[..from_layer] {
            if matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }) {
                pidx += 2;
            }
        }
        let mut cur = start;
        for layer in &self.spec.layers[from_layer..] {
            cur = match layer {
                LayerSpec::Conv { pad, .. } => {
                    let w = g.leaf(self.params[pidx].value.clone());
                    let b = g.leaf(self.params[pidx + 1].value.clone());
                    pidx += 2;
                    let c = g.conv2d(cur, w, *pad)?;
                    g.bias_channel(c, b)?
                }
                LayerSpec::Relu => g.relu(cur)?,
                LayerSpec::Sigmoid => g.sigmoid(cur)?,
                LayerSpec::MaxPool => g.max_pool2(cur)?,
                LayerSpec::Flatten => {
                    let n = g.value(cur).numel() / batch;
                    g.reshape(cur, vec![batch, n])?
                }
                LayerSpec::Dense { .. } => {
                    let w = g.leaf(self.params[pidx].value.clone());
                    let b = g.leaf(self.params[pidx + 1].value.clone());
                    pidx += 2;
                    g.dense(cur, w, b)?
                }
            };
        }
        Ok(cur)
    }

    /// Training loss node for this network's head.
    pub fn loss_on(&self, g: &mut Graph, logits: NodeId, labels: &Labels) -> Result<NodeId> {
        match (self.spec.head, labels) {
            (Head::Softmax, Labels::Classes(ts)) => {
                let lp = g.log_softmax(logits)?;
                g.nll_mean(lp, ts)
            }
            (Head::Sigmoid, Labels::MultiHot(t)) => g.bce_with_logits_mean(logits, t),
            (head, _) => Err(Error::contract(format!(
                "label kind does not match {head:?} head"
            ))),
        }
    }

    /// Raw logits for a batch, gradient-free.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let fp = self.forward_on(&mut g, xi, false)?;
        Ok(g.value(fp.logits).clone())
    }

    /// Output probabilities for a batch: softmax rows or elementwise
    /// sigmoid depending on the head.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        match self.spec.head {
            Head::Softmax => softmax_rows(&logits),
            Head::Sigmoid => {
                let data = logits.data().iter().map(|&z| stable_sigmoid(z)).collect();
                Tensor::new(logits.shape().to_vec(), data)
            }
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the per-epoch shuffle stream.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 100,
            adam: AdamConfig::default(),
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub steps: usize,
}

/// Minibatch Adam training. Sample order reshuffles every epoch from one
/// seeded stream; a non-finite loss aborts with the failing epoch and
/// step. With a test set, accuracy is measured after every epoch.
pub fn train_classifier(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let sizes: Vec<usize> = net.params.iter().map(|p| p.value.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let (bx, bl) = train.batch(chunk);
            let mut g = Graph::new();
            let xi = g.leaf(bx);
            let fp = net.forward_on(&mut g, xi, true)?;
            let loss = net.loss_on(&mut g, fp.logits, &bl)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += lv;
            batches += 1;
            let grads = g.backward(loss)?;
            let gslices: Vec<&[f64]> = fp
                .params
                .iter()
                .map(|&n| grads.wrt(n))
                .collect::<Result<_>>()?;
            let mut pslices: Vec<&mut [f64]> = net
                .params
                .iter_mut()
                .map(|p| p.value.data_mut())
                .collect();
            adam.step(&cfg.adam, &mut pslices, &gslices)?;
        }
        report.steps += batches;
        let test_accuracy = match test {
            Some(t) => Some(evaluate(net, t)?.accuracy),
            None => None,
        };
        report.epochs.push(EpochReport {
            epoch,
            mean_loss: loss_sum / batches as f64,
            test_accuracy,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ClassStat {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<ClassStat>,
}

/// Chunked, gradient-free evaluation. Softmax heads score argmax
/// agreement (ties to the lowest class); sigmoid heads score elementwise
/// 0.5-thresholded agreement.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalReport> {
    const CHUNK: usize = 256;
    if ds.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let out_dim = net.spec.output_dim()?;
    let mut per_class: Vec<ClassStat> = (0..out_dim)
        .map(|c| ClassStat {
            class: c,
            correct: 0,
            total: 0,
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_batches = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (bx, bl) = ds.batch(chunk);
        let mut g = Graph::new();
        let xi = g.leaf(bx);
        let fp = net.forward_on(&mut g, xi, false)?;
        let loss = net.loss_on(&mut g, fp.logits, &bl)?;
        loss_sum += g.value(loss).item();
        loss_batches += 1;
        let logits = g.value(fp.logits);
        match &bl {
            Labels::Classes(ts) => {
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
            }
            Labels::MultiHot(t) => {
                for (i, (&z, &tv)) in logits.data().iter().zip(t.data()).enumerate() {
                    let c = i % out_dim;
                    let hit = (z >= 0.0) == (tv >= 0.5);
                    per_class[c].total += 1;
                    total += 1;
                    if hit {
                        per_class[c].correct += 1;
                        correct += 1;
                    }
                }
            }
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

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
            head: Head::Softmax,
        }
    }

    #[test]
    fn shape_walk_matches_by_hand() {
        let spec = tiny_spec();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], Shape::Spatial { c: 2, h: 4, w: 4 });
        assert_eq!(shapes[2], Shape::Spatial { c: 2, h: 2, w: 2 });
        assert_eq!(shapes[3], Shape::Flat(8));
        assert_eq!(shapes[4], Shape::Flat(2));
        assert_eq!(spec.level_count(), 1);
        assert_eq!(spec.level_to_layer(1).unwrap(), 1);
    }

    #[test]
    fn invalid_specs_name_the_layer() {
        let spec = NetworkSpec {
            input: [1, 4, 4],
            layers: vec![LayerSpec::Dense { units: 2 }],
            head: Head::Softmax,
        };
        let msg = format!("{}", spec.layer_shapes().unwrap_err());
        assert!(msg.contains("layer 0 (dense)"), "got: {msg}");
    }

    #[test]
    fn init_is_deterministic_and_schemed() {
        let spec = tiny_spec();
        let a = build_network(&spec, 42).unwrap();
        let b = build_network(&spec, 42).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value);
        }
        let c = build_network(&spec, 43).unwrap();
        assert_ne!(a.params[0].value, c.params[0].value);
        // Conv feeds a relu, dense is the head.
        assert_eq!(a.params[0].init, "he_uniform");
        assert_eq!(a.params[1].init, "zeros");
        assert_eq!(a.params[2].init, "xavier_uniform");
        // He limit for fan_in 9.
        let lim = (6.0f64 / 9.0).sqrt();
        assert!(a.params[0].value.data().iter().all(|v| v.abs() < lim));
    }

    #[test]
    fn zero_bias_at_init() {
        let net = build_network(&tiny_spec(), 1).unwrap();
        assert!(net.params[1].value.data().iter().all(|&v| v == 0.0));
        assert!(net.params[3].value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_produces_logits_and_taps() {
        let net = build_network(&tiny_spec(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(vec![3, 1, 4, 4]));
        let fp = net.forward_on(&mut g, x, false).unwrap();
        assert_eq!(g.value(fp.logits).shape(), &[3, 2]);
        assert_eq!(fp.taps.len(), 1);
        assert_eq!(g.value(fp.taps[0]).shape(), &[3, 2, 4, 4]);
    }

    #[test]
    fn tail_forward_matches_full_forward() {
        let net = build_network(&tiny_spec(), 3).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| i as f64 / 31.0).collect()).unwrap();

        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let fp = net.forward_on(&mut g, xi, false).unwrap();
        let full = g.value(fp.logits).clone();
        let tap = g.value(fp.taps[0]).clone();

        let mut g2 = Graph::new();
        let ti = g2.leaf(tap);
        let logits = net.forward_tail_on(&mut g2, 1, ti).unwrap();
        assert_eq!(g2.value(logits).data(), full.data());
    }

    #[test]
    fn splice_rewrites_the_level_output() {
        let net = build_network(&tiny_spec(), 0).unwrap();
        let x0 = Tensor::ones(vec![1, 1, 4, 4]);

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let plain = net.forward_on(&mut g, x, false).unwrap();

        // Zero out the level: logits must equal a forward pass over a
        // zeroed activation, and differ from the plain ones in general.
        let mut g2 = Graph::new();
        let x = g2.leaf(x0);
        let spliced = net
            .forward_spliced(&mut g2, x, false, 1, &mut |g, tap| g.scale(tap, 0.0))
            .unwrap();
        let a = g.value(plain.logits).data().to_vec();
        let b = g2.value(spliced.logits).data().to_vec();
        assert_ne!(a, b);
        // With the whole activation zeroed only biases reach the logits.
        let zero_in = g2.value(spliced.taps[0]).data();
        assert!(zero_in.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_separates_blobs() {
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
        let train = synth_blobs(80, 1);
        let test = synth_blobs(40, 2);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            shuffle_seed: 3,
        };
        let report = train_classifier(&mut net, &train, Some(&test), &cfg).unwrap();
        let final_acc = report.epochs.last().unwrap().test_accuracy.unwrap();
        assert!(final_acc >= 0.95, "accuracy {final_acc}");
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.mean_loss).collect();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec();
        let train = synth_blobs(32, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = build_network(&spec, 5).unwrap();
        train_classifier(&mut a, &train, None, &cfg).unwrap();
        let mut b = build_network(&spec, 5).unwrap();
        train_classifier(&mut b, &train, None, &cfg).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value, pb.value, "{} drifted", pa.name);
        }
    }

    #[test]
    fn sigmoid_head_trains_on_multihot() {
        let spec = NetworkSpec {
            input: [1, 4, 4],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1 }],
            head: Head::Sigmoid,
        };
        let blobs = synth_blobs(40, 4);
        let Labels::Classes(cs) = &blobs.labels else {
            unreachable!()
        };
        let hot: Vec<f64> = cs.iter().map(|&c| c as f64).collect();
        let train = Dataset::new(
            blobs.images.clone(),
            Labels::MultiHot(Tensor::new(vec![40, 1], hot).unwrap()),
        )
        .unwrap();
        let mut net = build_network(&spec, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 10,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            shuffle_seed: 0,
        };
        train_classifier(&mut net, &train, None, &cfg).unwrap();
        let eval = evaluate(&net, &train).unwrap();
        assert!(eval.accuracy >= 0.95, "accuracy {}", eval.accuracy);
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = tiny_spec();
        let text = toml::to_string(&spec).unwrap();
        let back: NetworkSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        // Unknown keys are rejected.
        let bad = text.replace("[[layers]]", "[[layers]]\nwhatever = 1");
        assert!(toml::from_str::<NetworkSpec>(&bad).is_err());
    }
}

//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] records every operation as a node in topological order.
//! [`Graph::backward`] walks the tape once in exact reverse order and
//! accumulates adjoints with a fixed summation order, so gradients are
//! bit-identical across runs and thread counts. The graph is immutable
//! after construction: `backward` takes `&self` and may be called any
//! number of times, with any scalar node as the loss.

use crate::error::{Error, Result};
use crate::parallel::par_for_chunks;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Sign function with `sign0(0) = 0`.
///
/// `f64::signum` maps `0.0` to `1.0`, which is the wrong subgradient for
/// `|x|` and the wrong step direction for sign-based perturbations.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `[rows, classes]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_rows(logits)?;
    let data = logp.data().iter().map(|&v| v.exp()).collect();
    Tensor::new(logp.shape().to_vec(), data)
}

/// Row-wise log-softmax of a `[rows, classes]` tensor, max-shifted for
/// stability.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "log_softmax",
            lhs: logits.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Abs,
    /// `x [B,I] @ w [I,O] + b [O]`.
    Dense,
    /// Stride-1 cross-correlation, zero padding `pad` on each side.
    Conv2d { pad: usize },
    /// Per-channel bias on `[B,C,H,W]`.
    BiasChannel,
    /// 2x2 max pool, stride 2; `argmax` caches the winning flat input
    /// offset per output element (first occurrence on ties).
    MaxPool2 { argmax: Vec<usize> },
    Reshape,
    LogSoftmax,
    /// Mean negative log-likelihood of integer targets over `[B,C]`
    /// log-probabilities.
    NllMean { targets: Vec<usize> },
    /// Mean cross-entropy `-1/B * sum p*log q` against a fixed reference
    /// distribution `p`; the input is log q.
    CrossEntropyMean { p: Vec<f64> },
    /// Mean of the elementwise stable binary cross-entropy on logits.
    BceWithLogitsMean { targets: Vec<f64> },
    MeanAll,
    SumAll,
    /// Scalar view of one flat element.
    Select { flat: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by the node they belong to.
pub struct GradientSet {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientSet {
    /// Gradient of the loss with respect to node `id`. Errors when the node
    /// did not participate differentiably in the loss.
    pub fn wrt(&self, id: NodeId) -> Result<&[f64]> {
        self.grads
            .get(id)
            .and_then(|g| g.as_deref())
            .ok_or_else(|| Error::contract(format!("no gradient recorded for node {id}")))
    }

    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Insert an input tensor; its `requires_grad` flag decides whether a
    /// gradient is materialized for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        self.push(Op::Leaf, vec![], t, requires_grad)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.val(a), self.val(b), |x, y| x + y);
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value, self.any_grad(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.val(a), self.val(b), |x, y| x - y);
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub, vec![a, b], value, self.any_grad(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.val(a), self.val(b), |x, y| x * y);
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value, self.any_grad(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let data = self.val(a).iter().map(|&x| x * s).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(s), vec![a], value, self.any_grad(&[a])))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.val(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu, vec![a], value, self.any_grad(&[a])))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.val(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Sigmoid, vec![a], value, self.any_grad(&[a])))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.val(a).iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Abs, vec![a], value, self.any_grad(&[a])))
    }

    /// Fully connected layer: `x [B,I] @ w [I,O] + b [O]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[w].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                lhs: bs,
                rhs: vec![ws[1]],
            });
        }
        let (batch, in_dim, out_dim) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; batch * out_dim];
        {
            let xd = self.val(x);
            let wd = self.val(w);
            let bd = self.val(b);
            par_for_chunks(&mut out, out_dim, |n, row| {
                row.copy_from_slice(bd);
                let xrow = &xd[n * in_dim..(n + 1) * in_dim];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[i * out_dim..(i + 1) * out_dim];
                    for (o, &wv) in wrow.iter().enumerate() {
                        row[o] += xv * wv;
                    }
                }
            });
        }
        let value = Tensor::new(vec![batch, out_dim], out)?;
        Ok(self.push(Op::Dense, vec![x, w, b], value, self.any_grad(&[x, w, b])))
    }

    /// Stride-1 2D cross-correlation: `x [B,Ci,H,W]` with `w [Co,Ci,kh,kw]`
    /// and zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                lhs: xs,
                rhs: ws,
            });
        }
        let h_out = h + 2 * pad - kh + 1;
        let w_out = wd + 2 * pad - kw + 1;
        let mut out = vec![0.0; b * co * h_out * w_out];
        {
            let xd = self.val(x);
            let kd = self.val(w);
            let sample = co * h_out * w_out;
            par_for_chunks(&mut out, sample, |n, dst| {
                conv2d_forward_sample(
                    &xd[n * ci * h * wd..(n + 1) * ci * h * wd],
                    kd,
                    dst,
                    (ci, h, wd),
                    (co, kh, kw),
                    pad,
                );
            });
        }
        let value = Tensor::new(vec![b, co, h_out, w_out], out)?;
        Ok(self.push(Op::Conv2d { pad }, vec![x, w], value, self.any_grad(&[x, w])))
    }

    /// Add a per-channel bias `b [C]` to `x [B,C,H,W]`.
    pub fn bias_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_channel",
                lhs: xs,
                rhs: bs,
            });
        }
        let hw = xs[2] * xs[3];
        let mut out = Vec::with_capacity(self.val(x).len());
        {
            let xd = self.val(x);
            let bd = self.val(b);
            for n in 0..xs[0] {
                for c in 0..xs[1] {
                    let base = (n * xs[1] + c) * hw;
                    for i in 0..hw {
                        out.push(xd[base + i] + bd[c]);
                    }
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::BiasChannel, vec![x, b], value, self.any_grad(&[x, b])))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: xs,
                rhs: vec![0, 0, 2, 2],
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        {
            let xd = self.val(x);
            for n in 0..b {
                for ch in 0..c {
                    let plane = (n * c + ch) * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = 0usize;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let at = plane + (2 * i + di) * w + (2 * j + dj);
                                    if xd[at] > best {
                                        best = xd[at];
                                        best_at = at;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_at);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value, self.any_grad(&[x])))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let value = log_softmax_rows(&self.nodes[x].value)?;
        Ok(self.push(Op::LogSoftmax, vec![x], value, self.any_grad(&[x])))
    }

    /// Mean negative log-likelihood; `logp` is `[B,C]` log-probabilities.
    pub fn nll_mean(&mut self, logp: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.nodes[logp].value.shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "nll_mean",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::contract(format!(
                "target class {t} out of range for {} classes",
                s[1]
            )));
        }
        let d = self.val(logp);
        let mut acc = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            acc -= d[b * s[1] + t];
        }
        let value = Tensor::scalar(acc / s[0] as f64);
        let rg = self.any_grad(&[logp]);
        Ok(self.push(
            Op::NllMean {
                targets: targets.to_vec(),
            },
            vec![logp],
            value,
            rg,
        ))
    }

    /// Mean cross-entropy against a fixed distribution `p` (same shape as
    /// `logq`, rows summing to 1). Value is `-1/B * sum p log q`; the
    /// gradient flows only through `logq`.
    pub fn cross_entropy_mean(&mut self, logq: NodeId, p: &Tensor) -> Result<NodeId> {
        let s = self.nodes[logq].value.shape().to_vec();
        if p.shape() != s || s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: s,
                rhs: p.shape().to_vec(),
            });
        }
        let d = self.val(logq);
        let mut acc = 0.0;
        for (i, &pi) in p.data().iter().enumerate() {
            if pi != 0.0 {
                acc -= pi * d[i];
            }
        }
        let value = Tensor::scalar(acc / s[0] as f64);
        let rg = self.any_grad(&[logq]);
        Ok(self.push(
            Op::CrossEntropyMean {
                p: p.data().to_vec(),
            },
            vec![logq],
            value,
            rg,
        ))
    }

    /// Mean over all elements of the stable logit binary cross-entropy
    /// `max(z,0) - z*t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits_mean(&mut self, z: NodeId, targets: &Tensor) -> Result<NodeId> {
        let s = self.nodes[z].value.shape().to_vec();
        if targets.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_mean",
                lhs: s,
                rhs: targets.shape().to_vec(),
            });
        }
        let d = self.val(z);
        let mut acc = 0.0;
        for (&zv, &t) in d.iter().zip(targets.data()) {
            acc += zv.max(0.0) - zv * t + (-zv.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(acc / d.len() as f64);
        let rg = self.any_grad(&[z]);
        Ok(self.push(
            Op::BceWithLogitsMean {
                targets: targets.data().to_vec(),
            },
            vec![z],
            value,
            rg,
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.val(x);
        let value = Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64);
        Ok(self.push(Op::MeanAll, vec![x], value, self.any_grad(&[x])))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.val(x).iter().sum::<f64>());
        Ok(self.push(Op::SumAll, vec![x], value, self.any_grad(&[x])))
    }

    /// Scalar view of flat element `flat` of `x`; used to differentiate a
    /// single logit.
    pub fn select(&mut self, x: NodeId, flat: usize) -> Result<NodeId> {
        let d = self.val(x);
        if flat >= d.len() {
            return Err(Error::contract(format!(
                "select index {flat} out of bounds for {} elements",
                d.len()
            )));
        }
        let value = Tensor::scalar(d[flat]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Select { flat }, vec![x], value, rg))
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id].value.data()
    }

    /// Reverse pass from the scalar node `loss`. The graph is not mutated;
    /// repeated calls (with the same or a different loss) give identical
    /// results.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        let ln = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::contract(format!("unknown node {loss}")))?;
        if ln.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.value.shape()
            )));
        }
        if !ln.requires_grad {
            return Err(Error::contract(
                "loss does not depend on any differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Detach the output adjoint so input slots can be borrowed
            // mutably below.
            let g = grads[id].take().expect("present by check above");
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(GradientSet { grads })
    }

    fn ensure<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0; self.nodes[id].value.numel()]);
        }
        grads[id].as_mut()
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &inp in ins {
                    if let Some(gi) = self.ensure(grads, inp) {
                        axpy(gi, g, 1.0);
                    }
                }
            }
            Op::Sub => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    axpy(gi, g, 1.0);
                }
                if let Some(gi) = self.ensure(grads, ins[1]) {
                    axpy(gi, g, -1.0);
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if self.nodes[a].requires_grad {
                    let bv: Vec<f64> = self.val(b).to_vec();
                    let gi = self.ensure(grads, a).expect("requires_grad");
                    for (slot, (&gv, &bvv)) in gi.iter_mut().zip(g.iter().zip(&bv)) {
                        *slot += gv * bvv;
                    }
                }
                if self.nodes[b].requires_grad {
                    let av: Vec<f64> = self.val(a).to_vec();
                    let gi = self.ensure(grads, b).expect("requires_grad");
                    for (slot, (&gv, &avv)) in gi.iter_mut().zip(g.iter().zip(&av)) {
                        *slot += gv * avv;
                    }
                }
            }
            Op::Scale(s) => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    axpy(gi, g, *s);
                }
            }
            Op::Relu => {
                let mask: Vec<f64> = node.value.data().iter().map(|&y| sign0(y)).collect();
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (slot, (&gv, &m)) in gi.iter_mut().zip(g.iter().zip(&mask)) {
                        *slot += gv * m;
                    }
                }
            }
            Op::Sigmoid => {
                let y: Vec<f64> = node.value.data().to_vec();
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (slot, (&gv, &yv)) in gi.iter_mut().zip(g.iter().zip(&y)) {
                        *slot += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Abs => {
                let sg: Vec<f64> = self.val(ins[0]).iter().map(|&x| sign0(x)).collect();
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (slot, (&gv, &s)) in gi.iter_mut().zip(g.iter().zip(&sg)) {
                        *slot += gv * s;
                    }
                }
            }
            Op::Dense => self.backprop_dense(ins, g, grads),
            Op::Conv2d { pad } => self.backprop_conv2d(ins, *pad, g, grads),
            Op::BiasChannel => {
                let xs = self.nodes[ins[0]].value.shape().to_vec();
                let hw = xs[2] * xs[3];
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    axpy(gi, g, 1.0);
                }
                if let Some(gb) = self.ensure(grads, ins[1]) {
                    for n in 0..xs[0] {
                        for c in 0..xs[1] {
                            let base = (n * xs[1] + c) * hw;
                            let mut s = 0.0;
                            for i in 0..hw {
                                s += g[base + i];
                            }
                            gb[c] += s;
                        }
                    }
                }
            }
            Op::MaxPool2 { argmax } => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (o, &at) in argmax.iter().enumerate() {
                        gi[at] += g[o];
                    }
                }
            }
            Op::Reshape => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    axpy(gi, g, 1.0);
                }
            }
            Op::LogSoftmax => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                if self.nodes[ins[0]].requires_grad {
                    let rows = node.value.shape()[0];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    let gi = self.ensure(grads, ins[0]).expect("requires_grad");
                    axpy(gi, &dx, 1.0);
                }
            }
            Op::NllMean { targets } => {
                let cols = self.nodes[ins[0]].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (b, &t) in targets.iter().enumerate() {
                        gi[b * cols + t] -= scale;
                    }
                }
            }
            Op::CrossEntropyMean { p } => {
                let rows = self.nodes[ins[0]].value.shape()[0];
                let scale = g[0] / rows as f64;
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (slot, &pv) in gi.iter_mut().zip(p) {
                        *slot -= scale * pv;
                    }
                }
            }
            Op::BceWithLogitsMean { targets } => {
                let z: Vec<f64> = self.val(ins[0]).to_vec();
                let scale = g[0] / z.len() as f64;
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for (slot, (&zv, &t)) in gi.iter_mut().zip(z.iter().zip(targets)) {
                        *slot += scale * (stable_sigmoid(zv) - t);
                    }
                }
            }
            Op::MeanAll => {
                let n = self.nodes[ins[0]].value.numel();
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    let s = g[0] / n as f64;
                    for slot in gi.iter_mut() {
                        *slot += s;
                    }
                }
            }
            Op::SumAll => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    for slot in gi.iter_mut() {
                        *slot += g[0];
                    }
                }
            }
            Op::Select { flat } => {
                if let Some(gi) = self.ensure(grads, ins[0]) {
                    gi[*flat] += g[0];
                }
            }
        }
        Ok(())
    }

    fn backprop_dense(&self, ins: &[NodeId], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (x, w, b) = (ins[0], ins[1], ins[2]);
        let xs = self.nodes[x].value.shape().to_vec();
        let (batch, in_dim) = (xs[0], xs[1]);
        let out_dim = self.nodes[w].value.shape()[1];
        if self.nodes[x].requires_grad {
            let wd: Vec<f64> = self.val(w).to_vec();
            let gi = self.ensure(grads, x).expect("requires_grad");
            par_for_chunks(gi, in_dim, |n, dst| {
                let grow = &g[n * out_dim..(n + 1) * out_dim];
                for (i, slot) in dst.iter_mut().enumerate() {
                    let wrow = &wd[i * out_dim..(i + 1) * out_dim];
                    let mut s = 0.0;
                    for (&gv, &wv) in grow.iter().zip(wrow) {
                        s += gv * wv;
                    }
                    *slot += s;
                }
            });
        }
        if self.nodes[w].requires_grad {
            let xd: Vec<f64> = self.val(x).to_vec();
            let gw = self.ensure(grads, w).expect("requires_grad");
            par_for_chunks(gw, out_dim, |i, dst| {
                for n in 0..batch {
                    let xv = xd[n * in_dim + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let grow = &g[n * out_dim..(n + 1) * out_dim];
                    for (slot, &gv) in dst.iter_mut().zip(grow) {
                        *slot += xv * gv;
                    }
                }
            });
        }
        if let Some(gb) = self.ensure(grads, b) {
            for n in 0..batch {
                let grow = &g[n * out_dim..(n + 1) * out_dim];
                for (slot, &gv) in gb.iter_mut().zip(grow) {
                    *slot += gv;
                }
            }
        }
    }

    fn backprop_conv2d(
        &self,
        ins: &[NodeId],
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (x, w) = (ins[0], ins[1]);
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (batch, ci, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let h_out = h + 2 * pad - kh + 1;
        let w_out = wid + 2 * pad - kw + 1;
        let g_sample = co * h_out * w_out;
        if self.nodes[x].requires_grad {
            let kd: Vec<f64> = self.val(w).to_vec();
            let gx = self.ensure(grads, x).expect("requires_grad");
            par_for_chunks(gx, ci * h * wid, |n, dst| {
                conv2d_backward_input_sample(
                    &g[n * g_sample..(n + 1) * g_sample],
                    &kd,
                    dst,
                    (ci, h, wid),
                    (co, kh, kw),
                    pad,
                );
            });
        }
        if self.nodes[w].requires_grad {
            let xd: Vec<f64> = self.val(x).to_vec();
            let x_sample = ci * h * wid;
            let gw = self.ensure(grads, w).expect("requires_grad");
            par_for_chunks(gw, ci * kh * kw, |c_out, dst| {
                for n in 0..batch {
                    let xn = &xd[n * x_sample..(n + 1) * x_sample];
                    let gn = &g[n * g_sample + c_out * h_out * w_out
                        ..n * g_sample + (c_out + 1) * h_out * w_out];
                    for c_in in 0..ci {
                        let plane = &xn[c_in * h * wid..(c_in + 1) * h * wid];
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let mut s = 0.0;
                                for ho in 0..h_out {
                                    let ihp = ho + dkh;
                                    if ihp < pad || ihp >= h + pad {
                                        continue;
                                    }
                                    let ih = ihp - pad;
                                    let grow = &gn[ho * w_out..(ho + 1) * w_out];
                                    let xrow = &plane[ih * wid..(ih + 1) * wid];
                                    let wo_lo = pad.saturating_sub(dkw);
                                    let wo_hi = w_out.min((wid + pad).saturating_sub(dkw));
                                    for wo in wo_lo..wo_hi {
                                        s += grow[wo] * xrow[wo + dkw - pad];
                                    }
                                }
                                dst[(c_in * kh + dkh) * kw + dkw] += s;
                            }
                        }
                    }
                }
            });
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

/// One sample of the forward convolution; accumulation order per output
/// element is (kh, ci, kw).
fn conv2d_forward_sample(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    (ci, h, wid): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    pad: usize,
) {
    let h_out = h + 2 * pad - kh + 1;
    let w_out = wid + 2 * pad - kw + 1;
    for c_out in 0..co {
        for ho in 0..h_out {
            let dst = &mut out[(c_out * h_out + ho) * w_out..(c_out * h_out + ho + 1) * w_out];
            for dkh in 0..kh {
                let ihp = ho + dkh;
                if ihp < pad || ihp >= h + pad {
                    continue;
                }
                let ih = ihp - pad;
                for c_in in 0..ci {
                    let xrow = &x[(c_in * h + ih) * wid..(c_in * h + ih + 1) * wid];
                    let wrow = &w[((c_out * ci + c_in) * kh + dkh) * kw
                        ..((c_out * ci + c_in) * kh + dkh + 1) * kw];
                    for (wo, slot) in dst.iter_mut().enumerate() {
                        let kw_lo = pad.saturating_sub(wo);
                        let kw_hi = kw.min((wid + pad).saturating_sub(wo));
                        let mut s = 0.0;
                        for dkw in kw_lo..kw_hi {
                            s += xrow[wo + dkw - pad] * wrow[dkw];
                        }
                        *slot += s;
                    }
                }
            }
        }
    }
}

/// One sample of the input gradient; accumulation order per input element
/// is (kh, co, kw).
fn conv2d_backward_input_sample(
    g: &[f64],
    w: &[f64],
    dx: &mut [f64],
    (ci, h, wid): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    pad: usize,
) {
    let h_out = h + 2 * pad - kh + 1;
    let w_out = wid + 2 * pad - kw + 1;
    for c_in in 0..ci {
        for ih in 0..h {
            let dst = &mut dx[(c_in * h + ih) * wid..(c_in * h + ih + 1) * wid];
            for dkh in 0..kh {
                let ohp = ih + pad;
                if ohp < dkh || ohp - dkh >= h_out {
                    continue;
                }
                let oh = ohp - dkh;
                for c_out in 0..co {
                    let grow = &g[(c_out * h_out + oh) * w_out..(c_out * h_out + oh + 1) * w_out];
                    let wrow = &w[((c_out * ci + c_in) * kh + dkh) * kw
                        ..((c_out * ci + c_in) * kh + dkh + 1) * kw];
                    for (iw, slot) in dst.iter_mut().enumerate() {
                        let owp = iw + pad;
                        let kw_lo = owp.saturating_sub(w_out - 1).min(kw);
                        let kw_hi = kw.min(owp + 1);
                        let mut s = 0.0;
                        for dkw in kw_lo..kw_hi {
                            s += grow[owp - dkw] * wrow[dkw];
                        }
                        *slot += s;
                    }
                }
            }
        }
    }
}

//! Central finite-difference validation of the reverse-mode gradients.
//!
//! Each case freezes an input tensor plus a loss-builder closure; the
//! analytic gradient from one backward pass is compared elementwise
//! against `(f(x+h) - f(x-h)) / 2h` from fresh forward evaluations.
//! Piecewise-linear ops (relu, abs, max pool) get inputs nudged away
//! from their kinks so the difference quotient stays on one branch.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Perturbation used by the difference quotient.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Acceptance threshold on the stabilized relative error.
pub const DEFAULT_TOL: f64 = 1e-4;

/// One gradient-check scenario: a varied tensor and a scalar loss built
/// from it. Auxiliary tensors (weights, reference distributions) are
/// frozen inside the closure so only `x0` moves.
pub struct CheckCase {
    pub name: String,
    pub x0: Tensor,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + Sync>,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

/// Stabilized relative error between an analytic and a central-difference
/// derivative.
pub fn rel_err(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / analytic.abs().max(central.abs()).max(1e-8)
}

/// Check one case at perturbation `eps`; returns the worst elementwise
/// relative error.
pub fn run_case(case: &CheckCase, eps: f64) -> Result<CheckReport> {
    let mut g = Graph::new();
    let x = g.leaf(case.x0.clone().with_requires_grad(true));
    let loss = (case.build)(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.wrt(x)?.to_vec();

    let shape = case.x0.shape().to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(shape.clone(), data)?.with_requires_grad(true));
        let loss = (case.build)(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..case.x0.numel() {
        let mut plus = case.x0.data().to_vec();
        plus[i] += eps;
        let mut minus = case.x0.data().to_vec();
        minus[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        max_rel = max_rel.max(rel_err(analytic[i], central));
    }
    Ok(CheckReport {
        name: case.name.clone(),
        elements: case.x0.numel(),
        max_rel_err: max_rel,
    })
}

/// Number of distinct case kinds [`make_case`] cycles through.
pub const KIND_COUNT: usize = 26;

/// Build `count` cases cycling over every kind with per-case seeds.
pub fn make_cases(count: usize, base_seed: u64) -> Vec<CheckCase> {
    (0..count)
        .map(|i| make_case(i % KIND_COUNT, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Run the whole suite; all reports must stay under [`DEFAULT_TOL`].
pub fn run_suite(count: usize, base_seed: u64, eps: f64) -> Result<Vec<CheckReport>> {
    make_cases(count, base_seed)
        .iter()
        .map(|c| run_case(c, eps))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Random magnitudes in `[min_abs, max_abs]` with random sign; keeps
/// piecewise-linear ops away from their kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, min_abs: f64, max_abs: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(min_abs..max_abs);
            if rng.random_range(0..2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// 2x2 pooling windows with all pairwise gaps above `gap`, so no winner
/// flips under the perturbation.
fn pool_safe(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    assert!(shape.len() == 4);
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = vec![0.0; b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    loop {
                        let vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let mut ok = true;
                        for a in 0..4 {
                            for bb in a + 1..4 {
                                if (vals[a] - vals[bb]).abs() < gap {
                                    ok = false;
                                }
                            }
                        }
                        if ok {
                            for (k, &v) in vals.iter().enumerate() {
                                data[plane + (2 * i + k / 2) * w + (2 * j + k % 2)] = v;
                            }
                            break;
                        }
                    }
                }
            }
            // Rows/columns beyond the pooled region keep zeros; they do not
            // reach the loss.
        }
    }
    Tensor::new(shape, data).expect("valid shape")
}

/// Scalar loss that weights every element of `y` differently, so index
/// permutation bugs change the gradient.
fn weighted_sum(g: &mut Graph, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.leaf(weights.clone());
    let prod = g.mul(y, w)?;
    g.sum_all(prod)
}

fn make_case(kind: usize, seed: u64) -> CheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xc0ff_ee00);
    let r = &mut rng;
    match kind {
        0 => {
            let shape = vec![2, r.random_range(2..5usize)];
            let x0 = uniform(r, shape.clone(), -1.0, 1.0);
            let aux = uniform(r, shape.clone(), -1.0, 1.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("add/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let a = g.leaf(aux.clone());
                    let y = g.add(x, a)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        1 => {
            let shape = vec![r.random_range(2..4usize), 3];
            let x0 = uniform(r, shape.clone(), -1.0, 1.0);
            let aux = uniform(r, shape.clone(), -1.0, 1.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("sub/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let a = g.leaf(aux.clone());
                    let y = g.sub(x, a)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        2 => {
            let shape = vec![2, r.random_range(2..5usize)];
            let x0 = uniform(r, shape.clone(), -1.0, 1.0);
            let aux = uniform(r, shape.clone(), 0.5, 1.5);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("mul/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let a = g.leaf(aux.clone());
                    let y = g.mul(x, a)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        3 => {
            let shape = vec![r.random_range(2..6usize)];
            let x0 = uniform(r, shape.clone(), -1.0, 1.0);
            let s = r.random_range(-2.0..2.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("scale/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.scale(x, s)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        4 => {
            let shape = vec![2, r.random_range(3..6usize)];
            let x0 = away_from_zero(r, shape.clone(), 0.05, 1.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("relu/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.relu(x)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        5 => {
            let shape = vec![r.random_range(2..5usize), 2];
            let x0 = uniform(r, shape.clone(), -3.0, 3.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("sigmoid/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.sigmoid(x)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        6 => {
            let shape = vec![r.random_range(3..7usize)];
            let x0 = away_from_zero(r, shape.clone(), 0.05, 1.0);
            let w = uniform(r, shape, -2.0, 2.0);
            CheckCase {
                name: format!("abs/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.abs(x)?;
                    weighted_sum(g, y, &w)
                }),
            }
        }
        7 => {
            let shape = vec![2, r.random_range(2..5usize)];
            let x0 = uniform(r, shape, -1.0, 1.0);
            CheckCase {
                name: format!("mean_all/{seed}"),
                x0,
                build: Box::new(move |g, x| g.mean_all(x)),
            }
        }
        8 => {
            let shape = vec![r.random_range(2..6usize)];
            let x0 = uniform(r, shape, -1.0, 1.0);
            CheckCase {
                name: format!("sum_all/{seed}"),
                x0,
                build: Box::new(move |g, x| g.sum_all(x)),
            }
        }
        9 => {
            let n = r.random_range(3..7usize);
            let x0 = uniform(r, vec![n], -2.0, 2.0);
            let flat = r.random_range(0..n);
            CheckCase {
                name: format!("select/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.sigmoid(x)?;
                    g.select(y, flat)
                }),
            }
        }
        10 | 11 | 12 => {
            let (b, i, o) = (
                r.random_range(1..3usize),
                r.random_range(2..5usize),
                r.random_range(2..4usize),
            );
            let x = uniform(r, vec![b, i], -1.0, 1.0);
            let wt = uniform(r, vec![i, o], -1.0, 1.0);
            let bias = uniform(r, vec![o], -0.5, 0.5);
            let lw = uniform(r, vec![b, o], -2.0, 2.0);
            let (name, x0): (&str, Tensor) = match kind {
                10 => ("dense/x", x.clone()),
                11 => ("dense/w", wt.clone()),
                _ => ("dense/b", bias.clone()),
            };
            let x0 = x0.clone();
            CheckCase {
                name: format!("{name}/{seed}"),
                x0,
                build: Box::new(move |g, varied| {
                    let (xi, wi, bi) = match kind {
                        10 => (varied, g.leaf(wt.clone()), g.leaf(bias.clone())),
                        11 => (g.leaf(x.clone()), varied, g.leaf(bias.clone())),
                        _ => (g.leaf(x.clone()), g.leaf(wt.clone()), varied),
                    };
                    let y = g.dense(xi, wi, bi)?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        13 | 14 => {
            let (b, ci, co) = (
                r.random_range(1..3usize),
                r.random_range(1..3usize),
                r.random_range(1..3usize),
            );
            let (h, w) = (r.random_range(3..6usize), r.random_range(3..6usize));
            let k = 3;
            let pad = r.random_range(0..2usize);
            let x = uniform(r, vec![b, ci, h, w], -1.0, 1.0);
            let kern = uniform(r, vec![co, ci, k, k], -1.0, 1.0);
            let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
            let lw = uniform(r, vec![b, co, ho, wo], -2.0, 2.0);
            let x0 = if kind == 13 { x.clone() } else { kern.clone() };
            let name = if kind == 13 { "conv2d/x" } else { "conv2d/w" };
            CheckCase {
                name: format!("{name}/p{pad}/{seed}"),
                x0,
                build: Box::new(move |g, varied| {
                    let (xi, wi) = if kind == 13 {
                        (varied, g.leaf(kern.clone()))
                    } else {
                        (g.leaf(x.clone()), varied)
                    };
                    let y = g.conv2d(xi, wi, pad)?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        15 | 16 => {
            let (b, c, h, w) = (
                r.random_range(1..3usize),
                r.random_range(1..4usize),
                r.random_range(2..4usize),
                r.random_range(2..4usize),
            );
            let x = uniform(r, vec![b, c, h, w], -1.0, 1.0);
            let bias = uniform(r, vec![c], -0.5, 0.5);
            let lw = uniform(r, vec![b, c, h, w], -2.0, 2.0);
            let x0 = if kind == 15 { x.clone() } else { bias.clone() };
            let name = if kind == 15 { "bias_channel/x" } else { "bias_channel/b" };
            CheckCase {
                name: format!("{name}/{seed}"),
                x0,
                build: Box::new(move |g, varied| {
                    let (xi, bi) = if kind == 15 {
                        (varied, g.leaf(bias.clone()))
                    } else {
                        (g.leaf(x.clone()), varied)
                    };
                    let y = g.bias_channel(xi, bi)?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        17 => {
            let (b, c) = (r.random_range(1..3usize), r.random_range(1..3usize));
            let (h, w) = (4, r.random_range(2..4usize) * 2);
            let x0 = pool_safe(r, vec![b, c, h, w], 0.05);
            let lw = uniform(r, vec![b, c, h / 2, w / 2], -2.0, 2.0);
            CheckCase {
                name: format!("max_pool2/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.max_pool2(x)?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        18 => {
            let (a, b) = (r.random_range(2..4usize), r.random_range(2..4usize));
            let x0 = uniform(r, vec![a, b], -1.0, 1.0);
            let lw = uniform(r, vec![a * b], -2.0, 2.0);
            CheckCase {
                name: format!("reshape/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let n = g.value(x).numel();
                    let y = g.reshape(x, vec![n])?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        19 => {
            let (b, c) = (r.random_range(1..3usize), r.random_range(2..5usize));
            let x0 = uniform(r, vec![b, c], -2.0, 2.0);
            let lw = uniform(r, vec![b, c], -2.0, 2.0);
            CheckCase {
                name: format!("log_softmax/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let y = g.log_softmax(x)?;
                    weighted_sum(g, y, &lw)
                }),
            }
        }
        20 => {
            let (b, c) = (r.random_range(1..4usize), r.random_range(2..5usize));
            let x0 = uniform(r, vec![b, c], -2.0, 2.0);
            let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            CheckCase {
                name: format!("nll_mean/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let lp = g.log_softmax(x)?;
                    g.nll_mean(lp, &targets)
                }),
            }
        }
        21 => {
            let (b, c) = (r.random_range(1..3usize), r.random_range(2..4usize));
            let x0 = uniform(r, vec![b, c], -2.0, 2.0);
            let mut p = uniform(r, vec![b, c], 0.1, 1.0);
            for row in 0..b {
                let s: f64 = p.data()[row * c..(row + 1) * c].iter().sum();
                for v in &mut p.data_mut()[row * c..(row + 1) * c] {
                    *v /= s;
                }
            }
            CheckCase {
                name: format!("cross_entropy_mean/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    let lq = g.log_softmax(x)?;
                    g.cross_entropy_mean(lq, &p)
                }),
            }
        }
        22 => {
            let (b, c) = (r.random_range(1..3usize), r.random_range(2..4usize));
            let x0 = uniform(r, vec![b, c], -2.0, 2.0);
            let t_data: Vec<f64> = (0..b * c).map(|_| r.random_range(0..2) as f64).collect();
            let t = Tensor::new(vec![b, c], t_data).expect("valid shape");
            CheckCase {
                name: format!("bce_with_logits/{seed}"),
                x0,
                build: Box::new(move |g, x| g.bce_with_logits_mean(x, &t)),
            }
        }
        23 => {
            let n = r.random_range(2..6usize);
            let x0 = uniform(r, vec![n], -1.0, 1.0);
            CheckCase {
                name: format!("fan_out/{seed}"),
                x0,
                build: Box::new(move |g, x| {
                    // mean(x*x + 0.5*x): two consumers of the same node.
                    let xx = g.mul(x, x)?;
                    let hx = g.scale(x, 0.5)?;
                    let y = g.add(xx, hx)?;
                    g.mean_all(y)
                }),
            }
        }
        // Composite: conv -> bias -> sigmoid -> flatten -> dense ->
        // log_softmax -> nll, varied either at the image or the kernel.
        24 | 25 => {
            let (b, ci, co) = (r.random_range(1..3usize), 1, 2);
            let (h, w) = (4, 4);
            let x = uniform(r, vec![b, ci, h, w], -1.0, 1.0);
            let kern = uniform(r, vec![co, ci, 3, 3], -0.8, 0.8);
            let cbias = uniform(r, vec![co], -0.3, 0.3);
            let flat = co * h * w;
            let dw = uniform(r, vec![flat, 3], -0.7, 0.7);
            let db = uniform(r, vec![3], -0.3, 0.3);
            let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..3usize)).collect();
            let x0 = if kind == 24 { x.clone() } else { kern.clone() };
            let name = if kind == 24 { "composite/x" } else { "composite/w" };
            CheckCase {
                name: format!("{name}/{seed}"),
                x0,
                build: Box::new(move |g, varied| {
                    let (xi, ki) = if kind == 24 {
                        (varied, g.leaf(kern.clone()))
                    } else {
                        (g.leaf(x.clone()), varied)
                    };
                    let c = g.conv2d(xi, ki, 1)?;
                    let cb = g.leaf(cbias.clone());
                    let c = g.bias_channel(c, cb)?;
                    let a = g.sigmoid(c)?;
                    let batch = g.value(a).shape()[0];
                    let f = g.reshape(a, vec![batch, flat])?;
                    let wi = g.leaf(dw.clone());
                    let bi = g.leaf(db.clone());
                    let logits = g.dense(f, wi, bi)?;
                    let lp = g.log_softmax(logits)?;
                    g.nll_mean(lp, &targets)
                }),
            }
        }
        other => unreachable!("unknown case kind {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_at_default_tolerance() {
        let reports = run_suite(KIND_COUNT, 7, DEFAULT_EPS).unwrap();
        for rep in &reports {
            assert!(
                rep.max_rel_err < DEFAULT_TOL,
                "{} exceeded tolerance: {}",
                rep.name,
                rep.max_rel_err
            );
        }
    }

    #[test]
    fn rel_err_is_stabilized_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
        assert!(rel_err(1.0, 2.0) > 0.4);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(8, 3, DEFAULT_EPS).unwrap();
        let b = run_suite(8, 3, DEFAULT_EPS).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}

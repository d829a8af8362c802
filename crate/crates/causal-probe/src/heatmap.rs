//! Class activation maps and per-pixel causal effect maps, with PNG
//! rendering.
//!
//! Both maps answer "which pixels support class j", but differently:
//! the activation map weighs the last convolution's feature maps by
//! their pooled gradients, while the effect map occludes patches and
//! measures how much each occlusion moves the class probability. The
//! effect map is a genuine do-intervention in pixel space and works for
//! any scorer, including the autoencoder-augmented network.

use std::path::Path;

use crate::causal::augmented_probabilities;
use crate::concept::ConceptAutoencoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::{LayerSpec, Network};
use crate::tensor::Tensor;

/// How raw map values scale into display range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the largest magnitude; range [-1, 1], zero stays zero.
    SignedSymmetric,
    /// Affine to [0, 1]; a flat map collapses to zero.
    MinMax,
}

/// A per-pixel map at the input's spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Raw values, `[H, W]`.
    pub values: Tensor,
    pub normalization: Normalization,
    /// Human-readable origin and parameter echo.
    pub provenance: String,
}

impl Heatmap {
    pub fn min_raw(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_raw(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Values scaled per the map's normalization.
    pub fn normalized(&self) -> Tensor {
        let data = self.values.data();
        let out: Vec<f64> = match self.normalization {
            Normalization::SignedSymmetric => {
                let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak == 0.0 {
                    vec![0.0; data.len()]
                } else {
                    data.iter().map(|v| v / peak).collect()
                }
            }
            Normalization::MinMax => {
                let lo = self.min_raw();
                let hi = self.max_raw();
                if hi == lo {
                    vec![0.0; data.len()]
                } else {
                    data.iter().map(|v| (v - lo) / (hi - lo)).collect()
                }
            }
        };
        Tensor::new(self.values.shape().to_vec(), out).expect("same shape")
    }
}

/// Bilinear resize of a `[h, w]` map to `[out_h, out_w]`, sampling at
/// pixel centers with edge clamping.
fn bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - tx) + map[y0 * w + x1] * tx;
            let bot = map[y1 * w + x0] * (1.0 - tx) + map[y1 * w + x1] * tx;
            out[oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn check_single_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::contract(format!(
            "map input must be one [1,C,H,W] image, got {s:?}"
        )));
    }
    Ok((s[1], s[2], s[3]))
}

/// Gradient-weighted activation map of `class_id` at the last
/// convolution's activation, upsampled to input resolution. Raw values
/// are nonnegative.
pub fn compute_cam(net: &Network, image: &Tensor, class_id: usize) -> Result<Heatmap> {
    let (_, height, width) = check_single_image(image)?;
    let layers = &net.spec.layers;
    let last_conv = layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
        .ok_or_else(|| Error::contract("activation map needs a convolution layer"))?;
    let act = layers
        .iter()
        .enumerate()
        .position(|(i, l)| i > last_conv && matches!(l, LayerSpec::Relu | LayerSpec::Sigmoid))
        .ok_or_else(|| {
            Error::contract("activation map needs an activation after the last convolution")
        })?;
    let level = layers[..=act]
        .iter()
        .filter(|l| matches!(l, LayerSpec::Relu | LayerSpec::Sigmoid))
        .count();

    let mut g = Graph::new();
    let x = g.leaf(image.clone().with_requires_grad(true));
    let fp = net.forward_on(&mut g, x, false)?;
    let classes = g.value(fp.logits).numel();
    if class_id >= classes {
        return Err(Error::range(format!(
            "class {class_id} out of range for {classes} classes"
        )));
    }
    let tap = fp.taps[level - 1];
    let score = g.select(fp.logits, class_id)?;
    let grads = g.backward(score)?;
    let gt = grads.wrt(tap)?;
    let a = g.value(tap);
    let [k, h, w] = [a.shape()[1], a.shape()[2], a.shape()[3]];
    let plane = h * w;

    // Channel weight = spatial mean gradient; map = relu over the
    // weighted channel sum.
    let mut map = vec![0.0; plane];
    for c in 0..k {
        let wc = gt[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        for p in 0..plane {
            map[p] += wc * a.data()[c * plane + p];
        }
    }
    for v in map.iter_mut() {
        *v = v.max(0.0);
    }
    let up = bilinear(&map, h, w, height, width);
    Ok(Heatmap {
        values: Tensor::new(vec![height, width], up)?,
        normalization: Normalization::MinMax,
        provenance: format!("activation map, class {class_id}, conv layer {last_conv}"),
    })
}

/// Patch anchor offsets along one axis: multiples of `stride`, with the
/// final anchor forced so the far edge is reached.
fn patch_anchors(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut anchors: Vec<usize> = (0..=last).step_by(stride).collect();
    if *anchors.last().expect("at least one anchor") != last {
        anchors.push(last);
    }
    anchors
}

/// Causal effect map via patch occlusion against any scorer. For every
/// patch anchor, the patch is zero-filled and the class probability
/// re-read; a pixel's value is minus the mean effect over the patches
/// covering it, so positive values mark pixels whose removal hurts the
/// class.
pub fn compute_cem_with(
    probs: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    image: &Tensor,
    class_id: usize,
    patch: usize,
    stride: usize,
    provenance: &str,
) -> Result<Heatmap> {
    let (c, height, width) = check_single_image(image)?;
    if patch == 0 || stride == 0 {
        return Err(Error::contract("patch and stride must be positive"));
    }
    if patch > height || patch > width {
        return Err(Error::contract(format!(
            "patch {patch} exceeds image extent {height}x{width}"
        )));
    }
    let clean = probs(image)?;
    let classes = clean.shape()[1];
    if class_id >= classes {
        return Err(Error::range(format!(
            "class {class_id} out of range for {classes} classes"
        )));
    }
    let p_clean = clean.data()[class_id];

    let rows = patch_anchors(height, patch, stride);
    let cols = patch_anchors(width, patch, stride);
    let mut anchors = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &q in &cols {
            anchors.push((r, q));
        }
    }

    // One occluded copy per anchor, scored in chunks.
    let mut effects = Vec::with_capacity(anchors.len());
    for chunk in anchors.chunks(256) {
        let mut batch = Vec::with_capacity(chunk.len() * image.numel());
        for &(r, q) in chunk {
            let mut occ = image.data().to_vec();
            for ch in 0..c {
                for y in r..r + patch {
                    for x in q..q + patch {
                        occ[ch * height * width + y * width + x] = 0.0;
                    }
                }
            }
            batch.extend_from_slice(&occ);
        }
        let bt = Tensor::new(vec![chunk.len(), c, height, width], batch)?;
        let bp = probs(&bt)?;
        for i in 0..chunk.len() {
            effects.push(bp.data()[i * classes + class_id] - p_clean);
        }
    }

    let mut sum = vec![0.0; height * width];
    let mut count = vec![0usize; height * width];
    for (&(r, q), &e) in anchors.iter().zip(&effects) {
        for y in r..r + patch {
            for x in q..q + patch {
                sum[y * width + x] += e;
                count[y * width + x] += 1;
            }
        }
    }
    let values: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { -s / n as f64 })
        .collect();
    Ok(Heatmap {
        values: Tensor::new(vec![height, width], values)?,
        normalization: Normalization::SignedSymmetric,
        provenance: format!(
            "{provenance}, class {class_id}, patch {patch}, stride {stride}, fill 0"
        ),
    })
}

/// Effect map against a plain network.
pub fn compute_cem(
    net: &Network,
    image: &Tensor,
    class_id: usize,
    patch: usize,
    stride: usize,
) -> Result<Heatmap> {
    compute_cem_with(
        &mut |b| net.probabilities(b),
        image,
        class_id,
        patch,
        stride,
        "effect map",
    )
}

/// Effect map against the autoencoder-augmented network.
pub fn compute_cem_augmented(
    host: &Network,
    ae: &ConceptAutoencoder,
    image: &Tensor,
    class_id: usize,
    patch: usize,
    stride: usize,
) -> Result<Heatmap> {
    compute_cem_with(
        &mut |b| augmented_probabilities(host, ae, b),
        image,
        class_id,
        patch,
        stride,
        "effect map (augmented)",
    )
}

/// Mean absolute difference of two maps' raw values.
pub fn l1_distance(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "map distance",
            lhs: a.values.shape().to_vec(),
            rhs: b.values.shape().to_vec(),
        });
    }
    let n = a.values.numel();
    Ok(a.values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn colorize(norm: f64, mode: Normalization) -> [f64; 3] {
    match mode {
        // Diverging blue-white-red centered at zero.
        Normalization::SignedSymmetric => {
            if norm >= 0.0 {
                [1.0, 1.0 - norm, 1.0 - norm]
            } else {
                [1.0 + norm, 1.0 + norm, 1.0]
            }
        }
        // White-to-red ramp.
        Normalization::MinMax => [1.0, 1.0 - norm, 1.0 - norm],
    }
}

/// Render a map as an 8-bit PNG, optionally alpha-blended (0.5) over
/// the grayscale of a base image, and drop a sidecar `.txt` beside it
/// with the raw range and provenance. Identical inputs produce
/// identical bytes.
pub fn render_heatmap(map: &Heatmap, base: Option<&Tensor>, out_path: &Path) -> Result<()> {
    let h = map.values.shape()[0];
    let w = map.values.shape()[1];
    let gray: Option<Vec<f64>> = match base {
        None => None,
        Some(img) => {
            let (c, bh, bw) = check_single_image(img)?;
            if bh != h || bw != w {
                return Err(Error::ShapeMismatch {
                    op: "map render base",
                    lhs: vec![h, w],
                    rhs: vec![bh, bw],
                });
            }
            let plane = h * w;
            Some(
                (0..plane)
                    .map(|p| {
                        let s: f64 = (0..c).map(|ch| img.data()[ch * plane + p]).sum();
                        (s / c as f64).clamp(0.0, 1.0)
                    })
                    .collect(),
            )
        }
    };

    let norm = map.normalized();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = colorize(norm.data()[y * w + x], map.normalization);
            if let Some(g) = &gray {
                let b = g[y * w + x];
                for v in rgb.iter_mut() {
                    *v = 0.5 * *v + 0.5 * b;
                }
            }
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_byte(rgb[0]), to_byte(rgb[1]), to_byte(rgb[2])]),
            );
        }
    }
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::io(out_path, std::io::Error::other(e.to_string())))?;

    let sidecar = out_path.with_extension("txt");
    let text = format!(
        "provenance: {}\nnormalization: {}\nmin_raw: {:.6e}\nmax_raw: {:.6e}\n",
        map.provenance,
        match map.normalization {
            Normalization::SignedSymmetric => "signed_symmetric",
            Normalization::MinMax => "minmax",
        },
        map.min_raw(),
        map.max_raw(),
    );
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

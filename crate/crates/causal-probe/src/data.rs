//! Datasets: IDX file loading, batching, and deterministic synthetic
//! image generators used by tests and examples.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Targets: either one class index per sample or a `[N, K]` multi-hot
/// matrix for independent binary outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    MultiHot(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::MultiHot(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset in the given index order.
    pub fn gather(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::MultiHot(t) => {
                let k = t.shape()[1];
                let mut data = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * k..(i + 1) * k]);
                }
                Labels::MultiHot(Tensor::new(vec![idx.len(), k], data).expect("valid shape"))
            }
        }
    }
}

/// Images `[N, C, H, W]` in `[0, 1]` plus aligned labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Labels,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Labels) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::contract(format!(
                "dataset images must be [N,C,H,W], got {:?}",
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
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample element count `C*H*W`.
    pub fn sample_len(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Copy of sample `i` as a `[1, C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let mut shape = self.images.shape().to_vec();
        shape[0] = 1;
        let n = self.sample_len();
        Tensor::new(shape, self.images.data()[i * n..(i + 1) * n].to_vec()).expect("valid slice")
    }

    /// Batch tensor and labels for the given sample indices, in order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Labels) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        (
            Tensor::new(shape, data).expect("valid shape"),
            self.labels.gather(idx),
        )
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels }
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: "truncated header".into(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

/// Load a big-endian IDX image file into a `[N, 1, H, W]` tensor scaled
/// to `[0, 1]` (byte value / 255).
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let start = 16;
    let want = n * h * w;
    if bytes.len() != start + want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!(
                "payload length {} does not match header ({n} x {h} x {w})",
                bytes.len().saturating_sub(start)
            ),
        });
    }
    let data = bytes[start..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Load a big-endian IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!(
                "payload length {} does not match count {n}",
                bytes.len().saturating_sub(8)
            ),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load an image/label IDX pair with matching sample counts.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = load_idx_images(images)?;
    let lbls = load_idx_labels(labels)?;
    Dataset::new(imgs, Labels::Classes(lbls))
}

/// Write a `[N, 1, H, W]` tensor as an IDX image file; values are clamped
/// to `[0, 1]` and rounded to bytes.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    if images.rank() != 4 || images.shape()[1] != 1 {
        return Err(Error::contract(format!(
            "IDX image export needs [N,1,H,W], got {:?}",
            images.shape()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.shape()[0] as u32).to_be_bytes());
    out.extend_from_slice(&(images.shape()[2] as u32).to_be_bytes());
    out.extend_from_slice(&(images.shape()[3] as u32).to_be_bytes());
    for &v in images.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write class labels as an IDX label file; labels above 255 are rejected.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::contract(format!("label {l} exceeds byte range")));
        }
        out.push(l as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Synthetic 8x8 stripe images: even samples carry one bright horizontal
/// row (class 0), odd samples one bright vertical column (class 1), over
/// faint uniform noise. The stripe location is drawn per sample.
pub fn synth_bars(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8usize, 8usize);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mut img: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..0.05)).collect();
        let stripe = rng.random_range(0..8usize);
        let intensity = rng.random_range(0.6..1.0);
        for t in 0..8 {
            let at = if class == 0 { stripe * w + t } else { t * w + stripe };
            img[at] = intensity;
        }
        data.extend_from_slice(&img);
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], data).expect("valid shape"),
        Labels::Classes(labels),
    )
    .expect("aligned")
}

/// Stripe row (class 0) or column (class 1) index of a bars sample,
/// recovered from the pixels; used to score heatmap localization.
pub fn bars_stripe_index(image: &Tensor, class: usize) -> usize {
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let d = image.data();
    let mut best = (0usize, f64::NEG_INFINITY);
    let lines = if class == 0 { h } else { w };
    for li in 0..lines {
        let sum: f64 = (0..8)
            .map(|t| {
                let at = if class == 0 { li * w + t } else { t * w + li };
                d[at]
            })
            .sum();
        if sum > best.1 {
            best = (li, sum);
        }
    }
    best.0
}

/// Tiny 4x4 intensity blobs: even samples dim (class 0, pixels in
/// [0.1, 0.3]), odd samples bright (class 1, pixels in [0.7, 0.9]). The
/// worst-case class margin is 0.4 in every pixel.
pub fn synth_blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = 16usize;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (lo, hi) = if class == 0 { (0.1, 0.3) } else { (0.7, 0.9) };
        for _ in 0..px {
            data.push(rng.random_range(lo..hi));
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 4, 4], data).expect("valid shape"),
        Labels::Classes(labels),
    )
    .expect("aligned")
}

//! Dense n-dimensional `f64` tensor, the universal value type.
//!
//! Layout is contiguous row-major. Every exported operation keeps values
//! finite on finite inputs; the binary reader enforces the same when
//! loading from disk.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Magic bytes of the tensor serialization format.
pub const TENSOR_MAGIC: [u8; 4] = *b"CPT1";

/// Upper bound on deserialized element count; rejects corrupt headers
/// before allocation.
const MAX_ELEMENTS: u64 = 1 << 30;

/// Dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor; `data.len()` must equal the product of `shape` and
    /// every extent must be positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("positive extents")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("positive extents")
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar (`numel == 1`) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attach a gradient; must match the data shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the data under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of `[n, c, h, w]` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Serialize: magic, rank (u32 LE), extents (u64 LE each), data (f64 LE).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserialize from `r`; `path` and `base_offset` give format errors a
    /// useful location when the tensor is embedded in a container.
    pub fn read_from<R: Read>(r: &mut R, path: &Path, base_offset: u64) -> Result<Self> {
        let fmt = |offset: u64, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: base_offset + offset,
            message,
        };
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, path, base_offset)?;
        if magic != TENSOR_MAGIC {
            return Err(fmt(0, format!("bad tensor magic {magic:02x?}")));
        }
        let mut rank_buf = [0u8; 4];
        read_exact_at(r, &mut rank_buf, path, base_offset + 4)?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(fmt(4, format!("unreasonable tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for i in 0..rank {
            let mut ext = [0u8; 8];
            read_exact_at(r, &mut ext, path, base_offset + 8 + 8 * i as u64)?;
            let e = u64::from_le_bytes(ext);
            if e == 0 {
                return Err(fmt(8 + 8 * i as u64, "zero tensor extent".into()));
            }
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(fmt(8, format!("tensor too large ({numel} elements)")));
        }
        let data_start = 8 + 8 * rank as u64;
        let mut data = vec![0.0f64; numel as usize];
        for (i, v) in data.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            read_exact_at(r, &mut b, path, base_offset + data_start + 8 * i as u64)?;
            *v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(fmt(
                    data_start + 8 * i as u64,
                    format!("non-finite value {v} in tensor payload"),
                ));
            }
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        Tensor::read_from(&mut r, path, 0)
    }

    /// Serialized byte length including magic and header.
    pub fn serialized_len(&self) -> u64 {
        4 + 4 + 8 * self.rank() as u64 + 8 * self.numel() as u64
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        path: PathBuf::from(path),
        offset,
        message: "truncated tensor payload".into(),
    })
}

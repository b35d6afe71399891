//! Dense n-dimensional arrays, row-major, plus the binary tensor container.
//!
//! Everything numeric in the crate runs on [`TensorBase`]. Production code
//! uses the `f32` alias [`Tensor`]; gradient checks instantiate the same
//! kernels at `f64` through the [`Scalar`] trait.

use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element types the numeric kernels are generic over.
pub trait Scalar:
    Float + num_traits::NumAssign + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Elementwise binary operation tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Dense n-dimensional value grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// 32-bit tensor, the currency of all production math.
pub type Tensor = TensorBase<f32>;

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> TensorBase<T> {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    /// Construction boundary: validates length and rejects non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {len} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in tensor data".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values already known to be well-formed.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {index:?} out of shape {:?} at axis {i}", self.shape);
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-by-element combination of two same-shape tensors.
    pub fn elementwise(op: ElemOp, a: &Self, b: &Self) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| match op {
                ElemOp::Add => x + y,
                ElemOp::Sub => x - y,
                ElemOp::Mul => x * y,
            })
            .collect();
        Ok(Self {
            shape: a.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Convert elements to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TensorBase<U> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"TSR1";

impl Tensor {
    /// Serialize: magic "TSR1", u32 rank, rank x u32 extents, f32 LE payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &ext in &self.shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated tensor container".into()))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let ext = read_u32(r)? as usize;
            if ext == 0 {
                return Err(Error::Format("zero extent in tensor container".into()));
            }
            shape.push(ext);
        }
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated tensor payload".into()))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u16".into()))?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated f32".into()))?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills_shape() {
        let t = Tensor::new(&[2, 3], 0.0).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let t = Tensor::new(&[1], 2.5).unwrap();
        assert_eq!(t.data(), &[2.5]);

        let t = Tensor::new(&[2, 2, 3], 1.0).unwrap();
        assert_eq!(t.sum(), 12.0);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(Tensor::new(&[2, 0], 1.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(&[], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_rejected_at_boundary() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f32::NAN]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Tensor::from_vec(&[1], vec![f32::INFINITY]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(
            Tensor::elementwise(ElemOp::Add, &a, &b).unwrap().data(),
            &[4.0, 6.0]
        );
        let z = Tensor::elementwise(ElemOp::Sub, &a, &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let m = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        let n = Tensor::from_vec(&[2], vec![0.0, 5.0]).unwrap();
        assert_eq!(
            Tensor::elementwise(ElemOp::Mul, &m, &n).unwrap().data(),
            &[0.0, 15.0]
        );
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(&[2]).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(
            Tensor::elementwise(ElemOp::Add, &a, &b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn row_major_offset_exhaustive() {
        // index(i0..in) = sum(ik * stride_k), stride_{n-1} = 1
        let t = Tensor::zeros(&[3, 3, 3]).unwrap();
        let mut expected = 0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(t.offset(&[i, j, k]), expected);
                    expected += 1;
                }
            }
        }
    }

    #[test]
    fn container_roundtrip() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 4.5, -0.0, 9.75]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TSR1");
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn container_rejects_garbage() {
        let mut buf = Vec::new();
        Tensor::zeros(&[4]).unwrap().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            Tensor::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Tensor::read_from(&mut b"XXXX".as_slice()),
            Err(Error::Format(_))
        ));
    }
}

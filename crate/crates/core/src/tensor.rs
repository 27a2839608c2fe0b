//! Dense row-major tensors and the `MVQT` container format.

use std::fmt::Debug;
use std::io::{Read, Write};

use ndarray::LinalgScalar;

use crate::error::{Error, Result};

/// On-disk scalar type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(vec![format!("unknown dtype `{other}` (expected f32 or f64)")])),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    LinalgScalar + Debug + PartialOrd + Send + Sync + Default + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// A dense N-dimensional array with value semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!("shape {shape:?} has a zero axis")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "data length".into(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Shape as `[B, C, H, W]`, or a dimension error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Dimension {
                op,
                axis: "rank".into(),
                expected: 4,
                actual: self.shape.len(),
            }),
        }
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<F> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &v| if v < F::zero() { m.max(F::zero() - v) } else { m.max(v) })
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    /// Copy of samples `range` along the leading axis.
    pub fn slice_outer(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let outer = self.shape[0];
        if range.start >= range.end || range.end > outer {
            return Err(Error::contract(format!(
                "slice {range:?} out of bounds for leading axis {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Self {
            shape,
            data: self.data[range.start * inner..range.end * inner].to_vec(),
        })
    }

    /// Gathers the listed samples along the leading axis.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(Error::contract(format!(
                    "index {i} out of bounds for leading axis {outer}"
                )));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.ensure_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"MVQT";
const CONTAINER_VERSION: u8 = 1;

/// A tensor read from a container whose dtype is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when dtypes already agree).
    pub fn into_tensor<F: Element>(self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Serializes a tensor: magic, version, dtype code, ndim, u64 LE dims, LE payload.
pub fn encode_container<F: Element>(tensor: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * tensor.ndim() + tensor.len() * F::DTYPE.width());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(CONTAINER_VERSION);
    out.push(F::DTYPE.code());
    out.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_container<F: Element, W: Write>(mut w: W, tensor: &Tensor<F>) -> Result<()> {
    w.write_all(&encode_container(tensor))?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated tensor container ({what})"))
        } else {
            Error::Io(e)
        }
    })
}

fn decode_payload<F: Element>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<F>> {
    let w = F::DTYPE.width();
    let data = bytes.chunks_exact(w).map(F::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_container<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 7];
    read_exact_or(&mut r, &mut head, "header")?;
    if &head[..4] != CONTAINER_MAGIC {
        return Err(Error::format("bad tensor container magic"));
    }
    if head[4] != CONTAINER_VERSION {
        return Err(Error::format(format!(
            "unsupported tensor container version {}",
            head[4]
        )));
    }
    let dtype = DType::from_code(head[5])?;
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact_or(&mut r, &mut b, "shape")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor shape overflows"))?;
    let mut payload = vec![0u8; n * dtype.width()];
    read_exact_or(&mut r, &mut payload, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, &payload)?),
    })
}

pub fn save_tensor<F: Element>(path: impl AsRef<std::path::Path>, tensor: &Tensor<F>) -> Result<()> {
    std::fs::write(path, encode_container(tensor))?;
    Ok(())
}

pub fn load_tensor<F: Element>(path: impl AsRef<std::path::Path>) -> Result<Tensor<F>> {
    let bytes = std::fs::read(path)?;
    Ok(read_container(bytes.as_slice())?.into_tensor())
}

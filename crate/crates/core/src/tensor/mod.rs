//! Dense named tensors and the elementwise/reduction/selection kernels the
//! rest of the crate is built on.
//!
//! Tensors are immutable after construction; every kernel returns a fresh
//! tensor. Elementwise kernels compute in the operand's own element type so
//! results follow IEEE semantics of that type exactly; reductions always
//! accumulate in f64 because second moments span several orders of magnitude
//! and f32 accumulation loses the precision mask thresholds depend on.

mod spectral;
mod topk;

pub use spectral::{SpectralNorm, spectral_norm};
pub use topk::{TopKResult, global_topk_threshold, select_global_topk};

use crate::error::{Error, Result};

/// Element type of a tensor. Only the two float widths the container format
/// carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    /// Parse a container dtype tag.
    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Backing buffer, kept in the tensor's native width so narrow data is never
/// silently widened on disk round trips.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense numeric array with a name, shape, and element type; the carrier
/// for weights, task vectors, second moments, masks, and saliencies.
/// Row-major contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
    CountNonzero,
}

impl NamedTensor {
    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected = numel_of(&shape);
        if data.len() != expected {
            return Err(Error::DataLength {
                name,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            name,
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = numel_of(&shape);
        if data.len() != expected {
            return Err(Error::DataLength {
                name,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            name,
            shape,
            data: TensorData::F64(data),
        })
    }

    /// Build a tensor from f64 values, narrowing to the requested dtype.
    pub fn from_f64_as(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        dtype: DType,
    ) -> Result<Self> {
        match dtype {
            DType::F64 => Self::from_f64(name, shape, data),
            DType::F32 => Self::from_f32(name, shape, data.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel_of(&shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::NotTwoDim {
                name: self.name.clone(),
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// Widen the buffer to f64. Lossless for both dtypes.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.numel()).map(move |i| self.get_f64(i))
    }

    pub fn is_all_finite(&self) -> bool {
        self.iter_f64().all(|x| x.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.iter_f64().position(|x| !x.is_finite())
    }

    /// Little-endian byte image of the buffer, as laid out in containers.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        bytes: &[u8],
    ) -> Result<Self> {
        let name = name.into();
        let expected = numel_of(&shape) * dtype.size_bytes();
        if bytes.len() != expected {
            return Err(Error::DataLength {
                name,
                expected,
                got: bytes.len(),
            });
        }
        match dtype {
            DType::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Ok(Self {
                    name,
                    shape,
                    data: TensorData::F32(data),
                })
            }
            DType::F64 => {
                let data = bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect();
                Ok(Self {
                    name,
                    shape,
                    data: TensorData::F64(data),
                })
            }
        }
    }

    fn check_finite(self) -> Result<Self> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite {
                name: self.name,
                index,
            }),
            None => Ok(self),
        }
    }

    fn binary_with(
        &self,
        other: &NamedTensor,
        f32_op: impl Fn(f32, f32) -> f32,
        f64_op: impl Fn(f64, f64) -> f64,
    ) -> Result<NamedTensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                name: self.name.clone(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                TensorData::F32(a.iter().zip(b).map(|(&x, &y)| f32_op(x, y)).collect())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                TensorData::F64(a.iter().zip(b).map(|(&x, &y)| f64_op(x, y)).collect())
            }
            _ => {
                return Err(Error::DTypeMismatch {
                    name: self.name.clone(),
                });
            }
        };
        NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data,
        }
        .check_finite()
    }

    fn unary_with(
        &self,
        f32_op: impl Fn(f32) -> f32,
        f64_op: impl Fn(f64) -> f64,
    ) -> Result<NamedTensor> {
        let data = match &self.data {
            TensorData::F32(a) => TensorData::F32(a.iter().map(|&x| f32_op(x)).collect()),
            TensorData::F64(a) => TensorData::F64(a.iter().map(|&x| f64_op(x)).collect()),
        };
        NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data,
        }
        .check_finite()
    }

    pub fn add(&self, other: &NamedTensor) -> Result<NamedTensor> {
        self.binary_with(other, |a, b| a + b, |a, b| a + b)
    }

    pub fn sub(&self, other: &NamedTensor) -> Result<NamedTensor> {
        self.binary_with(other, |a, b| a - b, |a, b| a - b)
    }

    pub fn mul(&self, other: &NamedTensor) -> Result<NamedTensor> {
        self.binary_with(other, |a, b| a * b, |a, b| a * b)
    }

    /// Elementwise division; rejects any zero in the denominator, naming the
    /// tensor and the first offending index.
    pub fn div(&self, other: &NamedTensor) -> Result<NamedTensor> {
        if let Some(index) = other.iter_f64().position(|x| x == 0.0) {
            return Err(Error::Domain {
                name: other.name.clone(),
                index,
                reason: "zero divisor".into(),
            });
        }
        self.binary_with(other, |a, b| a / b, |a, b| a / b)
    }

    pub fn sqrt(&self) -> Result<NamedTensor> {
        if let Some(index) = self.iter_f64().position(|x| x < 0.0) {
            return Err(Error::Domain {
                name: self.name.clone(),
                index,
                reason: "negative sqrt operand".into(),
            });
        }
        self.unary_with(f32::sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Result<NamedTensor> {
        self.unary_with(|x| x * x, |x| x * x)
    }

    pub fn abs(&self) -> Result<NamedTensor> {
        self.unary_with(f32::abs, f64::abs)
    }

    pub fn log10(&self) -> Result<NamedTensor> {
        if let Some(index) = self.iter_f64().position(|x| x <= 0.0) {
            return Err(Error::Domain {
                name: self.name.clone(),
                index,
                reason: "non-positive log10 operand".into(),
            });
        }
        self.unary_with(f32::log10, f64::log10)
    }

    fn reduce_slice(op: ReduceOp, values: impl Iterator<Item = f64>) -> f64 {
        match op {
            ReduceOp::Sum => values.sum(),
            ReduceOp::Max => values.fold(f64::NEG_INFINITY, f64::max),
            ReduceOp::Min => values.fold(f64::INFINITY, f64::min),
            ReduceOp::CountNonzero => values.filter(|&x| x != 0.0).count() as f64,
        }
    }

    /// Reduce every element to one scalar; sums accumulate in f64 in flat
    /// index order regardless of the input dtype.
    pub fn reduce_all(&self, op: ReduceOp) -> Result<f64> {
        if self.numel() == 0 && matches!(op, ReduceOp::Max | ReduceOp::Min) {
            return Err(Error::Domain {
                name: self.name.clone(),
                index: 0,
                reason: "max/min of empty tensor".into(),
            });
        }
        Ok(Self::reduce_slice(op, self.iter_f64()))
    }

    /// Per-row reduction of a 2-D tensor (length = number of rows).
    pub fn reduce_rows(&self, op: ReduceOp) -> Result<Vec<f64>> {
        let (m, n) = self.dims2()?;
        if n == 0 && matches!(op, ReduceOp::Max | ReduceOp::Min) {
            return Err(Error::Domain {
                name: self.name.clone(),
                index: 0,
                reason: "max/min of empty rows".into(),
            });
        }
        Ok((0..m)
            .map(|i| Self::reduce_slice(op, (0..n).map(|j| self.get_f64(i * n + j))))
            .collect())
    }

    /// Per-column reduction of a 2-D tensor (length = number of columns).
    pub fn reduce_cols(&self, op: ReduceOp) -> Result<Vec<f64>> {
        let (m, n) = self.dims2()?;
        if m == 0 && matches!(op, ReduceOp::Max | ReduceOp::Min) {
            return Err(Error::Domain {
                name: self.name.clone(),
                index: 0,
                reason: "max/min of empty columns".into(),
            });
        }
        Ok((0..n)
            .map(|j| Self::reduce_slice(op, (0..m).map(|i| self.get_f64(i * n + j))))
            .collect())
    }

    /// Sum of all elements, accumulated in f64 in flat index order.
    pub fn sum_all(&self) -> f64 {
        self.iter_f64().sum()
    }

    pub fn max_all(&self) -> Result<f64> {
        self.iter_f64()
            .reduce(f64::max)
            .ok_or_else(|| Error::Domain {
                name: self.name.clone(),
                index: 0,
                reason: "max of empty tensor".into(),
            })
    }

    pub fn min_all(&self) -> Result<f64> {
        self.iter_f64()
            .reduce(f64::min)
            .ok_or_else(|| Error::Domain {
                name: self.name.clone(),
                index: 0,
                reason: "min of empty tensor".into(),
            })
    }

    pub fn count_nonzero(&self) -> usize {
        self.iter_f64().filter(|&x| x != 0.0).count()
    }

    /// Per-row sums of a 2-D tensor, f64 accumulation in fixed index order.
    pub fn row_sums(&self) -> Result<Vec<f64>> {
        self.reduce_rows(ReduceOp::Sum)
    }

    /// Per-column sums of a 2-D tensor.
    pub fn col_sums(&self) -> Result<Vec<f64>> {
        self.reduce_cols(ReduceOp::Sum)
    }

    /// Squared Frobenius norm, f64 accumulation.
    pub fn frobenius_sq(&self) -> f64 {
        self.iter_f64().map(|x| x * x).sum()
    }
}

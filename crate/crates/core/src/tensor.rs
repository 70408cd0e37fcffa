//! Dense tensors in (N, C, H, W) row-major layout.

use half::f16;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },
    #[error("{op}: expected dtype {expected}, found {found}")]
    DTypeMismatch {
        op: &'static str,
        expected: DType,
        found: DType,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("invalid quantization parameters: {0}")]
    InvalidQuant(String),
    #[error("int8 tensor is missing quantization parameters")]
    MissingQuant,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    /// Wire code used by the `.koam` format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine int8 quantization parameters: `v = scale * (q - zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    scale: f32,
    zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(TensorError::InvalidQuant(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(TensorError::InvalidQuant(format!(
                "zero_point {zero_point} outside [-128, 127]"
            )));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense tensor.
///
/// Invariants enforced at construction: every extent is at least 1, the
/// element count equals the product of the extents, and int8 data always
/// carries [`QuantParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
    quant: Option<QuantParams>,
}

pub(crate) fn fmt_dims(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "at least one dimension is required".into(),
        });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "extents must be >= 1".into(),
        });
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "element count overflows".into(),
        })?;
    if numel != len {
        return Err(TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: format!("product {numel} != stored element count {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData, quant: Option<QuantParams>) -> Result<Self> {
        check_dims(&dims, data.len())?;
        match (&data, quant) {
            (TensorData::I8(_), None) => return Err(TensorError::MissingQuant),
            (TensorData::F32(_) | TensorData::F16(_), Some(_)) => {
                return Err(TensorError::InvalidQuant(
                    "float tensors carry no quantization parameters".into(),
                ))
            }
            _ => {}
        }
        Ok(Self { dims, data, quant })
    }

    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(dims.to_vec(), TensorData::F32(data), None)
    }

    pub fn from_f16(dims: &[usize], data: Vec<f16>) -> Result<Self> {
        Self::new(dims.to_vec(), TensorData::F16(data), None)
    }

    pub fn from_i8(dims: &[usize], data: Vec<i8>, quant: QuantParams) -> Result<Self> {
        Self::new(dims.to_vec(), TensorData::I8(data), Some(quant))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = dims.iter().product();
        Self::from_f32(dims, vec![0.0; n])
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::from_f32(dims, vec![value; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Borrow float32 data; errors for any other dtype.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                op: "as_f32",
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                op: "as_f32_mut",
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    /// Converts any dtype to float32 (f16 widening, int8 dequantization).
    pub fn to_f32(&self) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => {
                // Invariant: int8 always has params.
                let q = self.quant.expect("int8 tensor without quant params");
                v.iter()
                    .map(|&x| q.scale * (x as i32 - q.zero_point) as f32)
                    .collect()
            }
        };
        Tensor {
            dims: self.dims.clone(),
            data: TensorData::F32(data),
            quant: None,
        }
    }

    /// Narrows a float32 tensor to float16 storage.
    pub fn to_f16(&self) -> Result<Tensor> {
        let v = self.as_f32()?;
        Tensor::from_f16(&self.dims, v.iter().map(|&x| f16::from_f32(x)).collect())
    }

    pub fn into_f32_vec(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                op: "into_f32_vec",
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims, self.numel())?;
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Byte length of the payload at the stored dtype.
    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().width()
    }

    /// Dims as NCHW, erroring unless the tensor is 4-D.
    pub(crate) fn nchw(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            d => Err(TensorError::ShapeMismatch {
                op,
                expected: "4-D [N,C,H,W]".into(),
                found: fmt_dims(d),
            }),
        }
    }
}

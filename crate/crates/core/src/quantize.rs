//! Symmetric per-tensor int8 quantization.

use std::fmt;
use std::str::FromStr;

use crate::model_io::{ModelArtifact, QUANT_POLICY_KEY};
use crate::tensor::{DType, QuantParams, Result, Tensor, TensorError};

/// Which float tensors [`quantize_model`] converts to int8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuantPolicy {
    /// Convolution and linear weights (`*.weight` with 2 or 4 dims).
    #[default]
    WeightsOnly,
    /// Every float tensor, including batch-norm statistics and biases.
    AllFloatTensors,
}

impl QuantPolicy {
    pub fn name(self) -> &'static str {
        match self {
            QuantPolicy::WeightsOnly => "weights-only",
            QuantPolicy::AllFloatTensors => "all-float-tensors",
        }
    }

    pub fn selects(self, name: &str, t: &Tensor) -> bool {
        if t.dtype() == DType::I8 {
            return false;
        }
        match self {
            QuantPolicy::WeightsOnly => is_weight_tensor(name, t),
            QuantPolicy::AllFloatTensors => true,
        }
    }
}

/// Conv kernels and linear weight matrices; batch-norm `weight` is 1-D.
pub fn is_weight_tensor(name: &str, t: &Tensor) -> bool {
    name.ends_with(".weight") && matches!(t.ndim(), 2 | 4)
}

impl fmt::Display for QuantPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "weights-only" => Ok(QuantPolicy::WeightsOnly),
            "all-float-tensors" => Ok(QuantPolicy::AllFloatTensors),
            other => Err(format!(
                "unknown policy '{other}' (expected weights-only or all-float-tensors)"
            )),
        }
    }
}

/// `scale = max|v| / 127` (1 for an all-zero tensor), `zero_point = 0`,
/// `q = clamp(round(v / scale), -127, 127)`.
pub fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let widened;
    let v = match t.dtype() {
        DType::F32 => t.as_f32()?,
        DType::F16 => {
            widened = t.to_f32();
            widened.as_f32()?
        }
        DType::I8 => {
            return Err(TensorError::DTypeMismatch {
                op: "quantize_tensor",
                expected: DType::F32,
                found: DType::I8,
            })
        }
    };
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "quantize_tensor",
            index,
        });
    }
    let max_abs = v.iter().fold(0f32, |m, x| m.max(x.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let q = v
        .iter()
        .map(|&x| (x / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Tensor::from_i8(t.dims(), q, QuantParams::new(scale, 0)?)
}

/// `v = scale * (q - zero_point)`.
pub fn dequantize_tensor(q: &Tensor) -> Result<Tensor> {
    if q.dtype() != DType::I8 {
        return Err(TensorError::DTypeMismatch {
            op: "dequantize_tensor",
            expected: DType::I8,
            found: q.dtype(),
        });
    }
    if q.quant().is_none() {
        return Err(TensorError::MissingQuant);
    }
    Ok(q.to_f32())
}

/// Replaces the tensors selected by `policy` with int8 copies and records
/// the policy in the metadata. Tensors already in int8 are left alone, so
/// re-running with the same policy is a no-op.
pub fn quantize_model(artifact: &ModelArtifact, policy: QuantPolicy) -> Result<ModelArtifact> {
    let mut out = artifact.clone();
    for (name, t) in artifact.tensors() {
        if policy.selects(name, t) {
            out.upsert(name, quantize_tensor(t)?);
        }
    }
    let recorded = match (artifact.meta(QUANT_POLICY_KEY), policy) {
        (Some("all-float-tensors"), _) => QuantPolicy::AllFloatTensors,
        (_, p) => p,
    };
    out.set_meta(QUANT_POLICY_KEY, recorded.name());
    Ok(out)
}

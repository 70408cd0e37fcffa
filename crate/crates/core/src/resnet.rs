//! ResNet-18 topology, weight binding and forward pass.
//!
//! Parameter names follow the common pretrained-checkpoint convention
//! (`conv1.weight`, `layer2.0.downsample.1.running_var`, `fc.bias`, ...),
//! so an exported checkpoint maps onto the graph without renaming.

use serde::Serialize;
use thiserror::Error;

use crate::grade::{KLGrade, NUM_GRADES};
use crate::kernels::{self, BN_EPSILON};
use crate::model_io::{ModelArtifact, ARCH_KEY};
use crate::par::{self, Exec};
use crate::tensor::{fmt_dims, Tensor, TensorError};

pub const ARCH: &str = "resnet18-kl5";
pub const FEATURE_DIM: usize = 512;
pub const INPUT_SIZE: usize = 224;
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has shape {found}, expected {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("artifact arch is {found:?}, expected \"{ARCH}\"")]
    ArchMismatch { found: Option<String> },
    #[error("input must be [1,3,224,224], got {0}")]
    InputShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Every parameter tensor of the 5-class ResNet-18, in canonical order.
pub fn parameter_manifest() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
        for p in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{p}"), vec![c]));
        }
    };
    out.push(("conv1.weight".into(), vec![64, 3, 7, 7]));
    bn(&mut out, "bn1", 64);
    let mut cin = 64;
    for (s, &width) in STAGE_WIDTHS.iter().enumerate() {
        for b in 0..BLOCKS_PER_STAGE {
            let p = format!("layer{}.{b}", s + 1);
            let block_in = if b == 0 { cin } else { width };
            out.push((format!("{p}.conv1.weight"), vec![width, block_in, 3, 3]));
            bn(&mut out, &format!("{p}.bn1"), width);
            out.push((format!("{p}.conv2.weight"), vec![width, width, 3, 3]));
            bn(&mut out, &format!("{p}.bn2"), width);
            if b == 0 && s > 0 {
                out.push((
                    format!("{p}.downsample.0.weight"),
                    vec![width, block_in, 1, 1],
                ));
                bn(&mut out, &format!("{p}.downsample.1"), width);
            }
        }
        cin = width;
    }
    out.push(("fc.weight".into(), vec![NUM_GRADES, FEATURE_DIM]));
    out.push(("fc.bias".into(), vec![NUM_GRADES]));
    out
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: Tensor,
    bn: BatchNorm,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn forward(&self, exec: Exec, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = kernels::conv2d_with(exec, x, &self.weight, None, self.stride, self.padding)?;
        let bn = &self.bn;
        kernels::batchnorm_infer(&y, &bn.gamma, &bn.beta, &bn.mean, &bn.var, BN_EPSILON)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, exec: Exec, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = self.conv1.forward(exec, x)?;
        kernels::relu_inplace(&mut h)?;
        let h = self.conv2.forward(exec, &h)?;
        let mut out = match &self.downsample {
            Some(ds) => kernels::add(&h, &ds.forward(exec, x)?)?,
            None => kernels::add(&h, x)?,
        };
        kernels::relu_inplace(&mut out)?;
        Ok(out)
    }
}

/// A validated, executable ResNet-18 with a 5-way head.
///
/// Immutable after construction; `predict` takes `&self` and may be called
/// from many threads at once.
#[derive(Clone, Debug)]
pub struct NetworkDef {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    fc_weight: Tensor,
    fc_bias: Tensor,
    exec: Exec,
}

struct Binder<'a> {
    artifact: &'a ModelArtifact,
    shapes: std::collections::HashMap<String, Vec<usize>>,
}

impl Binder<'_> {
    fn tensor(&self, name: &str) -> Result<Tensor, GraphError> {
        let t = self
            .artifact
            .get(name)
            .ok_or_else(|| GraphError::MissingTensor(name.to_string()))?;
        let expected = &self.shapes[name];
        if t.dims() != expected.as_slice() {
            return Err(GraphError::ShapeMismatch {
                name: name.to_string(),
                expected: fmt_dims(expected),
                found: fmt_dims(t.dims()),
            });
        }
        Ok(t.to_f32())
    }

    fn bn(&self, prefix: &str) -> Result<BatchNorm, GraphError> {
        Ok(BatchNorm {
            gamma: self.tensor(&format!("{prefix}.weight"))?,
            beta: self.tensor(&format!("{prefix}.bias"))?,
            mean: self.tensor(&format!("{prefix}.running_mean"))?,
            var: self.tensor(&format!("{prefix}.running_var"))?,
        })
    }

    fn conv_bn(
        &self,
        conv: &str,
        bn: &str,
        stride: usize,
        padding: usize,
    ) -> Result<ConvBn, GraphError> {
        Ok(ConvBn {
            weight: self.tensor(conv)?,
            bn: self.bn(bn)?,
            stride,
            padding,
        })
    }
}

/// Binds and validates every parameter of the topology. Quantized or f16
/// tensors are widened to f32 here, once.
pub fn build_resnet18(weights: &ModelArtifact) -> Result<NetworkDef, GraphError> {
    let binder = Binder {
        artifact: weights,
        shapes: parameter_manifest().into_iter().collect(),
    };
    // Report missing/mis-shaped tensors in manifest order before anything else.
    for (name, _) in parameter_manifest() {
        binder.tensor(&name)?;
    }
    match weights.meta(ARCH_KEY) {
        Some(ARCH) => {}
        other => {
            return Err(GraphError::ArchMismatch {
                found: other.map(str::to_string),
            })
        }
    }

    let stem = binder.conv_bn("conv1.weight", "bn1", 2, 3)?;
    let mut stages = Vec::with_capacity(STAGE_WIDTHS.len());
    for s in 0..STAGE_WIDTHS.len() {
        let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
        for b in 0..BLOCKS_PER_STAGE {
            let p = format!("layer{}.{b}", s + 1);
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            blocks.push(BasicBlock {
                conv1: binder.conv_bn(
                    &format!("{p}.conv1.weight"),
                    &format!("{p}.bn1"),
                    stride,
                    1,
                )?,
                conv2: binder.conv_bn(&format!("{p}.conv2.weight"), &format!("{p}.bn2"), 1, 1)?,
                downsample: if b == 0 && s > 0 {
                    Some(binder.conv_bn(
                        &format!("{p}.downsample.0.weight"),
                        &format!("{p}.downsample.1"),
                        2,
                        0,
                    )?)
                } else {
                    None
                },
            });
        }
        stages.push(blocks);
    }
    Ok(NetworkDef {
        stem,
        stages,
        fc_weight: binder.tensor("fc.weight")?,
        fc_bias: binder.tensor("fc.bias")?,
        exec: Exec::default(),
    })
}

/// Probability vector, argmax grade and its label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionResult {
    pub probabilities: Vec<f32>,
    pub logits: Vec<f32>,
    pub grade: KLGrade,
    pub label: &'static str,
}

impl PredictionResult {
    /// Builds the result from raw logits: stable softmax then argmax with
    /// ties resolved to the lowest grade.
    pub fn from_logits(logits: &[f32]) -> Result<Self, TensorError> {
        if logits.len() != NUM_GRADES {
            return Err(TensorError::ShapeMismatch {
                op: "predict",
                expected: format!("[{NUM_GRADES}] logits"),
                found: format!("[{}]", logits.len()),
            });
        }
        let probabilities = kernels::softmax(logits)?;
        let idx = kernels::argmax(&probabilities).expect("non-empty");
        let grade = KLGrade::from_index(idx).expect("index < 5");
        Ok(Self {
            probabilities,
            logits: logits.to_vec(),
            grade,
            label: grade.label(),
        })
    }
}

/// Activation extents recorded during a traced forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageTrace {
    pub name: &'static str,
    pub dims: Vec<usize>,
}

impl NetworkDef {
    /// Sets the execution policy for the convolution kernels.
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.fc_weight, &self.fc_bias)
    }

    fn check_input(image: &Tensor) -> Result<(), GraphError> {
        if image.dims() != [1, 3, INPUT_SIZE, INPUT_SIZE] {
            return Err(GraphError::InputShape(fmt_dims(image.dims())));
        }
        Ok(())
    }

    fn forward_features(
        &self,
        image: &Tensor,
        mut trace: Option<&mut Vec<StageTrace>>,
    ) -> Result<Tensor, GraphError> {
        Self::check_input(image)?;
        let image = image.to_f32();
        let mut record = |name: &'static str, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(StageTrace {
                    name,
                    dims: t.dims().to_vec(),
                });
            }
        };
        let mut x = self.stem.forward(self.exec, &image)?;
        kernels::relu_inplace(&mut x)?;
        record("stem", &x);
        let mut x = kernels::maxpool2d(&x, 3, 2, 1)?;
        record("maxpool", &x);
        const NAMES: [&str; 4] = ["layer1", "layer2", "layer3", "layer4"];
        for (blocks, name) in self.stages.iter().zip(NAMES) {
            for block in blocks {
                x = block.forward(self.exec, &x)?;
            }
            record(name, &x);
        }
        let f = kernels::global_avgpool(&x)?;
        record("avgpool", &f);
        Ok(f)
    }

    /// Frozen-backbone feature vector `[1, 512]` for a normalized image.
    pub fn extract_features(&self, image: &Tensor) -> Result<Tensor, GraphError> {
        self.forward_features(image, None)
    }

    /// Like [`extract_features`](Self::extract_features), also returning the
    /// extent after every stage.
    pub fn extract_features_traced(
        &self,
        image: &Tensor,
    ) -> Result<(Tensor, Vec<StageTrace>), GraphError> {
        let mut trace = Vec::new();
        let f = self.forward_features(image, Some(&mut trace))?;
        Ok((f, trace))
    }

    /// Applies the 5-way linear head to `[N, 512]` features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor, GraphError> {
        Ok(kernels::linear(features, &self.fc_weight, &self.fc_bias)?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<PredictionResult, GraphError> {
        let f = self.extract_features(image)?;
        let logits = self.logits(&f)?;
        Ok(PredictionResult::from_logits(logits.as_f32()?)?)
    }

    /// Predicts a list of images, fanning out across images under the
    /// network's execution policy. Output order matches input order.
    pub fn predict_many(&self, images: &[Tensor]) -> Vec<Result<PredictionResult, GraphError>> {
        let inner = self.clone_shallow_sequential();
        par::map_slice(self.exec, images, |img| inner.predict(img))
    }

    fn clone_shallow_sequential(&self) -> NetworkDef {
        // Parallelism moves to the image level; kernels run sequentially.
        self.clone().with_exec(Exec::Sequential)
    }
}

/// Convenience: validate and build in one step from a `.koam` path.
pub fn load_network(path: &std::path::Path) -> Result<NetworkDef, crate::Error> {
    let art = crate::model_io::load_from_path(path)?;
    Ok(build_resnet18(&art)?)
}

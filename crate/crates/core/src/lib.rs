//! Offline knee-osteoarthritis severity screening.
//!
//! A self-contained ResNet-18 runtime over a portable `.koam` model format
//! with per-tensor int8 compaction, the radiograph preprocessing pipeline,
//! a trainer for the 5-way KL-grade classification head on frozen backbone
//! features, evaluation metrics, and an interpretive-report client with an
//! offline fallback.

pub mod dataset;
pub mod fixtures;
pub mod grade;
pub mod insight;
pub mod kernels;
pub mod metrics;
pub mod model_io;
pub mod par;
pub mod preprocess;
pub mod quantize;
pub mod report;
pub mod resnet;
pub mod tensor;
pub mod trainer;

pub use grade::KLGrade;
pub use model_io::ModelArtifact;
pub use par::Exec;
pub use resnet::{NetworkDef, PredictionResult};
pub use tensor::{DType, QuantParams, Tensor};

/// Umbrella error for callers that cross module boundaries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Format(#[from] model_io::FormatError),
    #[error(transparent)]
    Graph(#[from] resnet::GraphError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Insight(#[from] insight::InsightError),
}

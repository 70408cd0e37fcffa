//! Printable prediction output.
//!
//! The prediction part never depends on whether insights were requested, so
//! the insight block is always a pure suffix (text) or a separate field
//! (JSON).

use serde::Serialize;

use crate::insight::InsightReport;
use crate::resnet::PredictionResult;

pub const SCHEMA_VERSION: u32 = 1;

/// Outcome of an insight request attached to a prediction.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum InsightBlock {
    Ok { report: InsightReport },
    Failed { error: String },
}

#[derive(Serialize)]
struct JsonOut<'a> {
    schema: u32,
    image: &'a str,
    grade: u8,
    label: &'a str,
    probabilities: &'a [f32],
    logits: &'a [f32],
    #[serde(skip_serializing_if = "Option::is_none")]
    insights: Option<&'a InsightBlock>,
}

pub fn prediction_text(image: &str, pred: &PredictionResult) -> String {
    let mut out = format!("image: {image}\nprediction: {}\n", pred.label);
    out.push_str("probabilities:\n");
    for (i, p) in pred.probabilities.iter().enumerate() {
        out.push_str(&format!("  grade {i}: {p:.6}\n"));
    }
    out
}

pub fn insight_text(block: &InsightBlock) -> String {
    match block {
        InsightBlock::Ok { report } => {
            let source = match report.source {
                crate::insight::InsightSource::Remote => "remote",
                crate::insight::InsightSource::Fallback => "fallback",
            };
            format!("\ninsights (source: {source}):\n{}", report.render())
        }
        InsightBlock::Failed { error } => format!("\ninsights unavailable: {error}\n"),
    }
}

pub fn render_text(image: &str, pred: &PredictionResult, insight: Option<&InsightBlock>) -> String {
    let mut out = prediction_text(image, pred);
    if let Some(b) = insight {
        out.push_str(&insight_text(b));
    }
    out
}

/// One-line JSON document with `"schema": 1`.
pub fn render_json(image: &str, pred: &PredictionResult, insight: Option<&InsightBlock>) -> String {
    let doc = JsonOut {
        schema: SCHEMA_VERSION,
        image,
        grade: pred.grade.value(),
        label: pred.label,
        probabilities: &pred.probabilities,
        logits: &pred.logits,
        insights: insight,
    };
    serde_json::to_string(&doc).expect("plain data serializes")
}

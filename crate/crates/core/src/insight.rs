//! Interpretive reports for a predicted grade.
//!
//! The predicted grade is substituted into a hidden prompt and POSTed as
//! `{"prompt": ...}` to a generative-text endpoint. The reply must use a
//! fixed five-section markup:
//!
//! ```text
//! ## OVERVIEW
//! free text
//! ## SYMPTOMS
//! - item
//! ## RISK_FACTORS
//! - item
//! ## PREVENTIVE_MEASURES
//! - item
//! ## AVOID
//! - item
//! ```
//!
//! This module depends only on [`KLGrade`]; nothing here can feed back into
//! classification.

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::grade::KLGrade;

pub const ENDPOINT_ENV: &str = "INSIGHT_ENDPOINT";
pub const API_KEY_ENV: &str = "INSIGHT_API_KEY";
pub const PLACEHOLDER: &str = "{GRADE_LABEL}";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(20);
pub const DISCLAIMER: &str = "Informational, not medical advice.";

/// Required sections as `(key, markup heading)`.
pub const SECTIONS: [(&str, &str); 5] = [
    ("overview", "OVERVIEW"),
    ("symptoms", "SYMPTOMS"),
    ("risk_factors", "RISK_FACTORS"),
    ("preventive_measures", "PREVENTIVE_MEASURES"),
    ("avoid", "AVOID"),
];

#[derive(Debug, Error)]
pub enum InsightError {
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("insight endpoint or API key not configured ({ENDPOINT_ENV}, {API_KEY_ENV})")]
    MissingCredentials,
    #[error("network error: {0}")]
    NetworkError(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {0}")]
    HttpStatus(u16),
    #[error("response is missing section '{0}'")]
    MissingSection(String),
    #[error("response section '{0}' is empty")]
    EmptySection(String),
}

const DEFAULT_TEMPLATE: &str = "\
You are assisting a knee osteoarthritis screening tool. An offline image \
classifier graded a knee radiograph as \"{GRADE_LABEL}\" on the \
Kellgren-Lawrence scale. Write patient-friendly, non-diagnostic guidance for \
this grade.

Answer using exactly these five sections, in this order, each introduced by \
its heading line, with no other headings:
## OVERVIEW
One short paragraph explaining what this grade means.
## SYMPTOMS
Bullet lines starting with \"- \" listing likely symptoms.
## RISK_FACTORS
Bullet lines starting with \"- \" listing major risk factors for progression.
## PREVENTIVE_MEASURES
Bullet lines starting with \"- \" listing preventive and corrective actions.
## AVOID
Bullet lines starting with \"- \" listing habits and activities to avoid.
";

/// Hidden prompt with exactly one `{GRADE_LABEL}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, InsightError> {
        let text = text.into();
        let tpl = Self { text };
        tpl.validate()?;
        Ok(tpl)
    }

    fn validate(&self) -> Result<(), InsightError> {
        match self.text.matches(PLACEHOLDER).count() {
            1 => {}
            n => {
                return Err(InsightError::MalformedTemplate(format!(
                    "expected exactly one {PLACEHOLDER}, found {n}"
                )))
            }
        }
        for (_, heading) in SECTIONS {
            if !self.text.contains(&format!("## {heading}")) {
                return Err(InsightError::MalformedTemplate(format!(
                    "template does not request section '## {heading}'"
                )));
            }
        }
        Ok(())
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub fn build_prompt(grade: KLGrade, tpl: &PromptTemplate) -> Result<String, InsightError> {
    tpl.validate()?;
    Ok(tpl.text.replacen(PLACEHOLDER, grade.label(), 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InsightSource {
    Remote,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InsightReport {
    pub grade: KLGrade,
    pub overview: String,
    pub symptoms: Vec<String>,
    pub risk_factors: Vec<String>,
    pub preventive_measures: Vec<String>,
    pub avoid: Vec<String>,
    pub source: InsightSource,
}

impl InsightReport {
    /// Serializes into the canonical section markup.
    pub fn render(&self) -> String {
        let mut out = format!("## OVERVIEW\n{}\n", self.overview);
        for (heading, items) in [
            ("SYMPTOMS", &self.symptoms),
            ("RISK_FACTORS", &self.risk_factors),
            ("PREVENTIVE_MEASURES", &self.preventive_measures),
            ("AVOID", &self.avoid),
        ] {
            out.push_str(&format!("## {heading}\n"));
            for item in items {
                out.push_str(&format!("- {item}\n"));
            }
        }
        out
    }
}

fn section_key(heading: &str) -> String {
    heading
        .trim()
        .trim_end_matches(':')
        .to_ascii_uppercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Parses the section markup. Headings are matched case-insensitively;
/// unknown sections and text before the first heading are ignored.
pub fn parse_insights(raw: &str, grade: KLGrade) -> Result<InsightReport, InsightError> {
    let mut found: [Option<Vec<String>>; 5] = Default::default();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(h) = trimmed.strip_prefix("## ") {
            let key = section_key(h);
            current = SECTIONS.iter().position(|(_, name)| *name == key);
            if let Some(i) = current {
                found[i].get_or_insert_with(Vec::new);
            }
            continue;
        }
        let Some(i) = current else { continue };
        let bucket = found[i].as_mut().expect("initialised on heading");
        if i == 0 {
            if !trimmed.is_empty() {
                bucket.push(trimmed.to_string());
            }
        } else if let Some(item) = trimmed.strip_prefix("- ") {
            let item = item.trim();
            if !item.is_empty() {
                bucket.push(item.to_string());
            }
        }
    }
    let mut take = |i: usize| -> Result<Vec<String>, InsightError> {
        let key = SECTIONS[i].0;
        let items = found[i]
            .take()
            .ok_or_else(|| InsightError::MissingSection(key.to_string()))?;
        if items.is_empty() {
            return Err(InsightError::EmptySection(key.to_string()));
        }
        Ok(items)
    };
    Ok(InsightReport {
        grade,
        overview: take(0)?.join(" "),
        symptoms: take(1)?,
        risk_factors: take(2)?,
        preventive_measures: take(3)?,
        avoid: take(4)?,
        source: InsightSource::Remote,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            api_key: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl EndpointConfig {
    pub fn from_env() -> Self {
        let non_empty = |k| {
            std::env::var(k)
                .ok()
                .filter(|v: &String| !v.trim().is_empty())
        };
        Self {
            url: non_empty(ENDPOINT_ENV),
            api_key: non_empty(API_KEY_ENV),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

enum Attempt {
    Done(String),
    Transient(InsightError),
    Fatal(InsightError),
}

fn attempt(agent: &ureq::Agent, url: &str, key: &str, body: &str) -> Attempt {
    let payload = serde_json::json!({ "prompt": body });
    let resp = agent
        .post(url)
        .header("Authorization", format!("Bearer {key}"))
        .send_json(&payload);
    let mut resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Attempt::Transient(InsightError::Timeout),
        Err(
            e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound),
        ) => return Attempt::Transient(InsightError::NetworkError(e.to_string())),
        Err(e) => return Attempt::Fatal(InsightError::NetworkError(e.to_string())),
    };
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let err = InsightError::HttpStatus(status);
        return if status >= 500 || status == 429 {
            Attempt::Transient(err)
        } else {
            Attempt::Fatal(err)
        };
    }
    match resp.body_mut().read_to_string() {
        Ok(text) => Attempt::Done(text),
        Err(ureq::Error::Timeout(_)) => Attempt::Transient(InsightError::Timeout),
        Err(e) => Attempt::Transient(InsightError::NetworkError(e.to_string())),
    }
}

/// One synchronous POST, retried once on a transient failure (connection
/// error, timeout, HTTP 5xx or 429). The body is returned verbatim.
pub fn request_insights(body: &str, cfg: &EndpointConfig) -> Result<String, InsightError> {
    let (Some(url), Some(key)) = (cfg.url.as_deref(), cfg.api_key.as_deref()) else {
        return Err(InsightError::MissingCredentials);
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut last = None;
    for n in 0..2 {
        match attempt(&agent, url, key, body) {
            Attempt::Done(text) => return Ok(text),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(e) => {
                log::warn!("insight request attempt {} failed: {e}", n + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("two failed attempts"))
}

struct Entry {
    overview: &'static str,
    symptoms: &'static [&'static str],
    risk_factors: &'static [&'static str],
    preventive_measures: &'static [&'static str],
    avoid: &'static [&'static str],
}

const COMMON_RISKS: &[&str] = &[
    "Older age",
    "Excess body weight",
    "Previous knee injury or surgery",
    "Family history of osteoarthritis",
];

const KNOWLEDGE: [Entry; 5] = [
    Entry {
        overview: "Grade 0 indicates a normal-appearing knee joint with no radiographic features of osteoarthritis.",
        symptoms: &["Usually none attributable to osteoarthritis"],
        risk_factors: COMMON_RISKS,
        preventive_measures: &[
            "Stay physically active with low-impact exercise",
            "Maintain a healthy body weight",
            "Strengthen the thigh muscles that support the knee",
        ],
        avoid: &["Prolonged inactivity", "Repetitive high-impact loading without conditioning"],
    },
    Entry {
        overview: "Grade 1 indicates doubtful joint-space narrowing with possible small osteophytes; changes are minimal.",
        symptoms: &["Occasional mild stiffness", "Discomfort after unusual exertion"],
        risk_factors: COMMON_RISKS,
        preventive_measures: &[
            "Regular low-impact exercise such as walking, cycling or swimming",
            "Quadriceps and hip strengthening",
            "Weight management",
        ],
        avoid: &["Sudden increases in high-impact activity", "Ignoring persistent knee pain"],
    },
    Entry {
        overview: "Grade 2 indicates mild osteoarthritis: definite osteophytes with possible joint-space narrowing.",
        symptoms: &[
            "Knee pain after activity",
            "Stiffness after rest or in the morning",
            "Mild swelling at times",
        ],
        risk_factors: COMMON_RISKS,
        preventive_measures: &[
            "Structured strengthening and flexibility exercise",
            "Weight reduction if overweight",
            "Supportive footwear",
            "Discuss symptom management with a clinician",
        ],
        avoid: &["Deep squatting and kneeling for long periods", "Running on hard surfaces"],
    },
    Entry {
        overview: "Grade 3 indicates moderate osteoarthritis: multiple osteophytes, definite joint-space narrowing and some sclerosis.",
        symptoms: &[
            "Frequent pain during walking or stairs",
            "Reduced range of motion",
            "Crepitus (grinding sensation)",
            "Swelling after activity",
        ],
        risk_factors: COMMON_RISKS,
        preventive_measures: &[
            "Supervised physiotherapy",
            "Low-impact aerobic activity",
            "Walking aids when needed",
            "Clinical review of treatment options",
        ],
        avoid: &[
            "High-impact sports and jumping",
            "Carrying heavy loads",
            "Prolonged standing without breaks",
        ],
    },
    Entry {
        overview: "Grade 4 indicates severe osteoarthritis: large osteophytes, marked joint-space narrowing, severe sclerosis and possible bone deformity.",
        symptoms: &[
            "Persistent pain, including at rest",
            "Marked stiffness and limited mobility",
            "Visible deformity or instability",
        ],
        risk_factors: COMMON_RISKS,
        preventive_measures: &[
            "Specialist orthopaedic assessment",
            "Pain management plan agreed with a clinician",
            "Assistive devices to offload the joint",
            "Gentle range-of-motion exercise as advised",
        ],
        avoid: &[
            "High-impact and twisting activities",
            "Stairs and steep slopes where possible",
            "Delaying medical consultation",
        ],
    },
];

/// Built-in static report for offline use.
pub fn fallback_report(grade: KLGrade) -> InsightReport {
    let e = &KNOWLEDGE[grade.index()];
    let list = |items: &[&str]| items.iter().map(|s| s.to_string()).collect();
    InsightReport {
        grade,
        overview: format!("{} {DISCLAIMER}", e.overview),
        symptoms: list(e.symptoms),
        risk_factors: list(e.risk_factors),
        preventive_measures: list(e.preventive_measures),
        avoid: list(e.avoid),
        source: InsightSource::Fallback,
    }
}

/// Offline-aware front end: when `offline` is set no request is attempted.
#[derive(Clone, Debug)]
pub struct InsightClient {
    pub endpoint: EndpointConfig,
    pub template: PromptTemplate,
    pub offline: bool,
}

impl InsightClient {
    pub fn new(endpoint: EndpointConfig, offline: bool) -> Self {
        Self {
            endpoint,
            template: PromptTemplate::default(),
            offline,
        }
    }

    pub fn report(&self, grade: KLGrade) -> Result<InsightReport, InsightError> {
        if self.offline {
            return Ok(fallback_report(grade));
        }
        let body = build_prompt(grade, &self.template)?;
        let raw = request_insights(&body, &self.endpoint)?;
        parse_insights(&raw, grade)
    }
}

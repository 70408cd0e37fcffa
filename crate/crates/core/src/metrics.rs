//! Confusion matrices, per-grade precision/recall/F1 and the adjacent-grade
//! error share.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grade::KLGrade;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {label} outside the {classes}-class set")]
    OutOfRange { label: usize, classes: usize },
    #[error("no samples with a true grade in the requested subset")]
    EmptySubset,
    #[error("class list must be non-empty and free of duplicates")]
    BadClasses,
}

/// Rows are true grades, columns predicted grades. A subset matrix may carry
/// a trailing "other" column for predictions outside its class list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<KLGrade>,
    counts: Vec<Vec<u64>>,
    other: Option<Vec<u64>>,
}

impl ConfusionMatrix {
    fn empty(classes: Vec<KLGrade>, with_other: bool) -> Result<Self, MetricsError> {
        let mut sorted = classes.clone();
        sorted.sort();
        sorted.dedup();
        if classes.is_empty() || sorted.len() != classes.len() {
            return Err(MetricsError::BadClasses);
        }
        let k = classes.len();
        Ok(Self {
            counts: vec![vec![0; k]; k],
            other: with_other.then(|| vec![0; k]),
            classes,
        })
    }

    /// Builds a `k x k` matrix from raw class indices.
    pub fn from_indices(k: usize, pairs: &[(usize, usize)]) -> Result<Self, MetricsError> {
        let classes = (0..k)
            .map(|i| {
                KLGrade::from_index(i).map_err(|_| MetricsError::OutOfRange {
                    label: i,
                    classes: k,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut m = Self::empty(classes, false)?;
        for &(t, p) in pairs {
            for label in [t, p] {
                if label >= k {
                    return Err(MetricsError::OutOfRange { label, classes: k });
                }
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    /// Builds a matrix directly from counts (rows = truth).
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::BadClasses);
        }
        let mut m = Self::from_indices(k, &[])?;
        m.counts = counts;
        Ok(m)
    }

    pub fn classes(&self) -> &[KLGrade] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn other_column(&self) -> Option<&[u64]> {
        self.other.as_deref()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        (0..self.k()).map(|r| self.row_sum(r)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Row total including any "other" predictions: the class support.
    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum::<u64>() + self.other.as_ref().map_or(0, |o| o[r])
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for g in &self.classes {
            let _ = write!(out, ",{g}");
        }
        if self.other.is_some() {
            out.push_str(",other");
        }
        out.push('\n');
        for (r, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{}", self.classes[r]);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            if let Some(o) = &self.other {
                let _ = write!(out, ",{}", o[r]);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = vec!["true\\pred".into()];
        header.extend(self.classes.iter().map(|g| g.to_string()));
        if self.other.is_some() {
            header.push("other".into());
        }
        let mut rows = vec![header];
        for (r, row) in self.counts.iter().enumerate() {
            let mut line = vec![self.classes[r].to_string()];
            line.extend(row.iter().map(u64::to_string));
            if let Some(o) = &self.other {
                line.push(o[r].to_string());
            }
            rows.push(line);
        }
        align(&rows)
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:>w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Full 5-grade confusion matrix.
pub fn confusion_matrix(pairs: &[(KLGrade, KLGrade)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::empty(KLGrade::ALL.to_vec(), false).expect("five distinct grades");
    for &(t, p) in pairs {
        m.counts[t.index()][p.index()] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub grade: KLGrade,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Nothing was predicted as this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No true samples of this class; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: u64,
}

impl ClassReport {
    pub fn macro_f1(&self) -> f64 {
        self.classes.iter().map(|c| c.f1).sum::<f64>() / self.classes.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "grade,precision,recall,f1,support,precision_undefined,recall_undefined\n",
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{},{}",
                c.grade,
                c.precision,
                c.recall,
                c.f1,
                c.support,
                c.precision_undefined,
                c.recall_undefined
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![vec![
            "grade".to_string(),
            "precision".into(),
            "recall".into(),
            "f1".into(),
            "support".into(),
        ]];
        for c in &self.classes {
            let flag = |v: f64, undef: bool| {
                if undef {
                    format!("{v:.4}*")
                } else {
                    format!("{v:.4}")
                }
            };
            rows.push(vec![
                c.grade.label().to_string(),
                flag(c.precision, c.precision_undefined),
                flag(c.recall, c.recall_undefined),
                format!("{:.4}", c.f1),
                c.support.to_string(),
            ]);
        }
        let mut out = align(&rows);
        let _ = writeln!(
            out,
            "accuracy {:.4} over {} samples",
            self.accuracy, self.total
        );
        if self
            .classes
            .iter()
            .any(|c| c.precision_undefined || c.recall_undefined)
        {
            out.push_str("* undefined (zero denominator), reported as 0\n");
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision_recall_f1(m: &ConfusionMatrix) -> ClassReport {
    let classes = (0..m.k())
        .map(|c| {
            let tp = m.counts[c][c];
            let (precision, precision_undefined) = ratio(tp, m.col_sum(c));
            let (recall, recall_undefined) = ratio(tp, m.row_sum(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                grade: m.classes[c],
                precision,
                recall,
                f1,
                support: m.row_sum(c),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    ClassReport {
        classes,
        accuracy: m.accuracy(),
        total: m.total(),
    }
}

/// Share of in-grid misclassifications that land on a neighbouring grade.
/// Predictions in a subset's "other" column are not counted. Zero when
/// there are no errors.
pub fn adjacent_confusion_share(m: &ConfusionMatrix) -> f64 {
    let mut adjacent = 0u64;
    let mut errors = 0u64;
    for (r, row) in m.counts.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if r == c {
                continue;
            }
            errors += v;
            if m.classes[r].value().abs_diff(m.classes[c].value()) == 1 {
                adjacent += v;
            }
        }
    }
    if errors == 0 {
        0.0
    } else {
        adjacent as f64 / errors as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    pub matrix: ConfusionMatrix,
    pub report: ClassReport,
}

/// Restricts evaluation to samples whose true grade is in `subset`.
/// Predictions outside the subset are tallied in an "other" column.
pub fn subset_report(
    pairs: &[(KLGrade, KLGrade)],
    subset: &[KLGrade],
) -> Result<SubsetReport, MetricsError> {
    let mut classes = subset.to_vec();
    classes.sort();
    let full = classes.len() == KLGrade::ALL.len();
    let mut m = ConfusionMatrix::empty(classes, !full)?;
    let pos = |g: KLGrade| m.classes.iter().position(|&c| c == g);
    let mut cells = Vec::new();
    for &(t, p) in pairs {
        if let Some(r) = pos(t) {
            cells.push((r, pos(p)));
        }
    }
    if cells.is_empty() {
        return Err(MetricsError::EmptySubset);
    }
    for (r, c) in cells {
        match c {
            Some(c) => m.counts[r][c] += 1,
            None => m.other.as_mut().expect("partial subsets track other")[r] += 1,
        }
    }
    let report = precision_recall_f1(&m);
    Ok(SubsetReport { matrix: m, report })
}

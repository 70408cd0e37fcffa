//! Kellgren-Lawrence severity grades.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_GRADES: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("KL grade must be in 0..=4, got {0}")]
pub struct InvalidGrade(pub i64);

/// Ordinal KL severity grade, 0 (normal) through 4 (severe).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct KLGrade(u8);

const LABELS: [&str; NUM_GRADES] = [
    "Grade 0: normal",
    "Grade 1: doubtful",
    "Grade 2: mild",
    "Grade 3: moderate",
    "Grade 4: severe osteoarthritis",
];

impl KLGrade {
    pub const ALL: [KLGrade; NUM_GRADES] =
        [KLGrade(0), KLGrade(1), KLGrade(2), KLGrade(3), KLGrade(4)];

    pub fn new(value: u8) -> Result<Self, InvalidGrade> {
        if (value as usize) < NUM_GRADES {
            Ok(KLGrade(value))
        } else {
            Err(InvalidGrade(value as i64))
        }
    }

    pub fn from_index(index: usize) -> Result<Self, InvalidGrade> {
        if index < NUM_GRADES {
            Ok(KLGrade(index as u8))
        } else {
            Err(InvalidGrade(index as i64))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Canonical display label, e.g. `"Grade 4: severe osteoarthritis"`.
    pub fn label(self) -> &'static str {
        LABELS[self.index()]
    }
}

impl TryFrom<u8> for KLGrade {
    type Error = InvalidGrade;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        KLGrade::new(v)
    }
}

impl From<KLGrade> for u8 {
    fn from(g: KLGrade) -> u8 {
        g.0
    }
}

impl FromStr for KLGrade {
    type Err = InvalidGrade;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: i64 = s.trim().parse().map_err(|_| InvalidGrade(-1))?;
        if (0..NUM_GRADES as i64).contains(&v) {
            Ok(KLGrade(v as u8))
        } else {
            Err(InvalidGrade(v))
        }
    }
}

impl fmt::Display for KLGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

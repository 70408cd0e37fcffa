//! Dataset ingestion (`root/{train,test}/{0..4}/*`), class statistics,
//! pixel histograms and seeded batching.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grade::{KLGrade, NUM_GRADES};
use crate::preprocess::ImageBuffer;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("missing split directory {0}")]
    MissingSplit(PathBuf),
    #[error("grade directory {0} is not a KL grade 0-4")]
    BadGradeDir(PathBuf),
    #[error("io error under {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset index is empty")]
    Empty,
    #[error("no images supplied")]
    NoImages,
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub grade: KLGrade,
}

/// Image paths and labels for one split. Paths are sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    split: Split,
    entries: Vec<DatasetEntry>,
    counts: [usize; NUM_GRADES],
}

impl DatasetIndex {
    pub fn from_entries(split: Split, mut entries: Vec<DatasetEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut counts = [0; NUM_GRADES];
        for e in &entries {
            counts[e.grade.index()] += 1;
        }
        Self {
            split,
            entries,
            counts,
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn counts(&self) -> [usize; NUM_GRADES] {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
}

impl DatasetSplits {
    pub fn total(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Train and test entries pooled together, train first.
    pub fn pooled(&self) -> Vec<DatasetEntry> {
        self.train
            .entries()
            .iter()
            .chain(self.test.entries())
            .cloned()
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn ingest_split(root: &Path, split: Split) -> Result<DatasetIndex, DatasetError> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(DatasetError::MissingSplit(dir));
    }
    let mut entries = Vec::new();
    for grade_dir in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
        let grade_dir = grade_dir.map_err(io_err(&dir))?.path();
        if !grade_dir.is_dir() {
            continue;
        }
        let grade = grade_dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<KLGrade>().ok())
            .ok_or_else(|| DatasetError::BadGradeDir(grade_dir.clone()))?;
        for f in std::fs::read_dir(&grade_dir).map_err(io_err(&grade_dir))? {
            let path = f.map_err(io_err(&grade_dir))?.path();
            if path.is_file() && is_image(&path) {
                entries.push(DatasetEntry { path, grade });
            }
        }
    }
    Ok(DatasetIndex::from_entries(split, entries))
}

/// Indexes both splits. Only directory listings are read, never pixels.
pub fn ingest_dataset(root: &Path) -> Result<DatasetSplits, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    Ok(DatasetSplits {
        train: ingest_split(root, Split::Train)?,
        test: ingest_split(root, Split::Test)?,
    })
}

/// Max/min class-count ratio; `Degenerate` when some grade has no samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Imbalance {
    Ratio(f64),
    Degenerate,
}

impl fmt::Display for Imbalance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Imbalance::Ratio(r) => write!(f, "{r:.4}"),
            Imbalance::Degenerate => f.write_str("degenerate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub counts: [usize; NUM_GRADES],
    pub imbalance: Imbalance,
}

pub fn class_distribution(index: &DatasetIndex) -> Result<ClassDistribution, DatasetError> {
    counts_distribution(index.counts())
}

pub fn counts_distribution(counts: [usize; NUM_GRADES]) -> Result<ClassDistribution, DatasetError> {
    if counts.iter().all(|&c| c == 0) {
        return Err(DatasetError::Empty);
    }
    let max = *counts.iter().max().unwrap();
    let min = *counts.iter().min().unwrap();
    let imbalance = if min == 0 {
        Imbalance::Degenerate
    } else {
        Imbalance::Ratio(max as f64 / min as f64)
    };
    Ok(ClassDistribution { counts, imbalance })
}

/// 256-bin intensity histogram; RGB pixels are reduced to the rounded
/// channel mean.
pub fn pixel_histogram(images: &[ImageBuffer]) -> Result<[u64; 256], DatasetError> {
    if images.is_empty() {
        return Err(DatasetError::NoImages);
    }
    let mut bins = [0u64; 256];
    for img in images {
        accumulate_histogram(&mut bins, img);
    }
    Ok(bins)
}

pub fn accumulate_histogram(bins: &mut [u64; 256], img: &ImageBuffer) {
    match img.channels() {
        1 => img.data().iter().for_each(|&v| bins[v as usize] += 1),
        _ => img.data().chunks(3).for_each(|px| {
            let sum = px[0] as u32 + px[1] as u32 + px[2] as u32;
            bins[((sum + 1) / 3) as usize] += 1;
        }),
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub path: PathBuf,
    pub grade: KLGrade,
    /// Horizontal-flip augmentation; only ever set for training batches.
    pub flip: bool,
}

/// Shuffles the index under `seed` and chunks it; the last batch may be
/// short. Training batches draw a flip with probability 0.5 per item.
pub fn make_batches(
    index: &DatasetIndex,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<BatchItem>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.shuffle(&mut rng);
    let augment = index.split() == Split::Train;
    let items: Vec<BatchItem> = order
        .into_iter()
        .map(|i| {
            let e = &index.entries()[i];
            BatchItem {
                path: e.path.clone(),
                grade: e.grade,
                flip: augment && rng.gen_bool(0.5),
            }
        })
        .collect();
    Ok(items
        .chunks(batch_size)
        .map(<[BatchItem]>::to_vec)
        .collect())
}

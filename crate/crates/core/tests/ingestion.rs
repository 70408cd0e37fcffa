use koa_core::dataset::{
    class_distribution, ingest_dataset, make_batches, pixel_histogram, DatasetError, Imbalance,
    Split,
};
use koa_core::fixtures::write_synthetic_dataset;
use koa_core::preprocess::{load_image, ImageBuffer};

#[test]
fn synthetic_tree_counts_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let train = [7, 3, 5, 2, 1];
    let test = [2, 1, 0, 3, 1];
    write_synthetic_dataset(dir.path(), train, test, 11, 32).unwrap();
    // Non-image clutter is ignored.
    std::fs::write(dir.path().join("train/0/notes.txt"), "x").unwrap();
    let splits = ingest_dataset(dir.path()).unwrap();
    assert_eq!(splits.train.counts(), train);
    assert_eq!(splits.test.counts(), test);
    assert_eq!(splits.total(), 25);
    assert_eq!(splits.train.split(), Split::Train);
    let paths: Vec<_> = splits
        .train
        .entries()
        .iter()
        .map(|e| e.path.clone())
        .collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);

    let dist = class_distribution(&splits.test).unwrap();
    assert_eq!(dist.imbalance, Imbalance::Degenerate);
    assert_eq!(
        class_distribution(&splits.train).unwrap().imbalance,
        Imbalance::Ratio(7.0)
    );

    let pooled_1_3 = splits
        .pooled()
        .iter()
        .filter(|e| (1..=3).contains(&e.grade.value()))
        .count();
    assert_eq!(pooled_1_3, 3 + 5 + 2 + 1 + 0 + 3);
}

#[test]
fn structural_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ingest_dataset(&dir.path().join("nope")),
        Err(DatasetError::MissingRoot(_))
    ));
    std::fs::create_dir_all(dir.path().join("train/0")).unwrap();
    assert!(matches!(
        ingest_dataset(dir.path()),
        Err(DatasetError::MissingSplit(_))
    ));
    std::fs::create_dir_all(dir.path().join("test/7")).unwrap();
    assert!(matches!(
        ingest_dataset(dir.path()),
        Err(DatasetError::BadGradeDir(_))
    ));
}

#[test]
fn batches_are_seeded_and_flip_only_in_train() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), [6; 5], [2; 5], 3, 16).unwrap();
    let s = ingest_dataset(dir.path()).unwrap();
    let a = make_batches(&s.train, 4, 9).unwrap();
    assert_eq!(a, make_batches(&s.train, 4, 9).unwrap());
    assert_eq!(a.len(), 8);
    assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 30);
    assert!(a.iter().flatten().any(|b| b.flip));
    assert!(make_batches(&s.test, 3, 9)
        .unwrap()
        .iter()
        .flatten()
        .all(|b| !b.flip));
}

#[test]
fn histogram_bins_sum_to_pixel_count() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), [2, 0, 0, 0, 0], [0; 5], 5, 24).unwrap();
    let s = ingest_dataset(dir.path()).unwrap();
    let imgs: Vec<ImageBuffer> = s
        .train
        .entries()
        .iter()
        .map(|e| load_image(&e.path).unwrap())
        .collect();
    let bins = pixel_histogram(&imgs).unwrap();
    assert_eq!(bins.iter().sum::<u64>(), 2 * 24 * 24);
    let black = pixel_histogram(&[ImageBuffer::filled(5, 4, 1, 0).unwrap()]).unwrap();
    assert_eq!(black[0], 20);
    assert_eq!(black.iter().filter(|&&c| c > 0).count(), 1);
}

/// Runs only when the clinical dataset is available locally.
#[test]
fn real_dataset_counts_when_present() {
    let Some(root) = std::env::var_os("KOA_DATASET_ROOT") else {
        eprintln!("KOA_DATASET_ROOT not set; skipping real-dataset count check");
        return;
    };
    let s = ingest_dataset(std::path::Path::new(&root)).unwrap();
    assert_eq!(s.train.len(), 5778);
    assert_eq!(s.test.len(), 1656);
    assert_eq!(s.total(), 7434);
    let kl13 = s
        .pooled()
        .iter()
        .filter(|e| (1..=3).contains(&e.grade.value()))
        .count();
    assert_eq!(kl13, 4255);
}

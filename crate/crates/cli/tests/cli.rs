use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use koa_core::fixtures::{
    calibrated_resnet18, synthetic_radiograph, write_synthetic_dataset, HEAD_INIT_RANGE,
};
use koa_core::grade::NUM_GRADES;
use koa_core::model_io::{load_from_path, save_to_path};
use koa_core::preprocess::ImageBuffer;
use koa_core::trainer::{FeatureSet, LinearHead};
use koa_core::KLGrade;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn koa(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koa"))
        .args(args.iter().map(|a| a.as_ref()))
        .env_remove(koa_core::insight::ENDPOINT_ENV)
        .env_remove(koa_core::insight::API_KEY_ENV)
        .output()
        .expect("spawn koa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn shared_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("koa-cli-tests")
}

/// Calibrated synthetic model shared by all tests in this binary.
fn model() -> &'static Path {
    static MODEL: OnceLock<PathBuf> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = shared_dir();
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.koam");
        save_to_path(&calibrated_resnet18(42, HEAD_INIT_RANGE), &path).unwrap();
        path
    })
}

fn radiograph(dir: &Path, grade: usize) -> PathBuf {
    let path = dir.join(format!("grade{grade}.png"));
    synthetic_radiograph(
        KLGrade::from_index(grade).unwrap(),
        1000 + grade as u64,
        96,
        96,
    )
    .save_png(&path)
    .unwrap();
    path
}

fn feature_cache(path: &Path, rows: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<KLGrade> = (0..rows)
        .map(|i| KLGrade::from_index(i % NUM_GRADES).unwrap())
        .collect();
    let feats = labels
        .iter()
        .flat_map(|g| {
            let c = g.index() as f32;
            (0..8)
                .map(|j| {
                    if j % NUM_GRADES == g.index() {
                        1.0 + c
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>()
        })
        .map(|v: f32| v + rng.gen_range(-0.1..0.1))
        .collect();
    let set = FeatureSet::new(8, feats, labels).unwrap();
    save_to_path(&set.to_artifact().unwrap(), path).unwrap();
}

#[test]
fn ingest_counts_and_missing_root() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), [3, 1, 2, 1, 1], [1, 1, 0, 1, 2], 5, 24).unwrap();
    let out = dir.path().join("out");
    let o = koa(&[&"ingest", &"--data", &dir.path(), &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.lines()
            .any(|l| l.split_whitespace().collect::<Vec<_>>()
                == ["train", "3", "1", "2", "1", "1", "8"]),
        "{text}"
    );
    assert!(
        text.lines()
            .any(|l| l.split_whitespace().collect::<Vec<_>>()
                == ["total", "4", "2", "2", "2", "3", "13"]),
        "{text}"
    );
    let csv = fs::read_to_string(out.join("class_distribution.csv")).unwrap();
    assert!(csv.starts_with("split,grade,count\n"));
    assert!(csv.contains("test,4,2\n"));

    let o = koa(&[&"ingest", &"--data", &dir.path().join("nope")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eda_histograms() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), [0, 1, 1, 1, 1], [0; NUM_GRADES], 9, 24).unwrap();
    ImageBuffer::filled(12, 10, 1, 0)
        .unwrap()
        .save_png(&dir.path().join("train/0/black.png"))
        .unwrap();
    let out = dir.path().join("eda");
    let o = koa(&[&"eda", &"--data", &dir.path(), &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // A black image populates exactly one bin.
    assert_eq!(
        fs::read_to_string(out.join("histogram_grade0.csv")).unwrap(),
        "intensity,count\n0,120\n"
    );
    for g in 1..NUM_GRADES {
        let csv = fs::read_to_string(out.join(format!("histogram_grade{g}.csv"))).unwrap();
        let total: u64 = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, 24 * 24);
    }
    assert!(out.join("class_distribution.csv").is_file());
}

#[test]
fn predict_outputs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let image = radiograph(dir.path(), 2);

    let plain = koa(&[&"predict", &"--model", &model(), &image]);
    assert_eq!(
        code(&plain),
        0,
        "{}",
        String::from_utf8_lossy(&plain.stderr)
    );
    let plain = stdout(&plain);

    let offline = koa(&[
        &"predict",
        &"--model",
        &model(),
        &image,
        &"--insights",
        &"--offline",
    ]);
    assert_eq!(code(&offline), 0);
    let offline = stdout(&offline);
    assert!(
        offline.starts_with(&plain),
        "prediction text changed with insights"
    );
    assert!(offline.contains("source: fallback"));

    let json = koa(&[
        &"predict",
        &"--model",
        &model(),
        &image,
        &"--json",
        &"--insights",
        &"--offline",
    ]);
    let v: serde_json::Value = serde_json::from_str(stdout(&json).trim()).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["probabilities"].as_array().unwrap().len(), NUM_GRADES);
    assert_eq!(v["insights"]["status"], "ok");
    assert_eq!(v["insights"]["report"]["source"], "fallback");

    // No endpoint configured: exit 4, prediction still printed.
    let online = koa(&[&"predict", &"--model", &model(), &image, &"--insights"]);
    assert_eq!(code(&online), 4);
    assert!(stdout(&online).starts_with(&plain));

    let corrupt = dir.path().join("corrupt.koam");
    fs::write(&corrupt, b"KOAM\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&koa(&[&"predict", &"--model", &corrupt, &image])), 3);

    let not_image = dir.path().join("x.png");
    fs::write(&not_image, b"not an image").unwrap();
    assert_eq!(
        code(&koa(&[&"predict", &"--model", &model(), &not_image])),
        2
    );
    assert_eq!(
        code(&koa(&[
            &"predict",
            &"--model",
            &model(),
            &dir.path().join("missing.png")
        ])),
        2
    );
}

#[test]
fn train_head_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.koam");
    let test = dir.path().join("test.koam");
    feature_cache(&train, 60, 1);
    feature_cache(&test, 20, 2);
    let run = |name: &str, epochs: &str| {
        let out = dir.path().join(name);
        let o = koa(&[
            &"train-head",
            &"--features",
            &train,
            &"--test-features",
            &test,
            &"--epochs",
            &epochs,
            &"--lr",
            &"0.01",
            &"--batch-size",
            &"16",
            &"--seed",
            &"3",
            &"--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "30");
    let b = run("b", "30");
    let csv = fs::read_to_string(a.join("epochs.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("epochs.csv")).unwrap());
    assert_eq!(csv.lines().count(), 31);
    assert_eq!(
        fs::read(a.join("head.koam")).unwrap(),
        fs::read(b.join("head.koam")).unwrap()
    );
    let last_acc: f64 = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(last_acc > 0.9, "{csv}");

    let z = run("zero", "0");
    let saved = LinearHead::from_artifact(&load_from_path(&z.join("head.koam")).unwrap()).unwrap();
    let initial = LinearHead::from_artifact(&LinearHead::seeded(8, 3).to_artifact()).unwrap();
    assert_eq!(saved, initial);

    let o = koa(&[
        &"train-head",
        &"--features",
        &train,
        &"--lr",
        &"-1",
        &"--out",
        &dir.path().join("neg"),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_with_subset() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), [1; NUM_GRADES], [1, 1, 1, 0, 0], 11, 32).unwrap();
    let out = dir.path().join("eval");
    let o = koa(&[
        &"evaluate",
        &"--model",
        &model(),
        &"--data",
        &dir.path(),
        &"--subset",
        &"1,2",
        &"--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("2 images\n"));
    assert!(out.join("confusion.csv").is_file() && out.join("report.csv").is_file());

    let o = koa(&[
        &"evaluate",
        &"--model",
        &model(),
        &"--data",
        &dir.path(),
        &"--subset",
        &"3,4",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn quantize_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let q1 = dir.path().join("q1.koam");
    let q2 = dir.path().join("q2.koam");
    assert_eq!(
        code(&koa(&[
            &"quantize",
            &model(),
            &q1,
            &"--policy",
            &"everything"
        ])),
        2
    );
    assert!(!q1.exists());

    let o = koa(&[&"quantize", &model(), &q1]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        stdout(&o).contains("policy weights-only: 21 int8 tensors"),
        "{}",
        stdout(&o)
    );
    assert!(fs::metadata(&q1).unwrap().len() * 3 < fs::metadata(model()).unwrap().len());

    // Quantizing an already-quantized model changes nothing.
    let o = koa(&[&"quantize", &q1, &q2]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&q1).unwrap(), fs::read(&q2).unwrap());
    assert!(stdout(&o).contains("manifest diff: 0 lines"));

    let m = stdout(&koa(&[&"manifest", &q1]));
    assert!(
        m.lines()
            .any(|l| l.starts_with("conv1.weight") && l.contains("i8")),
        "{m}"
    );
    assert_eq!(code(&koa(&[&"manifest", &dir.path().join("none.koam")])), 2);
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use koa_core::dataset::{self, DatasetEntry, DatasetSplits};
use koa_core::fixtures;
use koa_core::grade::NUM_GRADES;
use koa_core::insight::{EndpointConfig, InsightClient};
use koa_core::metrics::{self, adjacent_confusion_share, MetricsError};
use koa_core::model_io::{self, FormatError};
use koa_core::preprocess::{self, load_and_prepare};
use koa_core::quantize::{is_weight_tensor, quantize_model, QuantPolicy};
use koa_core::report::{render_json, render_text, InsightBlock};
use koa_core::resnet::{build_resnet18, NetworkDef, FEATURE_DIM};
use koa_core::trainer::{self, FeatureSet, TrainConfig};
use koa_core::{par, DType, Exec, KLGrade, ModelArtifact};

use crate::{EvalSplit, SplitArg, SynthCommand, TrainArgs};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type CmdResult = Result<(), Failure>;

fn bad_input(message: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn model_error(message: impl ToString) -> Failure {
    Failure {
        code: 3,
        message: message.to_string(),
    }
}

/// Images decoded and run through the backbone per parallel batch.
const CHUNK: usize = 64;

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(bad_input(format!("{what} not found: {}", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(bad_input(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path)
        .map_err(|e| bad_input(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| bad_input(format!("cannot write {}: {e}", path.display())))
}

fn load_artifact(path: &Path) -> Result<ModelArtifact, Failure> {
    require_file(path, "model")?;
    model_io::load_from_path(path).map_err(|e| model_error(format!("{}: {e}", path.display())))
}

fn load_network(path: &Path) -> Result<NetworkDef, Failure> {
    let art = load_artifact(path)?;
    build_resnet18(&art).map_err(|e| model_error(format!("{}: {e}", path.display())))
}

fn save_artifact(art: &ModelArtifact, path: &Path) -> Result<u64, Failure> {
    model_io::save_to_path(art, path).map_err(|e| match e {
        FormatError::Io(e) => bad_input(format!("cannot write {}: {e}", path.display())),
        other => model_error(other),
    })
}

fn ingest_root(root: &Path) -> Result<DatasetSplits, Failure> {
    dataset::ingest_dataset(root).map_err(bad_input)
}

fn counts_row(name: &str, counts: [usize; NUM_GRADES]) -> String {
    let mut row = format!("{name:<6}");
    for c in counts {
        let _ = write!(row, " {c:>7}");
    }
    let _ = write!(row, " {:>7}", counts.iter().sum::<usize>());
    row
}

pub fn ingest(root: &Path, out: Option<&Path>) -> CmdResult {
    let splits = ingest_root(root)?;
    let (train, test) = (splits.train.counts(), splits.test.counts());
    let mut total = [0; NUM_GRADES];
    for i in 0..NUM_GRADES {
        total[i] = train[i] + test[i];
    }
    println!(
        "split  {}   total",
        KLGrade::ALL.map(|g| format!("  grade{g}")).join("")
    );
    println!("{}", counts_row("train", train));
    println!("{}", counts_row("test", test));
    println!("{}", counts_row("total", total));
    for (name, counts) in [("train", train), ("test", test)] {
        if let Ok(d) = dataset::counts_distribution(counts) {
            println!("{name} imbalance (max/min): {}", d.imbalance);
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut csv = String::from("split,grade,count\n");
        for (name, counts) in [("train", train), ("test", test)] {
            for g in KLGrade::ALL {
                let _ = writeln!(csv, "{name},{g},{}", counts[g.index()]);
            }
        }
        write_file(&dir.join("class_distribution.csv"), &csv)?;
    }
    Ok(())
}

pub fn eda(root: &Path, out: &Path) -> CmdResult {
    let splits = ingest_root(root)?;
    create_dir(out)?;
    let pooled = splits.pooled();
    for g in KLGrade::ALL {
        let mut bins = [0u64; 256];
        for e in pooled.iter().filter(|e| e.grade == g) {
            let img = preprocess::load_image(&e.path).map_err(bad_input)?;
            dataset::accumulate_histogram(&mut bins, &img);
        }
        // Only populated bins are written.
        let mut csv = String::from("intensity,count\n");
        for (v, &c) in bins.iter().enumerate().filter(|(_, &c)| c > 0) {
            let _ = writeln!(csv, "{v},{c}");
        }
        let path = out.join(format!("histogram_grade{g}.csv"));
        write_file(&path, &csv)?;
        println!(
            "grade {g}: {} pixels -> {}",
            bins.iter().sum::<u64>(),
            path.display()
        );
    }
    ingest(root, Some(out))
}

pub fn predict(model: &Path, image: &Path, insights: bool, offline: bool, json: bool) -> CmdResult {
    require_file(model, "model")?;
    require_file(image, "image")?;
    let net = load_network(model)?;
    let x = load_and_prepare(image, false).map_err(bad_input)?;
    let pred = net.predict(&x).map_err(model_error)?;
    let name = image.display().to_string();

    let mut failure = None;
    let block = insights.then(|| {
        let client = InsightClient::new(EndpointConfig::from_env(), offline);
        match client.report(pred.grade) {
            Ok(report) => InsightBlock::Ok { report },
            Err(e) => {
                failure = Some(Failure {
                    code: 4,
                    message: format!("insight request failed: {e}"),
                });
                InsightBlock::Failed {
                    error: e.to_string(),
                }
            }
        }
    });
    if json {
        println!("{}", render_json(&name, &pred, block.as_ref()));
    } else {
        print!("{}", render_text(&name, &pred, block.as_ref()));
    }
    failure.map_or(Ok(()), Err)
}

/// Backbone features for `entries` in input order, unflipped.
fn extract_features(net: &NetworkDef, entries: &[DatasetEntry]) -> Result<FeatureSet, Failure> {
    let inner = net.clone().with_exec(Exec::Sequential);
    let mut feats = Vec::with_capacity(entries.len() * FEATURE_DIM);
    for chunk in entries.chunks(CHUNK) {
        let rows = par::map_slice(net.exec(), chunk, |e| -> Result<Vec<f32>, Failure> {
            let x = load_and_prepare(&e.path, false).map_err(bad_input)?;
            let f = inner.extract_features(&x).map_err(model_error)?;
            f.into_f32_vec().map_err(model_error)
        });
        for r in rows {
            feats.extend(r?);
        }
    }
    let labels = entries.iter().map(|e| e.grade).collect();
    FeatureSet::new(FEATURE_DIM, feats, labels).map_err(model_error)
}

fn split_entries(splits: &DatasetSplits, split: SplitArg) -> &[DatasetEntry] {
    match split {
        SplitArg::Train => splits.train.entries(),
        SplitArg::Test => splits.test.entries(),
    }
}

pub fn features(model: &Path, root: &Path, split: SplitArg, out: &Path) -> CmdResult {
    require_dir(root, "dataset root")?;
    let net = load_network(model)?;
    let splits = ingest_root(root)?;
    let set = extract_features(&net, split_entries(&splits, split))?;
    let art = set.to_artifact().map_err(bad_input)?;
    let bytes = save_artifact(&art, out)?;
    println!(
        "{} feature rows ({bytes} bytes) -> {}",
        set.len(),
        out.display()
    );
    Ok(())
}

fn load_feature_cache(path: &Path) -> Result<FeatureSet, Failure> {
    require_file(path, "feature cache")?;
    let art = model_io::load_from_path(path).map_err(bad_input)?;
    FeatureSet::from_artifact(&art).map_err(bad_input)
}

pub fn train_head(args: &TrainArgs) -> CmdResult {
    let cfg = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(bad_input)?;
    let (train, test) = match (&args.features, &args.data) {
        (Some(f), _) => (
            load_feature_cache(f)?,
            args.test_features
                .as_deref()
                .map(load_feature_cache)
                .transpose()?,
        ),
        (None, Some(root)) => {
            require_dir(root, "dataset root")?;
            let model = args
                .model
                .as_deref()
                .expect("clap requires --model with --data");
            let net = load_network(model)?;
            let splits = ingest_root(root)?;
            let train = extract_features(&net, splits.train.entries())?;
            let test = (!splits.test.is_empty())
                .then(|| extract_features(&net, splits.test.entries()))
                .transpose()?;
            (train, test)
        }
        (None, None) => return Err(bad_input("either --features or --data is required")),
    };
    let (head, logs) = trainer::fit(&train, test.as_ref(), &cfg).map_err(bad_input)?;
    create_dir(&args.out)?;
    save_artifact(&head.to_artifact(), &args.out.join("head.koam"))?;
    write_file(&args.out.join("epochs.csv"), &trainer::epoch_csv(&logs))?;
    if let Some(model) = &args.model {
        let mut art = load_artifact(model)?;
        head.install_into(&mut art);
        build_resnet18(&art).map_err(model_error)?;
        save_artifact(&art, &args.out.join("model.koam"))?;
    }
    let final_acc = trainer::accuracy(&head, &train);
    match logs.last() {
        Some(l) => println!(
            "epochs {} loss {:.6} train_acc {:.4}{}",
            logs.len(),
            l.loss,
            final_acc,
            l.test_accuracy
                .map(|a| format!(" test_acc {a:.4}"))
                .unwrap_or_default()
        ),
        None => println!("epochs 0: initial head saved (train_acc {final_acc:.4})"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_subset(spec: &str) -> Result<Vec<KLGrade>, Failure> {
    let mut grades = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<KLGrade>()
                .map_err(|e| bad_input(format!("--subset: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    grades.sort();
    grades.dedup();
    Ok(grades)
}

pub fn evaluate(
    model: &Path,
    root: &Path,
    split: EvalSplit,
    subset: Option<&str>,
    out: Option<&Path>,
) -> CmdResult {
    require_dir(root, "dataset root")?;
    let subset = subset.map(parse_subset).transpose()?;
    let net = load_network(model)?;
    let splits = ingest_root(root)?;
    let entries: Vec<DatasetEntry> = match split {
        EvalSplit::Train => splits.train.entries().to_vec(),
        EvalSplit::Test => splits.test.entries().to_vec(),
        EvalSplit::All => splits.pooled(),
    };
    let entries: Vec<DatasetEntry> = match &subset {
        Some(s) => entries
            .into_iter()
            .filter(|e| s.contains(&e.grade))
            .collect(),
        None => entries,
    };
    if entries.is_empty() {
        return Err(bad_input("no images to evaluate (empty split or subset)"));
    }
    let inner = net.clone().with_exec(Exec::Sequential);
    let mut pairs = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(CHUNK) {
        let preds = par::map_slice(net.exec(), chunk, |e| -> Result<KLGrade, Failure> {
            let x = load_and_prepare(&e.path, false).map_err(bad_input)?;
            Ok(inner.predict(&x).map_err(model_error)?.grade)
        });
        for (e, p) in chunk.iter().zip(preds) {
            pairs.push((e.grade, p?));
        }
    }
    let (matrix, report) = match &subset {
        Some(s) => {
            let r = metrics::subset_report(&pairs, s).map_err(|e| match e {
                MetricsError::EmptySubset => bad_input("subset has no samples"),
                other => bad_input(other),
            })?;
            (r.matrix, r.report)
        }
        None => {
            let m = metrics::confusion_matrix(&pairs);
            let r = metrics::precision_recall_f1(&m);
            (m, r)
        }
    };
    println!("{} images", pairs.len());
    println!("{}", matrix.to_table());
    println!("{}", report.to_table());
    println!("macro F1 {:.4}", report.macro_f1());
    println!(
        "adjacent-grade share of errors {:.4}",
        adjacent_confusion_share(&matrix)
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("confusion.csv"), &matrix.to_csv())?;
        write_file(&dir.join("report.csv"), &report.to_csv())?;
    }
    Ok(())
}

pub fn quantize(input: &Path, output: &Path, policy: &str) -> CmdResult {
    let policy: QuantPolicy = policy.parse().map_err(bad_input)?;
    let art = load_artifact(input)?;
    let q = quantize_model(&art, policy).map_err(model_error)?;
    let before = art.encoded_len();
    let after = save_artifact(&q, output)? as usize;
    let w_before = art.payload_bytes(is_weight_tensor);
    let w_after = q.payload_bytes(|n, t| n.ends_with(".weight") && matches!(t.ndim(), 2 | 4));
    let int8 = q.tensors().filter(|(_, t)| t.dtype() == DType::I8).count();
    println!("policy {policy}: {int8} int8 tensors");
    println!(
        "file {before} -> {after} bytes ({:.1}%)",
        100.0 * after as f64 / before as f64
    );
    println!(
        "weight payload {w_before} -> {w_after} bytes ({:.1}%)",
        100.0 * w_after as f64 / w_before.max(1) as f64
    );
    let diff = model_io::manifest_diff(&model_io::manifest(&art), &model_io::manifest(&q));
    println!("manifest diff: {} lines", diff.len());
    for line in diff {
        println!("{line}");
    }
    Ok(())
}

pub fn manifest(model: &Path) -> CmdResult {
    let art = load_artifact(model)?;
    for (k, v) in art.metadata() {
        println!("# {k} = {v}");
    }
    print!("{}", model_io::manifest(&art));
    Ok(())
}

pub fn synth(cmd: SynthCommand) -> CmdResult {
    match cmd {
        SynthCommand::Model {
            seed,
            head_range,
            out,
        } => {
            if !(head_range.is_finite() && head_range > 0.0) {
                return Err(bad_input("--head-range must be positive"));
            }
            let art = fixtures::calibrated_resnet18(seed, head_range);
            let bytes = save_artifact(&art, &out)?;
            println!(
                "synthetic model seed {seed} ({bytes} bytes) -> {}",
                out.display()
            );
        }
        SynthCommand::Dataset {
            seed,
            train_per_grade,
            test_per_grade,
            size,
            out,
        } => {
            if size < 16 {
                return Err(bad_input("--size must be at least 16"));
            }
            fixtures::write_synthetic_dataset(
                &out,
                [train_per_grade; NUM_GRADES],
                [test_per_grade; NUM_GRADES],
                seed,
                size,
            )
            .map_err(bad_input)?;
            println!(
                "synthetic dataset {}x{} per grade -> {}",
                train_per_grade,
                test_per_grade,
                out.display()
            );
        }
    }
    Ok(())
}

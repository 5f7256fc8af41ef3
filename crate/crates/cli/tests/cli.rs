use std::path::Path;
use std::process::{Command, Output};

use dasksvd::data::{encode_idx, IdxData};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn dasksvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasksvd"))
        .args(args)
        .env_remove("DASKSVD_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

/// Digit-sized images where class c lights a 6×6 block at a class-specific spot.
fn write_split(dir: &Path, split: &str, per_class: usize, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * 10;
    let mut labels = Vec::with_capacity(n);
    let images = Array3::from_shape_fn((n, 28, 28), |(i, row, col)| {
        let c = i % 10;
        let (r0, c0) = (4 + (c / 5) * 12, 1 + (c % 5) * 5);
        if (r0..r0 + 6).contains(&row) && (c0..c0 + 6).contains(&col) {
            200
        } else {
            0
        }
    })
    .mapv(|v: u8| v.saturating_add(r.random_range(0..40)));
    for i in 0..n {
        labels.push((i % 10) as u8);
    }
    std::fs::write(
        dir.join(format!("{split}-images-idx3-ubyte")),
        encode_idx(&IdxData::Images(images)),
    )
    .unwrap();
    std::fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), encode_idx(&IdxData::Labels(labels))).unwrap();
}

fn synthetic_mnist(dir: &Path) {
    write_split(dir, "train", 30, 1);
    write_split(dir, "t10k", 10, 2);
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn significance_reports_probability() {
    let out = json(&dasksvd(&["significance", "--reference", "0.955", "--accuracy", "0.967", "-n", "10000"]));
    assert!(out["probability"].as_f64().unwrap() > 0.9999);
}

#[test]
fn csv_format_emits_key_value_rows() {
    let out = dasksvd(&["--format", "csv", "significance", "--reference", "0.9", "--accuracy", "0.9", "-n", "100"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("key,value"));
    assert!(text.contains("probability,0.5"));
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = dasksvd(&["prepare-data", "--mnist-dir", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let out = dasksvd(&["significance", "--reference", "0.9", "--accuracy", "0.95", "-n", "5"]);
    assert_eq!(out.status.code(), Some(2));

    let out = dasksvd(&["significance", "--reference", "0.5"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.dksv");
    std::fs::write(&bad, b"XXXXnot an artifact").unwrap();
    let out = dasksvd(&["encode", "--dict", p(&bad), "--data", p(&bad), "--out", p(&dir.path().join("c.dksv"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stages_chain_through_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    std::fs::create_dir(&mnist).unwrap();
    synthetic_mnist(&mnist);
    let work = dir.path();
    let file = |name: &str| work.join(name);

    let prep = json(&dasksvd(&[
        "--seed",
        "3",
        "prepare-data",
        "--mnist-dir",
        p(&mnist),
        "--per-class-train",
        "20",
        "--per-class-val",
        "5",
        "--out",
        p(work),
    ]));
    assert_eq!(prep["train"], 200);
    assert_eq!(prep["val"], 50);
    assert_eq!(prep["test"], 100);
    assert_eq!(prep["dim"], 256);

    let das_args = ["--iterations", "2", "--per-class", "10", "--ksvd-iterations", "5", "--redundancy", "0.3"];
    let (train, dict, base, iterations) = (file("train.dksv"), file("dict.dksv"), file("base.dksv"), file("iterations.json"));
    let mut args = vec!["--seed", "3", "das-ksvd", "--data", p(&train), "--out", p(&dict)];
    args.extend(das_args);
    args.extend(["--log", p(&iterations)]);
    let das = json(&dasksvd(&args));
    assert_eq!(das["atoms"], 20);
    let log: Value = serde_json::from_slice(&std::fs::read(file("iterations.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);

    let mut args = vec!["--seed", "3", "baseline", "--data", p(&train), "--out", p(&base)];
    args.extend(das_args);
    assert_eq!(json(&dasksvd(&args))["atoms"], 20);

    for split in ["train", "test"] {
        let out = json(&dasksvd(&[
            "encode",
            "--dict",
            p(&file("dict.dksv")),
            "--data",
            p(&file(&format!("{split}.dksv"))),
            "--out",
            p(&file(&format!("{split}-codes.dksv"))),
        ]));
        assert_eq!(out["sparsity"], 4);
    }

    let trained = json(&dasksvd(&[
        "--seed",
        "3",
        "train-mlp",
        "--codes",
        p(&file("train-codes.dksv")),
        "--data",
        p(&file("train.dksv")),
        "--epochs",
        "100",
        "--out",
        p(&file("model.dksv")),
        "--loss-csv",
        p(&file("loss.csv")),
    ]));
    assert_eq!(trained["architecture"], "MLP-20-20-10");
    assert_eq!(trained["weight_count"], 20 * 21 + 10 * 21);
    let loss = std::fs::read_to_string(file("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mse"));

    let eval = json(&dasksvd(&[
        "evaluate",
        "--model",
        p(&file("model.dksv")),
        "--codes",
        p(&file("test-codes.dksv")),
        "--data",
        p(&file("test.dksv")),
        "--reference-accuracy",
        "0.5",
    ]));
    assert_eq!(eval["n_test"], 100);
    assert!(eval["accuracy"].as_f64().unwrap() > 0.5, "{eval}");
    assert!(eval["significance"].is_number());

    // a model is not a dictionary
    let out = dasksvd(&["encode", "--dict", p(&file("model.dksv")), "--data", p(&file("test.dksv")), "--out", p(&file("x.dksv"))]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    std::fs::create_dir(&mnist).unwrap();
    synthetic_mnist(&mnist);
    let run = |out: &Path| {
        json(&dasksvd(&[
            "--seed",
            "5",
            "run",
            "--mnist-dir",
            p(&mnist),
            "--per-class-train",
            "20",
            "--per-class-val",
            "5",
            "--iterations",
            "2",
            "--per-class",
            "10",
            "--ksvd-iterations",
            "5",
            "--redundancy",
            "0.3",
            "--epochs",
            "50",
            "--out",
            p(out),
        ]))
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    for key in ["accuracy", "per_class_accuracy", "n_test", "weight_count", "config", "seed"] {
        assert!(a.get(key).is_some(), "missing {key}");
    }
    assert_eq!(a["weight_count"], 20 * 21 + 10 * 21);
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(strip(a), strip(b));
    for f in ["dictionary.dksv", "model.dksv", "mlp_loss.csv", "iterations.json", "report.json"] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cte::data::save_dataset;
use cte::{save_model, Ensemble, ImageDims, LabeledDataset, PrepConfig, RawImage};
use cte_cli::EvalRecord;

fn cte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cte"))
        .args(args)
        .env_remove("CTE_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Three classes told apart by where a bright bar sits, with deterministic texture.
fn synthetic(n: usize) -> LabeledDataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 3;
        images.push(RawImage::from_fn(12, 12, 1, |x, y, _| {
            let noise = ((x * 31 + y * 17 + i * 7) % 11) as f32 / 40.0;
            if y / 4 == class && (3..9).contains(&x) {
                0.8 + noise
            } else {
                noise
            }
        }));
        labels.push(class as u16 + 1);
    }
    LabeledDataset::new(images, labels, 3, "synthetic").unwrap()
}

const TOY_CONFIG: &str = r#"
tables = 2
word_bits = 4
patch_size = 5

[loss]
kind = "softmax"
regularization = 0.1

[growth]
candidates = 8
"#;

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("toy.cted");
    save_dataset(&synthetic(200), &data).unwrap();
    let config = dir.join("toy.toml");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    (data, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_is_reproducible_and_model_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path());
    let a = dir.path().join("a.cte");
    let b = dir.path().join("b.cte");
    for (model, threads) in [(&a, "1"), (&b, "1")] {
        ok(&cte(&[
            "--threads",
            threads,
            "train",
            "--config",
            s(&config),
            "--dataset",
            s(&data),
            "--model",
            s(model),
            "--seed",
            "3",
        ]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.cte.log.json")).unwrap()).unwrap();
    assert_eq!(log["schema"], "cte-train-log/1");
    assert_eq!(log["tables"].as_array().unwrap().len(), 2);

    let metrics = dir.path().join("eval.json");
    ok(&cte(&[
        "eval",
        "--model",
        s(&a),
        "--dataset",
        s(&data),
        "--out",
        s(&metrics),
    ]));
    let rec: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(rec.schema, "cte-eval/1");
    assert_eq!(rec.examples, 200);
    assert!(rec.error_rate < 0.2, "{rec:?}");

    let bench = dir.path().join("bench.json");
    ok(&cte(&[
        "bench",
        "--model",
        s(&a),
        "--dataset",
        s(&data),
        "--reps",
        "2",
        "--out",
        s(&bench),
    ]));
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(rec["schema"], "cte-bench/1");
    assert!(rec["vote_us"]["median_us"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path());
    let model = dir.path().join("m.cte");
    let teacher = dir.path().join("t.bin");
    let both = cte(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        s(&data),
        "--model",
        s(&model),
        "--holdout",
        "0.2",
        "--teacher",
        s(&teacher),
    ]);
    assert_eq!(both.status.code(), Some(2));
    let missing = cte(&["train", "--config", s(&config), "--model", s(&model)]);
    assert_eq!(missing.status.code(), Some(2));
    let absent = cte(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        "nope.cted",
        "--model",
        s(&model),
    ]);
    assert_eq!(absent.status.code(), Some(2));
    let no_root = cte(&["eval", "--model", s(&model), "--dataset", "mnist-test"]);
    assert_eq!(no_root.status.code(), Some(2));
    assert!(!model.exists());
}

#[test]
fn bad_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path());
    std::fs::write(&config, "tables = 2\nword_bits = 40\n").unwrap();
    let out = cte(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        s(&data),
        "--model",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&config, "tabels = 2\n").unwrap();
    let out = cte(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        s(&data),
        "--model",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tabels"));
}

#[test]
fn constant_model_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<RawImage> = (0..50)
        .map(|i| RawImage::from_fn(4, 4, 1, |x, y, _| (x + y + i) as f32))
        .collect();
    let labels = (0..50).map(|i| (i % 10) as u16 + 1).collect();
    let data = dir.path().join("ten.cted");
    save_dataset(&LabeledDataset::new(images, labels, 10, "ten").unwrap(), &data).unwrap();
    let mut biases = vec![0.0f32; 10];
    biases[0] = -1.0;
    let dims = ImageDims {
        width: 4,
        height: 4,
        depth: 1,
    };
    let model = dir.path().join("first.cte");
    save_model(
        &Ensemble::new(Vec::new(), biases, PrepConfig::identity(), dims).unwrap(),
        &model,
    )
    .unwrap();
    let out = cte(&["eval", "--model", s(&model), "--dataset", s(&data)]);
    ok(&out);
    let rec: EvalRecord = serde_json::from_slice(&out.stdout).unwrap();
    assert!((rec.error_rate - 0.9).abs() < 1e-12);
    for row in &rec.confusion {
        assert_eq!(row.iter().sum::<usize>(), 5);
        assert_eq!(row[0], 5);
    }

    let bench = cte(&["bench", "--model", s(&model), "--dataset", s(&data), "--reps", "50"]);
    ok(&bench);
    let rec: serde_json::Value = serde_json::from_slice(&bench.stdout).unwrap();
    assert!(rec["vote_us"]["median_us"].as_f64().unwrap() < 1.0);
}

#[test]
fn pareto_sweep_marks_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let sweep = dir.path().join("sweep.toml");
    std::fs::write(
        &sweep,
        r#"
[base]
word_bits = 4
patch_size = 5
loss = { kind = "softmax", regularization = 0.1 }
growth = { candidates = 6 }

[[point]]
id = "m1"
tables = 1

[[point]]
id = "m2"
tables = 2

[[point]]
id = "m4"
tables = 4

[[point]]
id = "broken"
tables = 1
word_bits = 99
"#,
    )
    .unwrap();
    let csv = dir.path().join("pareto.csv");
    ok(&cte(&[
        "pareto",
        "--config",
        s(&sweep),
        "--dataset",
        s(&data),
        "--out",
        s(&csv),
        "--reps",
        "1",
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema: cte-pareto/1");
    assert_eq!(lines.len(), 6);
    let errors: Vec<f64> = lines[2..5]
        .iter()
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
    assert!(lines[5].starts_with("broken,") && lines[5].ends_with(|c: char| c != ','));
    assert!(lines[2..5].iter().any(|l| l.split(',').nth(6) == Some("1")));
}

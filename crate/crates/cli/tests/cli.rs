//! Drives the `protomsl` binary through a short run on the synthetic shapes set.

use std::path::Path;
use std::process::Command;

fn protomsl(cwd: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_protomsl"))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "protomsl {args:?} failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn fails(cwd: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_protomsl"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(!out.status.success(), "protomsl {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).to_string()
}

const TOY: &str = "backbone = \"tiny\"
prototypes_per_class = 3
prototype_dim = 16
epochs_phase1 = 5
epochs_phase2 = 5
lr_phase1 = 0.001
lr_phase2 = 0.0001
batch_size = 40
projection_period = 5
warm_epochs = 1
val_fraction = 0.2
test_fraction = 0.2
last_layer_epochs = 2
";

#[test]
fn synth_train_calibrate_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    protomsl(d, &["dataset", "synth", "--out", "data", "--images", "30"]);
    protomsl(d, &["dataset", "validate", "data/manifest.csv"]);
    let split = protomsl(d, &["dataset", "split", "data/manifest.csv", "--val-frac", "0.2", "--test-frac", "0.2"]);
    assert!(split.contains("data/manifest.split.csv"));
    let stats = protomsl(d, &["dataset", "stats", "data/manifest.split.csv"]);
    for class in ["circle", "square", "triangle"] {
        assert!(stats.contains(class), "{stats}");
    }

    std::fs::write(d.join("toy.toml"), TOY).unwrap();
    protomsl(d, &["train", "--manifest", "data/manifest.split.csv", "--config", "toy.toml", "--out", "run"]);
    for f in ["config.toml", "split.csv", "metrics.jsonl", "model.safetensors"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 10);

    let cal = protomsl(
        d,
        &["calibrate", "--checkpoint", "run/model.safetensors", "--manifest", "run/split.csv", "--out", "run/cal.safetensors"],
    );
    assert!(cal.contains("temperature"), "{cal}");

    let eval = protomsl(
        d,
        &["evaluate", "--checkpoint", "run/cal.safetensors", "--manifest", "run/split.csv", "--out", "eval"],
    );
    assert!(eval.contains("Model + TempCal"), "{eval}");
    assert!(eval.contains("Most common (baseline)"));
    let predictions = std::fs::read_to_string(d.join("eval/predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 30);
    assert!(d.join("eval/traces.jsonl").is_file());

    let first = predictions.lines().next().unwrap();
    let id = serde_json::from_str::<serde_json::Value>(first).unwrap()["image_id"].as_str().unwrap().to_string();
    protomsl(
        d,
        &[
            "explain", "--checkpoint", "run/cal.safetensors", "--manifest", "run/split.csv", "--image", &id, "--k", "3",
            "--out", "panel.png", "--json", "explain.json",
        ],
    );
    let expl: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("explain.json")).unwrap()).unwrap();
    assert_eq!(expl["items"].as_array().unwrap().len(), 3);
    assert!(image::open(d.join("panel.png")).is_ok());

    let report = protomsl(
        d,
        &[
            "report", "--baseline", "run/split.csv", "--row", "Model + TempCal=eval/predictions.jsonl", "--traces",
            "eval/traces.jsonl", "--out", "report",
        ],
    );
    assert!(report.contains("Abst Rate"));
    for f in ["table.txt", "diversity.svg", "inclass.svg"] {
        assert!(d.join("report").join(f).is_file(), "missing {f}");
    }

    let export = protomsl(d, &["export-review", "--db", "fb.sqlite", "--checkpoint", "run/cal.safetensors", "--out", "review"]);
    assert!(export.contains("no feedback"), "{export}");
    assert!(d.join("review/review.json").is_file());
}

#[test]
fn bad_inputs_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.csv"), "missing.png, rock, OTHER, 1\n").unwrap();
    let err = fails(d, &["dataset", "validate", "bad.csv"]);
    assert!(err.contains("missing"), "{err}");
    fails(d, &["report"]);
    fails(d, &["train", "--manifest", "nope.csv", "--out", "run"]);
}

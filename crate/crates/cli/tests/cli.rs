use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;
use wastewise_core::classifier::History;
use wastewise_core::dataset::SplitManifest;
use wastewise_core::fixtures::{quick_artifact, synthetic_image, write_corpus};
use wastewise_core::{load_portable, ClassLabel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wastewise"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn artifact() -> &'static Path {
    static A: OnceLock<PathBuf> = OnceLock::new();
    A.get_or_init(|| {
        let path = tempfile::tempdir().unwrap().keep().join("model.onnx");
        quick_artifact(&path, "mobilenet_v2", 3).unwrap();
        path
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn predict_prints_results_and_fails_on_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bottle.png");
    synthetic_image(ClassLabel::Glass, 0, 80, 60).save(&img).unwrap();
    let out = run(&["predict", "--artifact", s(artifact()), s(&img)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_json_lines(&out);
    assert_eq!(lines.len(), 1);
    for key in ["event_id", "label", "confidence", "probabilities", "suggestion", "carbon_saved_g", "points_awarded", "factor_table_version"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    let missing = dir.path().join("nope.jpg");
    let out = run(&["predict", "--artifact", s(artifact()), s(&img), s(&missing)]);
    assert!(!out.status.success());
    assert_eq!(stdout_json_lines(&out).len(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jpg"));

    let out = run(&["predict", "--artifact", s(&dir.path().join("absent.onnx")), s(&img)]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn train_evaluate_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_corpus(&data, 4, 40, 40).unwrap();
    let train = |out_dir: &Path| {
        run(&[
            "train", "--data-root", s(&data), "--output-dir", s(out_dir), "--backbone", "mobilenet_v2",
            "--random-init", "--max-epochs", "1", "--batch-size", "8", "--seed", "5",
        ])
    };
    let out = train(&dir.path().join("runs"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("runs/mobilenet_v2");
    let history = History::from_csv(&std::fs::read_to_string(run_dir.join("history.csv")).unwrap()).unwrap();
    assert_eq!(history.len(), 1);
    assert!(load_portable(run_dir.join("model.onnx")).is_ok());
    let resolved: Value = serde_json::from_slice(&std::fs::read(run_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 5);
    assert_eq!(resolved["train"]["max_epochs"], 1);

    let out = run(&["evaluate", "--run-dir", s(&run_dir), "--split", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = &stdout_json_lines(&out)[0];
    assert_eq!(report["split"], "train");
    assert_eq!(report["per_class"].as_object().unwrap().len(), 6);
    let csv = std::fs::read_to_string(run_dir.join("report_train.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["cardboard", "glass", "metal", "paper", "plastic", "trash", "accuracy", "macro_f1"]);
    assert!(run_dir.join("confusion_train.csv").is_file());

    let out = run(&["export", "--run-dir", s(&run_dir), "--out", s(&dir.path().join("again.onnx"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(load_portable(dir.path().join("again.onnx")).is_ok());

    let rerun = dir.path().join("runs2");
    assert!(train(&rerun).status.success());
    let a = SplitManifest::read(run_dir.join("split_manifest.json")).unwrap();
    let b = SplitManifest::read(rerun.join("mobilenet_v2/split_manifest.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_requires_weights_or_random_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data-root", s(dir.path()), "--output-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--weights-dir"));
}

#[test]
fn evaluate_without_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["evaluate", "--run-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split manifest"));
}

#[test]
fn fetch_data_from_local_archive() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_corpus(&src, 2, 16, 16).unwrap();
    let zip_path = dir.path().join("dataset-resized.zip");
    {
        let mut zip = zip::ZipWriter::new(std::fs::File::create(&zip_path).unwrap());
        let opts = zip::write::SimpleFileOptions::default();
        for label in ClassLabel::ALL {
            for i in 0..2 {
                let name = format!("{}{:03}.png", label.name(), i);
                zip.start_file(format!("dataset-resized/{}/{name}", label.name()), opts).unwrap();
                zip.write_all(&std::fs::read(src.join(label.name()).join(&name)).unwrap()).unwrap();
            }
        }
        zip.start_file("__MACOSX/dataset-resized/glass/._glass000.png", opts).unwrap();
        zip.write_all(b"junk").unwrap();
        zip.finish().unwrap();
    }
    let dest = dir.path().join("trashnet");
    let out = run(&["fetch-data", "--archive", s(&zip_path), "--dest", s(&dest)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = &stdout_json_lines(&out)[0];
    assert_eq!(summary["total"], 12);
    for label in ClassLabel::ALL {
        let on_disk = std::fs::read_dir(dest.join(label.name())).unwrap().count();
        assert_eq!(summary["per_class"][label.name()], on_disk as u64);
    }

    let out = run(&["fetch-data", "--archive", s(&zip_path), "--dest", s(&dest), "--sha256", "00"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sha256"));
}

#[test]
fn serve_fails_fast_without_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["serve", "--artifact", s(&dir.path().join("missing.onnx")), "--port", "0", "--data-dir", s(dir.path())])
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.onnx"));
}

#[test]
fn serve_reports_healthy() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--artifact", s(artifact()), "--port", &port.to_string(), "--data-dir", s(dir.path())])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}/healthz");
    let mut status = None;
    for _ in 0..300 {
        if let Ok(r) = reqwest::blocking::get(&url) {
            if r.status() == 200 {
                status = Some(r.status());
                break;
            }
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(status.map(|s| s.as_u16()), Some(200));
}

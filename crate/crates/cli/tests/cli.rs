use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn altsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_altsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = altsim(args);
    assert_eq!(code(&out), 0, "altsim {args:?} failed: {}", stderr(&out));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) {
    ok(&[
        "gen-data", "--out", p(dir), "--nx", "4", "--ny", "4", "--frames", "12", "--sequences", "3",
        "--seed", seed,
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_writes_a_reproducible_dataset() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    small_data(&a, "7");
    small_data(&b, "7");
    small_data(&c, "8");
    let files = dir_bytes(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["config.toml", "graph.json", "manifest.json", "seq_000.traj", "seq_001.traj", "seq_002.traj"]
    );
    assert_eq!(files, dir_bytes(&b));
    assert_ne!(files, dir_bytes(&c));
    let manifest: serde_json::Value = serde_json::from_slice(&files[2].1).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_frames_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("d");
    let out = altsim(&["gen-data", "--out", p(&out_dir), "--frames", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("frames"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_data_path_is_named() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no_such_dataset");
    let out = altsim(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_such_dataset"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = altsim(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_altsim"))
        .args(["inspect", "whatever"])
        .env("ALTSIM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ALTSIM_THREADS"));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let out = ok(&["gradcheck", "--eps", "1e-5", "--tol", "1e-4", "--model", "alt"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("op:propagate,") && table.contains("param:"));
    assert!(!table.contains("FAIL"));

    let out = altsim(&["gradcheck", "--model", "alt", "--inject-fault", "matmul"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("matmul"), "{}", stderr(&out));

    let out = altsim(&["gradcheck", "--inject-fault", "frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_predict_and_inspect() {
    let tmp = TempDir::new().unwrap();
    let (data, val, run) = (tmp.path().join("data"), tmp.path().join("val"), tmp.path().join("run"));
    small_data(&data, "1");
    small_data(&val, "2");
    let train_args = [
        "train", "--data", p(&data), "--val", p(&val), "--out", p(&run), "--model", "alt", "--schedule", "4",
        "--epochs", "3", "--lr", "0.01", "--t-train", "5", "--seed", "3",
    ];
    ok(&train_args);
    for f in ["best.ckpt", "last.ckpt", "curve.csv", "loss.svg", "config.toml", "summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["weight_decay"].as_str().unwrap().contains("lr * 0.995^epoch"));

    // A second run reproduces every output byte for byte.
    let again = tmp.path().join("again");
    let mut args = train_args.to_vec();
    args[6] = p(&again);
    ok(&args);
    assert_eq!(dir_bytes(&run), dir_bytes(&again));

    let ckpt = run.join("best.ckpt");
    let report = tmp.path().join("report");
    let eval = ["eval", "--model", p(&ckpt), "--data", p(&data), "--horizons", "5,10", "--out", p(&report)];
    let csv = String::from_utf8(ok(&eval).stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,mode,horizon,mean_mm,sd_mm");
    assert_eq!(lines.len(), 5);
    assert_eq!(fs::read_to_string(report.join("report.csv")).unwrap(), csv);
    assert!(report.join("errors.svg").exists() && report.join("report.json").exists());
    assert_eq!(String::from_utf8(ok(&eval).stdout).unwrap(), csv);

    let beyond = altsim(&["eval", "--model", p(&ckpt), "--data", p(&data), "--horizons", "50"]);
    assert_eq!(code(&beyond), 2);

    let pred = tmp.path().join("pred.traj");
    ok(&["predict", "--model", p(&ckpt), "--data", p(&data), "--sequence", "1", "--steps", "8", "--out", p(&pred)]);
    let info: serde_json::Value =
        serde_json::from_slice(&ok(&["inspect", "--json", p(&pred)]).stdout).unwrap();
    assert_eq!(info["type"], "trajectory");
    assert_eq!(info["frames"], 9);
    assert_eq!(info["nodes"], 16);

    let info: serde_json::Value =
        serde_json::from_slice(&ok(&["inspect", "--json", p(&ckpt)]).stdout).unwrap();
    assert_eq!(info["type"], "checkpoint");
    assert_eq!(info["node_count_independent"], true);
    let layers = info["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    // Hidden layer reads 9 input channels into 4; the output layer 4 into 3.
    let expected = [4 * 9 * 4 + 7 * 16 + 4 * 4, 4 * 4 * 3 + 7 * 9 + 4 * 3];
    for (l, want) in layers.iter().zip(expected) {
        assert_eq!(l["parameters"], want);
    }
    assert_eq!(info["total_parameters"], expected.iter().sum::<usize>());
}

#[test]
fn desk_checkpoint_inspects_to_the_known_count() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    small_data(&data, "4");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--t-train", "3"]);
    let out = ok(&["inspect", "--csv", p(&run.join("best.ckpt"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().last().unwrap(), "total,,,,17547");
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multispike"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn idx_images(n: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a small synthetic MNIST-shaped dataset: class `c` lights a block of rows.
fn synthetic_mnist(dir: &Path, n: usize) {
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let c = s % 10;
        labels.push(c as u8);
        for r in (c * 2)..(c * 2 + 4) {
            for col in 4..24 {
                pixels[s * 784 + r * 28 + col] = (150 + (s * 7 + col * 13) % 100) as u8;
            }
        }
    }
    for (img, lbl) in [("train-images-idx3-ubyte", "train-labels-idx1-ubyte"), ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")] {
        fs::write(dir.join(img), idx_images(n, &pixels)).unwrap();
        fs::write(dir.join(lbl), idx_labels(&labels)).unwrap();
    }
}

struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    synthetic_mnist(&data, 60);
    let root = tmp.path().to_path_buf();
    Fixture { _tmp: tmp, data, root }
}

fn train_args<'a>(f: &'a Fixture, out: &'a str, epochs: &'a str) -> Vec<String> {
    [
        "train",
        "--sizes",
        "784,12,10",
        "--batch-size",
        "20",
        "--lr",
        "0.01",
        "--epochs",
        epochs,
        "--data-dir",
        f.data.to_str().unwrap(),
        "--out-dir",
        f.root.join(out).to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_owned(args: &[String]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let f = fixture();
    let o = run_owned(&train_args(&f, "a", "2"));
    assert_ok(&o);
    let csv = fs::read_to_string(f.root.join("a/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch,train_loss,"));
    assert!(lines[1].starts_with("1,"));
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    assert!(f.root.join("a/checkpoint.bin").exists());
    assert!(f.root.join("a/config.toml").exists());

    let ckpt = f.root.join("a/checkpoint.bin");
    let hist = f.root.join("hist.csv");
    let o = run(&["spike-hist", "--checkpoint", ckpt.to_str().unwrap(), "--out", hist.to_str().unwrap()]);
    assert_ok(&o);
    let h = fs::read_to_string(&hist).unwrap();
    assert!(h.starts_with("spikes,count\n"));
    let total: u64 = h.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 60 * 12);

    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture();
    assert_ok(&run_owned(&train_args(&f, "full", "2")));
    assert_ok(&run_owned(&train_args(&f, "part", "1")));
    let mut resume = train_args(&f, "part", "2");
    resume.push("--resume".into());
    resume.push(f.root.join("part/checkpoint.bin").to_str().unwrap().into());
    assert_ok(&run_owned(&resume));
    let a = fs::read_to_string(f.root.join("full/metrics.csv")).unwrap();
    let b = fs::read_to_string(f.root.join("part/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn worker_count_does_not_change_metrics() {
    let f = fixture();
    let mut one = train_args(&f, "w1", "2");
    one.extend(["--workers".into(), "1".into()]);
    let mut three = train_args(&f, "w3", "2");
    three.extend(["--workers".into(), "3".into()]);
    assert_ok(&run_owned(&one));
    assert_ok(&run_owned(&three));
    assert_eq!(
        fs::read(f.root.join("w1/metrics.csv")).unwrap(),
        fs::read(f.root.join("w3/metrics.csv")).unwrap()
    );
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let f = fixture();
    let o = run_owned(&train_args(&f, "z", "0"));
    assert_ok(&o);
    assert!(f.root.join("z/checkpoint.bin").exists());
    let csv = fs::read_to_string(f.root.join("z/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn config_file_round_trips_through_train() {
    let f = fixture();
    assert_ok(&run_owned(&train_args(&f, "c", "1")));
    let cfg = f.root.join("c/config.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("sizes = [784, 12, 10]"));
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", f.root.join("c2").to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(
        fs::read(f.root.join("c/metrics.csv")).unwrap(),
        fs::read(f.root.join("c2/metrics.csv")).unwrap()
    );
}

#[test]
fn distinct_exit_codes() {
    let f = fixture();
    let bad_cfg = run(&["train", "--p", "3", "--data-dir", f.data.to_str().unwrap()]);
    assert_eq!(bad_cfg.status.code(), Some(3));
    let missing = run(&[
        "train",
        "--data-dir",
        f.root.join("nowhere").to_str().unwrap(),
        "--out-dir",
        f.root.join("m").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(4));

    assert_ok(&run_owned(&train_args(&f, "v", "0")));
    let ckpt = f.root.join("v/checkpoint.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8] = 99;
    let bad = f.root.join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 99"));
}

#[test]
fn validation_commands_pass_and_report() {
    let f = fixture();
    let report = f.root.join("grad.json");
    let o = run(&["gradcheck", "--cases", "4", "--report", report.to_str().unwrap()]);
    assert_ok(&o);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["passed"], true);

    let report = f.root.join("oracle.json");
    let o = run(&["oracle-check", "--cases", "6", "--report", report.to_str().unwrap()]);
    assert_ok(&o);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["oracle"]["passed"], true);
    assert_eq!(json["residual"]["passed"], true);
}

#[test]
fn sweep_writes_rows_and_aggregates() {
    let f = fixture();
    let out = f.root.join("sweep");
    let o = run(&[
        "sweep-tau",
        "--taus",
        "0.8",
        "--seeds",
        "0,1",
        "--sizes",
        "784,8,10",
        "--epochs",
        "1",
        "--batch-size",
        "30",
        "--data-dir",
        f.data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("run,0.8,0,"));
    assert!(lines[3].starts_with("aggregate,0.8,,"));
}

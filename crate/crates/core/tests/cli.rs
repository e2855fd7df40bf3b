use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pencil_lab::data::load_dataset;
use pencil_lab::labels::LabelStore;
use pencil_lab::metrics::{parse_metrics_csv, METRICS_HEADER};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pencil-lab"))
        .args(args)
        .env("PENCIL_LAB_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn blobs(&self, samples: usize) -> PathBuf {
        let out = self.path("blobs.csv");
        let n = samples.to_string();
        let o = cli(&["generate", "--out", s(&out), "--samples", &n, "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

const SHORT: &[&str] = &["--epochs", "3,4,3", "--lr3_decay_epochs", "1,2"];

fn train(ws: &Workspace, data: &Path, out: &str, extra: &[&str]) -> Output {
    let out = ws.path(out);
    let mut args = vec!["train", "--data", s(data), "--preset", "sym30", "--out", s(&out)];
    args.extend_from_slice(SHORT);
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn gradcheck_seed_7_passes() {
    let o = cli(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for loss in ["cross_entropy", "kl_label_to_pred", "kl_pred_to_label", "compatibility", "entropy", "pencil_total"] {
        assert!(text.contains(loss), "{text}");
    }
    assert!(text.contains("PASS"));
}

#[test]
fn generate_writes_requested_shape() {
    let ws = Workspace::new();
    let data = ws.blobs(90);
    let ds = load_dataset(&data, None).unwrap();
    assert_eq!((ds.len(), ds.dims(), ds.class_count()), (90, 2, 3));
    assert_eq!(ds.true_labels().unwrap(), ds.noisy_labels());
}

#[test]
fn inject_noise_rewrites_labels() {
    let ws = Workspace::new();
    let data = ws.blobs(3000);
    let out = ws.path("noisy.csv");
    let o = cli(&["inject-noise", "--input", s(&data), "--out", s(&out), "--rate", "0.3", "--kind", "asymmetric-circular", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let ds = load_dataset(&out, None).unwrap();
    let rate = ds.corruption_rate().unwrap();
    assert!((rate - 0.3).abs() < 0.04, "{rate}");
    let truth = ds.true_labels().unwrap();
    for (y, t) in ds.noisy_labels().iter().zip(truth) {
        assert!(y == t || *y == (t + 1) % 3);
    }
}

#[test]
fn inject_noise_bad_rate_is_usage_error() {
    let ws = Workspace::new();
    let data = ws.blobs(30);
    let out = ws.path("noisy.csv");
    let o = cli(&["inject-noise", "--input", s(&data), "--out", s(&out), "--rate", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    let o = cli(&["inject-noise", "--input", "/nonexistent.csv", "--out", s(&out), "--rate", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cli(&["train", "--data", "x.csv"])), 2);
    assert_eq!(code(&cli(&["train", "--data", "x.csv", "--out", "o", "--gamma", "1"])), 2);
    assert_eq!(code(&cli(&["frobnicate"])), 2);
    assert_eq!(code(&cli(&["train", "--data", "/nonexistent.csv", "--out", "/tmp/never"])), 2);

    let ws = Workspace::new();
    let data = ws.blobs(30);
    let o = train(&ws, &data, "o", &["--alpha", "-1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    let cfg = ws.path("bad.cfg");
    fs::write(&cfg, "# comment\nalpha = 0.1\nbogus = 3\n").unwrap();
    let o = cli(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus") && err.contains("line 3"), "{err}");
    assert_eq!(code(&train(&ws, &data, "o", &["--start-phase", "2"])), 2);
}

#[test]
fn runtime_failure_exits_1() {
    let ws = Workspace::new();
    let data = ws.path("broken.csv");
    fs::write(&data, "f0,noisy_label\n1.0,zero\n").unwrap();
    let o = cli(&["train", "--data", s(&data), "--out", s(&ws.path("o"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_all_outputs() {
    let ws = Workspace::new();
    let data = ws.blobs(600);
    let o = train(&ws, &data, "run", &["--dump-distributions"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = ws.path("run");
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER));
    let records = parse_metrics_csv(&metrics).unwrap();
    assert_eq!(records.len(), 10);
    assert_eq!(
        records.iter().map(|r| r.phase).collect::<Vec<_>>(),
        [1, 1, 1, 2, 2, 2, 2, 3, 3, 3]
    );

    let corrected = fs::read_to_string(dir.join("corrected_labels.csv")).unwrap();
    let mut lines = corrected.lines();
    assert_eq!(lines.next(), Some("idx,hard_label,peak_prob"));
    let store = LabelStore::load(dir.join("labels_phase2.csv")).unwrap();
    assert_eq!(lines.count(), store.len());
    assert_eq!(store.len(), 480);
    let dist = fs::read_to_string(dir.join("distributions.csv")).unwrap();
    assert_eq!(dist.lines().next(), Some("idx,p0,p1,p2"));
    for f in ["params_phase1.txt", "params_phase2.txt", "params_final.txt", "config.cfg"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    let e = cli(&["eval", "--params", s(&dir.join("params_final.txt")), "--data", s(&data)]);
    assert_eq!(code(&e), 0);
    let text = String::from_utf8(e.stdout).unwrap();
    assert!(text.contains("acc_true"), "{text}");
}

#[test]
fn same_seed_same_bytes() {
    let ws = Workspace::new();
    let data = ws.blobs(600);
    for run in ["a", "b"] {
        assert_eq!(code(&train(&ws, &data, run, &["--seed", "1"])), 0);
    }
    for f in ["metrics.csv", "corrected_labels.csv", "params_final.txt"] {
        assert_eq!(
            fs::read(ws.path("a").join(f)).unwrap(),
            fs::read(ws.path("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let ws = Workspace::new();
    let data = ws.blobs(600);
    assert_eq!(code(&train(&ws, &data, "one", &[])), 0);
    let out = ws.path("four");
    let mut args = vec!["train", "--data", s(&data), "--preset", "sym30", "--out", s(&out)];
    args.extend_from_slice(SHORT);
    let o = Command::new(env!("CARGO_BIN_EXE_pencil-lab"))
        .args(&args)
        .env("PENCIL_LAB_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for f in ["metrics.csv", "corrected_labels.csv"] {
        assert_eq!(fs::read(ws.path("one").join(f)).unwrap(), fs::read(out.join(f)).unwrap());
    }
}

#[test]
fn phases_resume_from_snapshots() {
    let ws = Workspace::new();
    let data = ws.blobs(600);
    assert_eq!(code(&train(&ws, &data, "full", &[])), 0);
    let full = ws.path("full");

    let p1 = full.join("params_phase1.txt");
    assert_eq!(code(&train(&ws, &data, "from2", &["--start-phase", "2", "--params", s(&p1)])), 0);
    let p2 = full.join("params_phase2.txt");
    let l2 = full.join("labels_phase2.csv");
    assert_eq!(
        code(&train(&ws, &data, "from3", &["--start-phase", "3", "--params", s(&p2), "--labels", s(&l2)])),
        0
    );

    let full_metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let tail = |skip: usize| -> String {
        full_metrics
            .lines()
            .skip(1 + skip)
            .map(|l| format!("{l}\n"))
            .collect()
    };
    let body = |dir: &str| -> String {
        let t = fs::read_to_string(ws.path(dir).join("metrics.csv")).unwrap();
        t.lines().skip(1).map(|l| format!("{l}\n")).collect()
    };
    assert_eq!(body("from2"), tail(3));
    assert_eq!(body("from3"), tail(7));
    for dir in ["from2", "from3"] {
        assert_eq!(
            fs::read(full.join("params_final.txt")).unwrap(),
            fs::read(ws.path(dir).join("params_final.txt")).unwrap()
        );
        assert_eq!(
            fs::read(full.join("corrected_labels.csv")).unwrap(),
            fs::read(ws.path(dir).join("corrected_labels.csv")).unwrap()
        );
    }
}

#[test]
fn baseline_mode_runs() {
    let ws = Workspace::new();
    let data = ws.blobs(300);
    let o = train(&ws, &data, "ce", &["--baseline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records = parse_metrics_csv(&fs::read_to_string(ws.path("ce").join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| r.phase == 1));
    assert_eq!(records[9].lr, 0.03 / 100.0);
}

#[test]
fn every_preset_trains() {
    let ws = Workspace::new();
    let data = ws.blobs(150);
    for (name, _) in pencil_lab::config::PRESETS {
        let out = ws.path(name);
        let mut args = vec!["train", "--data", s(&data), "--preset", name, "--out", s(&out)];
        args.extend_from_slice(&["--epochs", "1,1,1", "--lr3_decay_epochs", ""]);
        let o = cli(&args);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

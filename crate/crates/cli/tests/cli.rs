use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn signspot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signspot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_GEN: [&str; 10] = [
    "--vocab-size", "12",
    "--num-sequences", "50",
    "--seq-windows", "60..80",
    "--filler-signs", "20",
    "--seed", "3",
];

const SHORT_TRAIN: [&str; 6] = ["--epochs", "2", "--lr-decay-epochs", "1", "--batch-size", "8"];

fn gen(dir: &Path) -> Output {
    let mut args = vec!["gen", "--out", s(dir)];
    args.extend(SMALL_GEN);
    signspot(&args)
}

fn train(data: &Path, model: &Path) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(model)];
    args.extend(SHORT_TRAIN);
    signspot(&args)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_byte_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (d1, d2) = (t.path().join("d1"), t.path().join("d2"));
    assert_eq!(code(&gen(&d1)), 0);
    assert_eq!(code(&gen(&d2)), 0);
    let (f1, f2) = (files(&d1), files(&d2));
    assert!(f1.len() > 10);
    assert_eq!(f1.len(), f2.len());
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(a.strip_prefix(&d1).unwrap(), b.strip_prefix(&d2).unwrap());
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
    }

    let (m1, m2) = (t.path().join("m1.bin"), t.path().join("m2.bin"));
    assert_eq!(code(&train(&d1, &m1)), 0);
    assert_eq!(code(&train(&d2, &m2)), 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let log = fs::read_to_string(t.path().join("m1.bin.log.csv")).unwrap();
    assert_eq!(log, fs::read_to_string(t.path().join("m2.bin.log.csv")).unwrap());
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,mean_loss,lr\n"));

    let e1 = signspot(&["eval", "--data", s(&d1), "--model", s(&m1), "--split", "unseen"]);
    let e2 = signspot(&["eval", "--data", s(&d2), "--model", s(&m2), "--split", "unseen"]);
    assert_eq!(code(&e1), 0, "{}", String::from_utf8_lossy(&e1.stderr));
    assert!(!e1.stdout.is_empty());
    assert_eq!(e1.stdout, e2.stdout);
    let report: serde_json::Value = serde_json::from_slice(&e1.stdout).unwrap();
    assert_eq!(report["split"], "unseen");
    assert!(report["per_class"].is_object());
}

#[test]
fn checkpoints_and_applications() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let m = t.path().join("m.bin");
    let ck = t.path().join("ck");
    assert_eq!(code(&gen(&d)), 0);
    let mut args = vec!["train", "--data", s(&d), "--out", s(&m), "--checkpoint-dir", s(&ck)];
    args.extend(SHORT_TRAIN);
    assert_eq!(code(&signspot(&args)), 0);
    assert!(ck.join("epoch001.bin").exists());
    assert!(ck.join("epoch002.bin").exists());
    assert_eq!(fs::read(ck.join("epoch002.bin")).unwrap(), fs::read(&m).unwrap());

    let trace = t.path().join("trace.csv");
    let o = signspot(&[
        "spot", "--data", s(&d), "--model", s(&m), "--seq", "seq0001", "--word", "sign004", "--trace", s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("window_start,variant,similarity\n"));
    let spot: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(spot["word"], "sign004");

    let o = signspot(&["densify", "--data", s(&d), "--model", s(&m), "--seq", "seq0001"]);
    assert_eq!(code(&o), 0);
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!rows.as_array().unwrap().is_empty());

    let o = signspot(&["fauxamis", "--data", s(&d), "--other", s(&d), "--model", s(&m), "--k", "1"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], f[1], "a dictionary is its own nearest neighbour");
    }
}

#[test]
fn bags_dump_is_stable() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    assert_eq!(code(&gen(&d)), 0);
    let args = ["bags-dump", "--data", s(&d), "--batch-size", "4", "--step", "1"];
    let a = signspot(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, signspot(&args).stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("seg-fore ")));
    assert!(text.lines().any(|l| l.starts_with("dict-back ")));
    let wl = signspot(&["bags-dump", "--data", s(&d), "--batch-size", "4", "--mode", "watch-lookup"]);
    let text = String::from_utf8(wl.stdout).unwrap();
    assert!(!text.lines().any(|l| l.starts_with("seg-back ")));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    assert_eq!(code(&gen(&d)), 0);
    let cfg = t.path().join("train.cfg");
    fs::write(&cfg, format!("data = {}\nepochs = 2\nlr-decay-epochs = 1\nbatch_size = 8\ntau = 0.5\n", s(&d))).unwrap();
    let m = t.path().join("m.bin");
    let o = signspot(&["train", "--config", s(&cfg), "--out", s(&m), "--tau", "0.1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("tau = 0.1\n"));
    assert!(err.contains("epochs = 2\n"));

    fs::write(&cfg, "bogus = 1\n").unwrap();
    let o = signspot(&["train", "--config", s(&cfg), "--data", s(&d), "--out", s(&m)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let m = t.path().join("m.bin");
    assert_eq!(code(&signspot(&["frobnicate"])), 1);
    assert_eq!(code(&signspot(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&signspot(&["--help"])), 0);
    assert_eq!(code(&signspot(&["train", "--out", s(&m)])), 1, "missing --data");
    assert_eq!(code(&gen(&d)), 0);
    assert_eq!(code(&signspot(&["train", "--data", s(&d), "--out", s(&m), "--tau", "0"])), 1);
    assert_eq!(code(&signspot(&["train", "--data", s(&d), "--out", s(&m), "--epochs", "5"])), 1, "decay beyond epochs");
    assert_eq!(code(&signspot(&["eval", "--data", s(&t.path().join("none")), "--model", s(&m)])), 2);
    fs::write(&m, b"garbage").unwrap();
    assert_eq!(code(&signspot(&["eval", "--data", s(&d), "--model", s(&m)])), 2);
}

//! Runs the `anatda` binary end to end on a tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const GEN: &str = "seed = 11\nsubjects_per_split = 2\n[counts]\nsource_train = 8\ntarget_train = 8\ntarget_val = 4\ntarget_test = 4\n";
const TRAIN: &str = "epochs = 1\nsubsample_points = 64\nbatch_source = 4\nbatch_target = 4\nramp_epochs = 1\n[widths]\nenc1 = 8\nenc2 = 16\ndec1 = 16\n";

fn anatda(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anatda"))
        .args(args)
        .current_dir(dir)
        .env_remove("ANATDA_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = anatda(args, dir);
    assert!(
        out.status.success(),
        "anatda {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], dir: &Path) -> String {
    let out = anatda(args, dir);
    assert!(!out.status.success(), "anatda {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// A workspace with `gen.toml`, `train.toml` and a generated `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.toml"), GEN).unwrap();
    fs::write(dir.path().join("train.toml"), TRAIN).unwrap();
    ok(&["gen-data", "--config", "gen.toml", "--out", "data"], dir.path());
    dir
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_four_splits_reproducibly() {
    let w = workspace();
    for split in ["source-train", "target-train", "target-val", "target-test"] {
        assert!(w.path().join("data").join(split).is_dir(), "{split}");
    }
    assert_eq!(fs::read_dir(w.path().join("data/target-val")).unwrap().count(), 8);
    ok(&["gen-data", "--config", "gen.toml", "--out", "again", "--threads", "3"], w.path());
    assert_eq!(files(&w.path().join("data")), files(&w.path().join("again")));
    ok(&["gen-data", "--config", "gen.toml", "--out", "other", "--seed", "12"], w.path());
    assert_ne!(files(&w.path().join("data")), files(&w.path().join("other")));
}

#[test]
fn data_root_comes_from_the_environment() {
    let w = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_anatda"))
        .args(["derive-bounds", "--out", "b.toml"])
        .current_dir(w.path())
        .env("ANATDA_DATA_ROOT", w.path().join("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(w.path().join("b.toml")).unwrap(),
        fs::read(w.path().join("data/bounds.toml")).unwrap()
    );
}

#[test]
fn missing_template_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("template = \"nowhere.toml\"\n{GEN}");
    fs::write(dir.path().join("gen.toml"), text).unwrap();
    let err = fails(&["gen-data", "--config", "gen.toml", "--out", "data"], dir.path());
    assert!(err.starts_with("E-PARSE"), "{err}");
    assert!(err.contains("template"), "{err}");
}

#[test]
fn unreadable_inputs_report_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--config", "absent.toml", "--out", "data"], dir.path());
    assert!(err.starts_with("E-IO"), "{err}");
    assert!(err.contains("absent.toml"), "{err}");
}

#[test]
fn bounds_margin_widens_length_intervals() {
    let w = workspace();
    ok(&["derive-bounds", "--data", "data", "--out", "plain.toml"], w.path());
    ok(&["derive-bounds", "--data", "data", "--out", "wide.toml", "--margin", "0.1", "--sym-tol", "0.01"], w.path());
    let load = |f: &str| anatda::skeleton::AnatomicalBounds::load(&w.path().join(f)).unwrap();
    let (plain, wide) = (load("plain.toml"), load("wide.toml"));
    for i in 0..plain.length_lo.len() {
        assert!(wide.length_lo[i] < plain.length_lo[i]);
        assert!(wide.length_hi[i] > plain.length_hi[i]);
    }
    assert!(wide.sym_tol.iter().all(|&t| t == 0.01));
    assert_eq!(wide.angle_lo, plain.angle_lo);
}

#[test]
fn adaptation_requires_bounds() {
    let w = workspace();
    let err = fails(&["adapt-uda", "--data", "data", "--config", "train.toml", "--out", "u.ckpt"], w.path());
    assert!(err.starts_with("E-ARG"), "{err}");
    assert!(err.contains("--bounds"), "{err}");
    assert!(!w.path().join("u.ckpt").exists());
}

#[test]
fn pipeline_runs_and_evaluates_deterministically() {
    let w = workspace();
    let p = w.path();
    ok(&["train-source", "--data", "data", "--config", "train.toml", "--out", "src.ckpt"], p);
    let manifest = fs::read_to_string(p.join("src.ckpt.run.toml")).unwrap();
    assert!(manifest.contains("finished"), "{manifest}");
    assert!(manifest.contains("sha256"), "{manifest}");
    assert_eq!(fs::read_to_string(p.join("src.ckpt.log")).unwrap().lines().count(), 1);

    let bounds = ["--bounds", "data/bounds.toml"];
    let uda = [&["adapt-uda", "--data", "data", "--config", "train.toml", "--out", "uda.ckpt"][..], &bounds].concat();
    ok(&uda, p);

    // a source-free run of zero epochs hands back the pretrained model
    let sfda = [
        &["adapt-sfda", "--data", "data", "--pretrained", "src.ckpt", "--config", "train.toml", "--epochs", "0", "--out", "same.ckpt"][..],
        &bounds,
    ]
    .concat();
    ok(&sfda, p);
    assert_eq!(fs::read(p.join("same.ckpt")).unwrap(), fs::read(p.join("src.ckpt")).unwrap());

    let eval = |out: &str| {
        ok(
            &["eval", "--checkpoint", "uda.ckpt", "--data", "data", "--points", "64", "--val-split", "target-val", "--out", out],
            p,
        )
    };
    let table = eval("r1.txt");
    eval("r2.txt");
    assert!(table.contains("MPJPE") || table.to_lowercase().contains("mpjpe"), "{table}");
    let r1 = fs::read_to_string(p.join("r1.txt")).unwrap();
    assert_eq!(r1, fs::read_to_string(p.join("r2.txt")).unwrap());
    assert!(r1.contains("correlation"), "{r1}");

    ok(&["eval", "--checkpoint", "uda.ckpt", "--data", "data", "--points", "64", "--joints", "head,0", "--out", "sub.txt"], p);
    let sub = fs::read_to_string(p.join("sub.txt")).unwrap();
    assert_ne!(sub, r1);
    let err = fails(&["eval", "--checkpoint", "uda.ckpt", "--data", "data", "--joints", "tail"], p);
    assert!(err.contains("tail"), "{err}");
}

#[test]
fn resume_continues_epoch_numbering() {
    let w = workspace();
    let p = w.path();
    let bounds = "data/bounds.toml";
    ok(&["adapt-uda", "--data", "data", "--config", "train.toml", "--bounds", bounds, "--out", "a.ckpt"], p);
    ok(
        &["adapt-uda", "--data", "data", "--config", "train.toml", "--bounds", bounds, "--epochs", "3", "--resume", "a.ckpt", "--out", "b.ckpt", "--log", "a.ckpt.log"],
        p,
    );
    ok(&["adapt-uda", "--data", "data", "--config", "train.toml", "--bounds", bounds, "--epochs", "3", "--out", "c.ckpt"], p);
    let log = fs::read_to_string(p.join("a.ckpt.log")).unwrap();
    let epochs: Vec<&str> = log.lines().map(|l| l.split_whitespace().nth(1).unwrap_or("")).collect();
    assert_eq!(epochs, ["epoch=1", "epoch=2", "epoch=3"], "{log}");
    assert_eq!(fs::read(p.join("b.ckpt")).unwrap(), fs::read(p.join("c.ckpt")).unwrap());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mdmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdmlp")).args(args).env_remove("MDMLP_DATA").output().expect("run mdmlp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inspect_reports_counts() {
    let o = mdmlp(&["inspect", "--config", "cifar10_paper"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("params=301362 (0.30M)"), "{out}");
    assert!(out.contains("(B, 15, 15, 3, 64)"), "{out}");

    let o = mdmlp(&["inspect", "--config", "cifar10_paper", "--overlap", "4"]);
    assert!(stdout(&o).contains("params=280194"));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let o = mdmlp(&["inspect", "--config", "tiny_synth", "--override", "model.bogus=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.bogus"));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.conf");
    fs::write(&file, "model.dim = 16\ntrain.epochs = many\n").unwrap();
    let o = mdmlp(&["inspect", "--config", path(&file)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("train.epochs") && err.contains("line 2"), "{err}");

    let o = mdmlp(&["inspect", "--config", "cifar10_paper", "--overlap", "3"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = mdmlp(&["inspect", "--config", "no_such_config"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_data_exits_3() {
    let out = tempfile::tempdir().unwrap();
    let o = mdmlp(&["train", "--config", "cifar10_desk", "--out", path(out.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("MDMLP_DATA"));

    let empty = tempfile::tempdir().unwrap();
    let o = mdmlp(&["eval", "--config", "cifar10_desk", "--data", path(empty.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("test_batch.bin"), "{}", stderr(&o));

    let o = mdmlp(&["train", "--config", "flowers102_geometry", "--out", path(out.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4() {
    let out = tempfile::tempdir().unwrap();
    let o = mdmlp(&["train", "--config", "tiny_synth", "--out", path(out.path()), "--override", "train.base_lr=1e30"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn visualize_requires_the_attention_tool() {
    let out = tempfile::tempdir().unwrap();
    let o = mdmlp(&["visualize", "--config", "tiny_synth", "--out", path(out.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.attn_tool"));
}

#[test]
fn train_eval_visualize_round() {
    let out = tempfile::tempdir().unwrap();
    let dir = path(out.path());
    let short = ["--override", "train.max_steps=8", "--override", "model.attn_tool=true"];

    let mut args = vec!["train", "--config", "tiny_synth", "--out", dir];
    args.extend(short);
    let o = mdmlp(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("final step=8"));
    for f in ["config.txt", "metrics.log", "last.ckpt", "best.ckpt"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.path().join("metrics.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("epoch=0 lr="), "{log}");

    // The resolved config replays the run.
    let resolved = out.path().join("config.txt");
    let o = mdmlp(&["inspect", "--config", path(&resolved)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ckpt = out.path().join("last.ckpt");
    let mut args = vec!["eval", "--config", "tiny_synth", "--checkpoint", path(&ckpt)];
    args.extend(short);
    let o = mdmlp(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy=") && stdout(&o).contains("/64)"));

    let maps = out.path().join("maps");
    let mut args = vec![
        "visualize",
        "--config",
        "tiny_synth",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&maps),
        "--images",
        "0,5",
    ];
    args.extend(short);
    let o = mdmlp(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in [0, 5] {
        let pgm = fs::read(maps.join(format!("heatmap_{i:05}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), 13 + 256);
    }
}

#[test]
fn fresh_field_renders_black() {
    let out = tempfile::tempdir().unwrap();
    let o = mdmlp(&[
        "visualize",
        "--config",
        "tiny_synth",
        "--override",
        "model.attn_tool=true",
        "--out",
        path(out.path()),
        "--images",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max|V-1|=0"), "{}", stdout(&o));
    let pgm = fs::read(out.path().join("heatmap_00002.pgm")).unwrap();
    assert!(pgm[13..].iter().all(|&b| b == 0));
}

#[test]
fn bad_image_selection_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let o = mdmlp(&[
        "visualize",
        "--config",
        "tiny_synth",
        "--override",
        "model.attn_tool=true",
        "--out",
        path(out.path()),
        "--images",
        "64",
    ]);
    assert_eq!(code(&o), 2);
}

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zslmetric"))
        .args(args)
        .current_dir(dir)
        .env_remove("ZSLMETRIC_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["selftest"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["train", "--mode", "adapt_adv", "--loss", "triplet", "--data", "synth", "--seed", "7", "--epochs", "2", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("run");
    for f in ["metrics.csv", "model.ckpt", "train_log.csv", "report.json", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_m,l_c,lambda\n"));

    let o = run(&["eval", "--model", "run/model.ckpt", "--data", "synth", "--ks", "1,2", "--out", "eval.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    // A checkpoint checked against a different config is refused.
    std::fs::write(dir.path().join("other.toml"), "seed = 8\n").unwrap();
    let o = run(&["eval", "--model", "run/model.ckpt", "--config", "other.toml"], dir.path());
    assert_eq!(code(&o), 1);

    std::fs::write(dir.path().join("x.txt"), vec!["0.5"; 48].join(",")).unwrap();
    let o = run(&["export-attn", "--model", "run/model.ckpt", "--input", "x.txt", "--out", "attn"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stage0.csv", "stage0.pgm", "stage1.csv", "stage1.pgm"] {
        assert!(dir.path().join("attn").join(f).exists(), "{f}");
    }
}

#[test]
fn same_seed_gives_same_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(&["train", "--epochs", "1", "--seed", "3", "--out", out], dir.path());
        assert_eq!(code(&o), 0);
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_zslmetric"))
        .args(["train", "--epochs", "0", "--out", "r"])
        .current_dir(dir.path())
        .env("ZSLMETRIC_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let cfg = std::fs::read_to_string(dir.path().join("r/config.toml")).unwrap();
    assert!(cfg.contains("seed = 11"));
}

#[test]
fn grid_has_one_row_per_weight_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["grid", "--epochs", "1", "--seeds", "1,2", "--out", "grid.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda0,seed,nmi,r@1,r@2,r@4,r@8,knn_acc"));
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--bogus"], dir.path())), 1);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&run(&["train", "--mode", "nope"], dir.path())), 1);
    assert_eq!(code(&run(&["train", "--loss", "nope"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.toml"), "batch_size = 1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", "bad.toml"], dir.path())), 1);
    assert_eq!(code(&run(&["--help"], dir.path())), 0);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--model", "junk.ckpt"], dir.path())), 2);
    assert_eq!(code(&run(&["train", "--data", "idx:missing.idx,missing.lbl"], dir.path())), 2);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn alignlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
        .env("ALIGN_LAB_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

const SMALL_TOY: [&str; 8] = [
    "--seeds",
    "2",
    "--override",
    "toylm.epochs=2",
    "--override",
    "toylm.train_size=20",
    "--override",
    "toylm.eval_size=5",
];

#[test]
fn frozenlake_writes_artifacts_and_orders() {
    let dir = tempfile::tempdir().unwrap();
    let o = alignlab(dir.path(), &["--methods", "sft,ift,orpo", "--seeds", "2", "frozenlake"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let root = dir.path().join("frozenlake");
    let csv = fs::read_to_string(root.join("runs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("method,seed,mse,coverage,steps"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let config = fs::read_to_string(root.join("config.txt")).unwrap();
    assert!(config.starts_with("# sha256 "));
    for f in ["losses.jsonl", "mse.svg", "tables/oracle.txt", "tables/ift_seed2.txt"] {
        assert!(root.join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("ordering PASS"));
}

#[test]
fn reruns_match_and_never_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--methods", "sft,ift", "--seed", "3", "frozenlake"];
    assert_eq!(code(&alignlab(dir.path(), &args)), 0);
    assert_eq!(code(&alignlab(dir.path(), &args)), 0);
    let root = dir.path().join("frozenlake");
    let first = fs::read(root.join("runs.csv")).unwrap();
    let second = fs::read(root.join("runs.1.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn degenerate_ift_fails_the_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let o = alignlab(
        dir.path(),
        &["--methods", "sft,ift", "--seeds", "1", "--override", "lambda=0", "--override", "propagation=off", "frozenlake"],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ordering FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&alignlab(dir.path(), &["--override", "lambda=1.5", "frozenlake"])), 1);
    assert_eq!(code(&alignlab(dir.path(), &["--override", "nonsense=1", "frozenlake"])), 1);
    assert_eq!(code(&alignlab(dir.path(), &["fly"])), 1);
    assert_eq!(code(&alignlab(dir.path(), &["--config", "/no/such/file", "frozenlake"])), 1);
    assert!(!dir.path().join("frozenlake").exists());
}

#[test]
fn config_file_and_out_dir_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.conf");
    fs::write(&cfg, "[run]\nseeds = 1\n\n[frozenlake]\nmethods = sft\nepochs = 5\n").unwrap();
    let flag_out = dir.path().join("elsewhere");
    let o = alignlab(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--out-dir", flag_out.to_str().unwrap(), "frozenlake"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(flag_out.join("frozenlake/runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("sft,1,"));
    let echo = fs::read_to_string(flag_out.join("frozenlake/config.txt")).unwrap();
    assert!(echo.contains("epochs = 5") || echo.contains("epochs=5"));
}

#[test]
fn toylm_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_TOY.to_vec();
    args.push("toylm");
    let o = alignlab(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let root = dir.path().join("toylm");
    let csv = fs::read_to_string(root.join("runs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("method,seed,exact_match,mean_eval_loss,steps"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    for f in ["corpus/seed1_train.tsv", "corpus/seed2_eval.tsv", "eval_loss.svg", "exact_match.svg"] {
        assert!(root.join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("toy-lm verdict"));

    assert_eq!(code(&alignlab(dir.path(), &["--methods", "sft,ift", "--seeds", "2", "frozenlake"])), 0);
    let o = alignlab(dir.path(), &["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("experiment,method,runs,median,mean"));
    assert_eq!(summary.lines().count(), 1 + 2 + 2);
}

#[test]
fn self_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&alignlab(dir.path(), &["gradcheck", "--fixtures", "3"])), 0);
    assert_eq!(code(&alignlab(dir.path(), &["losscheck", "--cases", "20"])), 0);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
[model]
layers = 1
hidden = 16
heads = 2
max_seq_len = 6
vocab = 8
num_classes = 2

[task]
kind = "parity"
vocab = 8
seq_len = 6
num_classes = 2
train_size = 256
val_size = 64
seed = 4

[train]
epochs = 1
batch_size = 16
seed = 9
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freezetune"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

#[test]
fn bundled_example_parses_and_trains_briefly() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let cfg = repo_file("configs/example.toml");
    // cap the work: the bundled run itself takes several seconds
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[train]", "[train]\nmax_steps = 20");
    let text = text.replace("steps = 1000", "steps = 10");
    let short = tmp.path().join("short.toml");
    fs::write(&short, text).unwrap();
    ok(&[
        "--config",
        s(&short),
        "--out-dir",
        s(&out),
        "--epochs",
        "1",
        "train",
    ]);
    for f in [
        "metrics.csv",
        "schedule.csv",
        "heatmap.csv",
        "memory.csv",
        "summary.json",
        "config.resolved.toml",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 20);
    assert_eq!(summary["pretrain"]["steps"], 10);
    assert_eq!(summary["peak_cached_bytes"], summary["peak_analytic_bytes"]);
}

#[test]
fn resolved_config_echoes_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let out = tmp.path().join("o");
    ok(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--freeze-rate",
        "0.25",
        "--scheduler",
        "random",
        "train",
    ]);
    let echo = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echo.contains("freeze_rate = 0.25"), "{echo}");
    assert!(echo.contains("scheduler = \"random\""), "{echo}");
}

#[test]
fn seed_override_is_deterministic_and_matters() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let schedule = |seed: &str, name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "--config",
            s(&cfg),
            "--out-dir",
            s(&out),
            "--seed",
            seed,
            "--scheduler",
            "random",
            "train",
        ]);
        (
            fs::read_to_string(out.join("schedule.csv")).unwrap(),
            fs::read_to_string(out.join("summary.json")).unwrap(),
        )
    };
    let a = schedule("11", "a");
    let b = schedule("11", "b");
    let c = schedule("12", "c");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn extreme_freezing_rate_completes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let out = tmp.path().join("o");
    ok(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--freeze-rate",
        "0.95",
        "--quant",
        "on",
        "--prune",
        "on",
        "train",
    ]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 256 / 16);
    // 14 layers at F=0.95 leave 13 frozen each iteration once ranked
    let schedule = fs::read_to_string(out.join("schedule.csv")).unwrap();
    let last = schedule
        .lines()
        .filter(|l| l.starts_with("15,"))
        .filter(|l| l.split(',').nth(2) == Some("1"));
    assert_eq!(last.count(), 13);
}

#[test]
fn sweep_writes_one_row_per_scheduler_and_rate() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let out = tmp.path().join("o");
    ok(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "sweep",
        "--rates",
        "0,0.5,0.9",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 9);
    // with nothing frozen every scheduler trains identically
    let unfrozen: Vec<&[&str]> = rows
        .iter()
        .filter(|r| r[1] == "0")
        .map(|r| &r[2..])
        .collect();
    assert_eq!(unfrozen.len(), 3);
    assert!(unfrozen.windows(2).all(|w| w[0] == w[1]), "{csv}");
    assert!(out.join("ils_0.5").join("metrics.csv").is_file());
}

#[test]
fn memory_report_scales_with_batch() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let cfg = repo_file("configs/bert_base_memory.toml");
    let stdout = ok(&["--config", s(&cfg), "--out-dir", s(&out), "memory-report"]);
    assert!(stdout.contains("3.033 GB -> 0.403 GB"), "{stdout}");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("memory_report.json")).unwrap()).unwrap();
    assert_eq!(report["imbalance_ratio"], 4.0);
    let batches = report["batches"].as_array().unwrap();
    let b32 = batches[0]["baseline_bytes"].as_u64().unwrap();
    let b64 = batches[1]["baseline_bytes"].as_u64().unwrap();
    let c32 = batches[0]["compressed_bytes"].as_u64().unwrap();
    let c128 = batches[2]["compressed_bytes"].as_u64().unwrap();
    assert_eq!(b64, 2 * b32);
    assert_eq!(c128, 4 * c32);
    assert!(batches[0]["reduction"].as_f64().unwrap() > 4.0);
    assert_eq!(report["state"]["parameters"], 109_188_098);
}

#[test]
fn memory_report_without_codecs_is_smaller_gain() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let cfg = repo_file("configs/bert_base_memory.toml");
    ok(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--quant",
        "off",
        "--prune",
        "off",
        "memory-report",
    ]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("memory_report.json")).unwrap()).unwrap();
    let r = report["batches"][0]["reduction"].as_f64().unwrap();
    assert!(r > 1.0 && r < 7.5, "{r}");
}

#[test]
fn gradcheck_passes_and_flags_the_broken_fixture() {
    let stdout = ok(&["gradcheck", "--instances", "5"]);
    assert!(stdout.contains("all"), "{stdout}");
    let bad = run(&["gradcheck", "--instances", "5", "--with-corrupted-fixture"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[train]\nepochs = 1\nfreeze_rte = 0.5\n").unwrap();
    let out = run(&["--config", s(&path), "train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_rate_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let out = run(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&tmp.path().join("o")),
        "--freeze-rate",
        "1.5",
        "train",
    ]);
    assert!(!out.status.success());
}

#[test]
fn gen_data_writes_labelled_parity_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(&tmp);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--config", s(&cfg), "--out-dir", s(&a), "gen-data"]);
    ok(&["--config", s(&cfg), "--out-dir", s(&b), "gen-data"]);
    let train = fs::read_to_string(a.join("train.csv")).unwrap();
    assert_eq!(train, fs::read_to_string(b.join("train.csv")).unwrap());
    let mut lines = train.lines();
    assert_eq!(lines.next(), Some("t0,t1,t2,t3,t4,t5,label"));
    let mut rows = 0;
    for line in lines {
        let v: Vec<u32> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let sum: u32 = v[..6].iter().sum();
        assert_eq!(v[6], sum % 2, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 256);
    assert_eq!(
        fs::read_to_string(a.join("val.csv"))
            .unwrap()
            .lines()
            .count(),
        65
    );
}

#[test]
fn thread_cap_is_honoured_and_validated() {
    let good = bin()
        .env("FREEZETUNE_THREADS", "1")
        .args(["gradcheck", "--instances", "1"])
        .output()
        .unwrap();
    assert!(good.status.success());
    let bad = bin()
        .env("FREEZETUNE_THREADS", "many")
        .args(["gradcheck", "--instances", "1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FREEZETUNE_THREADS"));
}

use std::path::Path;
use std::process::{Command, Output};

fn dfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfc")).args(args).output().expect("run dfc")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "env = chain
dataset_size = 300
hidden = 8
m = 4
batch_size = 8
offline_steps = 20
online_steps = 10
eval_interval = 10
eval_episodes = 2
oracle_rollouts = 50
";

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn gen_data_train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let out = dir.path().display().to_string();
    let common = ["--config", conf.as_str(), "--out-dir", out.as_str()];

    ok(dfc(&[&["gen-data"][..], &common].concat()));
    assert!(dir.path().join("chain.dataset").exists());

    let text = ok(dfc(&[&["train", "--seed", "3", "--variant", "dc"][..], &common].concat()));
    assert!(text.contains("final score"), "{text}");
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    let archived = std::fs::read_to_string(dir.path().join("config.conf")).unwrap();
    assert!(archived.contains("variant = dc") && archived.contains("seed = 3"));

    ok(dfc(&[&["eval", "--episodes", "3"][..], &common].concat()));
    assert_eq!(std::fs::read_to_string(dir.path().join("eval.csv")).unwrap().lines().count(), 4);

    let plots = ok(dfc(&[&["plot"][..], &common].concat()));
    assert!(plots.lines().any(|l| l.ends_with("metrics_eval_success_rate.svg")), "{plots}");
}

#[test]
fn oracle_check_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let out = dir.path().display().to_string();
    let text = ok(dfc(&[
        "oracle-check",
        "--config",
        &conf,
        "--out-dir",
        &out,
        "--policy",
        "risky",
        "--epochs",
        "2,4",
    ]));
    assert!(text.contains("worst final W1"), "{text}");
    let w1 = std::fs::read_to_string(dir.path().join("chain_w1.csv")).unwrap();
    assert_eq!(w1.lines().count(), 3);
    assert!(dir.path().join("chain_quantiles.csv").exists());
}

#[test]
fn missing_dataset_and_bad_flags_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let out = dir.path().display().to_string();
    let r = dfc(&["train", "--config", &conf, "--out-dir", &out]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("gen-data"));

    let r = dfc(&["train", "--variant", "nope"]);
    assert!(!r.status.success());

    std::fs::write(dir.path().join("bad.conf"), "m = 4\nkappa = soft\n").unwrap();
    let bad = dir.path().join("bad.conf").display().to_string();
    let r = dfc(&["gen-data", "--config", &bad, "--out-dir", &out]);
    assert!(!r.status.success());
    assert!(
        String::from_utf8_lossy(&r.stderr).contains(":2:"),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
}

#[test]
fn presets_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let cfg = dfc_core::harness::AgentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert_eq!(n, 3);
}

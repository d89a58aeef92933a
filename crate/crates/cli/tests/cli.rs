use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "n_train": 64,
  "n_eval_histories": 4,
  "ctf_samples": 256,
  "seeds": [0],
  "model": {
    "encoder_width": 4,
    "gru_hidden": 4,
    "decoder_hidden": 4,
    "flow_depth": 1,
    "flow_hidden": 3,
    "batch_size": 32,
    "epochs": 2
  }
}"#;

fn tncm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tncm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_deterministic_csv() {
    let (dir, cfg) = setup(TINY);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = tncm(&["simulate", "--config", s(&cfg), "--out", s(out), "--n", "7", "--len", "10"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("X: mean"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 7 * 10 + 1);
    assert_eq!(text.lines().next().unwrap(), "sequence,t,X,Y");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("c.csv");
    tncm(&["simulate", "--config", s(&cfg), "--out", s(&c), "--n", "7", "--seed", "1"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let o = tncm(&["simulate", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.json"));

    let (_dir, cfg) = setup(r#"{"n_trian": 5}"#);
    let o = tncm(&["simulate", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_trian"));

    let o = tncm(&["simulate", "--n", "many"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unwritable_output_exits_3() {
    let (dir, cfg) = setup(TINY);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = tncm(&["simulate", "--config", s(&cfg), "--out", s(&blocker.join("data.csv"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_then_query() {
    let (dir, cfg) = setup(TINY);
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let o = tncm(&["train", "--config", s(&cfg), "--out", s(&ckpt), "--log", s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,total,reconstruction,kl");
    assert_eq!(text.lines().count(), 3);

    // Identical inputs reproduce the log and checkpoint.
    let ckpt2 = dir.path().join("m2.ckpt");
    let log2 = dir.path().join("log2.csv");
    tncm(&["train", "--config", s(&cfg), "--out", s(&ckpt2), "--log", s(&log2)]);
    assert_eq!(fs::read(&log).unwrap(), fs::read(&log2).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    for (iv, thr) in [("X=0@4", "0"), ("X=-2@4", "2")] {
        let csv = dir.path().join("p.csv");
        let o = tncm(&[
            "ctf", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--do", iv, "--target", "Y",
            "--threshold", thr, "--horizon", "5", "--samples", "200", "--csv", s(&csv),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let lines: Vec<_> = stdout(&o).lines().map(str::to_owned).collect();
        assert_eq!(lines.len(), 5, "{lines:?}");
        assert!(lines[0].starts_with("k=1") && lines[0].contains('±'));
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
    }

    // A history read from CSV.
    let data = dir.path().join("d.csv");
    tncm(&["simulate", "--config", s(&cfg), "--out", s(&data), "--n", "3"]);
    let o = tncm(&[
        "ctf", "--checkpoint", s(&ckpt), "--do", "X=1@2", "--target", "Y", "--threshold", "-0.5",
        "--horizon", "3", "--samples", "50", "--data", s(&data), "--sequence", "2", "--direction", "less",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(stdout(&o).contains("< -0.5"));

    let o = tncm(&["ctf", "--checkpoint", s(&ckpt), "--do", "X=@4", "--target", "Y", "--threshold", "0", "--horizon", "5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = tncm(&["ctf", "--checkpoint", s(&ckpt), "--do", "X=0@4", "--target", "Y", "--threshold", "0", "--horizon", "6"]);
    assert_eq!(code(&o), 2);

    let o = tncm(&["ctf", "--checkpoint", s(&dir.path().join("missing")), "--do", "X=0@4", "--target", "Y", "--threshold", "0", "--horizon", "1"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn beta_zero_total_equals_reconstruction() {
    let (dir, cfg) = setup(TINY);
    let log = dir.path().join("log.csv");
    let o = tncm(&["train", "--config", s(&cfg), "--beta", "0", "--out", s(&dir.path().join("m")), "--log", s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in fs::read_to_string(&log).unwrap().lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[1], f[2]);
        assert!(f[3] != 0.0);
    }
}

#[test]
fn divergence_exits_4() {
    let config = TINY.replace("\"epochs\": 2", "\"epochs\": 3, \"optimizer\": {\"learning_rate\": 1e300}");
    let (dir, cfg) = setup(&config);
    let o = tncm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn oracle_selftest_reproduce() {
    let config = TINY.replace("\"ctf_samples\": 256", "\"ctf_samples\": 40000");
    let (dir, cfg) = setup(&config);
    let out = dir.path().join("out");
    let o = tncm(&["reproduce", "--config", s(&cfg), "--experiment", "all", "--oracle-selftest", "--output-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    for name in ["exp1-selftest", "exp2-selftest"] {
        assert!(out.join(format!("{name}_curves.csv")).exists());
        assert!(out.join(format!("{name}_curves.svg")).exists());
        assert!(out.join(format!("{name}_table.txt")).exists());
    }
    assert!(stdout(&o).contains("mean L1"));
}

#[test]
fn untrained_reproduce_fails_tolerance_with_report() {
    let config = TINY.replace("\"epochs\": 2", "\"epochs\": 0");
    let (dir, cfg) = setup(&config);
    let out = dir.path().join("out");
    let o = tncm(&["reproduce", "--config", s(&cfg), "--experiment", "1", "--output-dir", s(&out)]);
    assert_eq!(code(&o), 5, "{}{}", stdout(&o), stderr(&o));
    assert!(out.join("exp1_curves.csv").exists());
}

#[test]
fn help_lists_flags_with_defaults() {
    for (cmd, flags) in [
        ("simulate", &["--config", "--seed", "--output-dir", "--out", "--n", "--len"][..]),
        ("train", &["--data", "--out", "--log", "--beta", "--epochs"][..]),
        ("ctf", &["--checkpoint", "--do", "--target", "--threshold", "--horizon", "--samples", "--direction", "--csv"][..]),
        ("reproduce", &["--experiment", "--oracle-selftest"][..]),
    ] {
        let o = tncm(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
        assert!(text.contains("[default"), "{cmd} help lacks defaults");
    }
}

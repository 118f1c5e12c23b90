use std::path::Path;
use std::process::{Command, Output};

fn fewmax(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewmax"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewmax(&["--help"], dir.path());
    assert!(out.status.success());
    for cmd in ["pretrain", "adapt", "eval", "report", "fixture"] {
        assert!(stdout(&out).contains(cmd), "missing {cmd}");
    }
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewmax(&["adapt", "--config", "c.toml", "--method", "best"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[optim]\nlr = -1.0\n").unwrap();
    let out = fewmax(&["pretrain", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_run_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewmax(&["eval", "--run", "nowhere", "--energy"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn fixture_pretrain_adapt_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let out = fewmax(&["fixture", "--kind", "image", "--out", "fx"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = stdout(&out).trim().to_string();
    assert!(Path::new(&config).is_file() || cwd.join(&config).is_file());

    let out = fewmax(&["pretrain", "--config", &config, "--epochs", "1", "--output", "anchor"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let anchor = stdout(&out).trim().to_string();

    let mut runs = Vec::new();
    for method in ["finetune", "few_max"] {
        let out = fewmax(
            &[
                "adapt", "--config", &config, "--method", method, "--epochs", "1", "--anchor", &anchor, "--output", method,
            ],
            cwd,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = fewmax(&["eval", "--run", method, "--energy"], cwd);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        for key in ["e0", "e1", "e2"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key}\t"))), "{text}");
        }
        runs.push(method);
    }

    let mut args = vec!["report", "--csv"];
    args.extend(&runs);
    let out = fewmax(&args, cwd);
    assert!(out.status.success());
    let csv = stdout(&out);
    assert!(csv.starts_with("method,seeds,e0_mean"));
    assert_eq!(csv.lines().count(), 3);
}

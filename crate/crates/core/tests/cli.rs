use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "train_sequences=4",
    "--set",
    "val_sequences=2",
    "--set",
    "batch_size=2",
    "--set",
    "regressor_hidden=32",
];

fn hmrvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmrvit")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hmrvit(&with_small(&["train", "--epochs", "0", "--out", path(&out)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("epoch,step,"));
    assert!(out.join("checkpoint_last").is_dir());
    assert!(out.join("eval.csv").is_file());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = hmrvit(&with_small(&["train", "--epochs", "1", "--seed", "3", "--out", path(&a)]));
    assert!(o.status.success());
    let echoed = String::from_utf8(o.stdout).unwrap();
    let saved = std::fs::read_to_string(a.join("config.json")).unwrap();
    assert!(echoed.starts_with(&saved));

    let b = dir.path().join("b");
    let cfg = a.join("config.json");
    let o = hmrvit(&["train", "--config", path(&cfg), "--out", path(&b)]);
    assert!(o.status.success());
    for f in ["config.json", "metrics.csv", "eval.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let o = hmrvit(&["count-params", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = hmrvit(&["count-params", "--set", "patch_t=4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hmrvit(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = hmrvit(&["eval", "--checkpoint", path(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let o = hmrvit(&with_small(&["generate-data", "--out", path(&gen)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = gen.join("dataset");

    let run = dir.path().join("run");
    let o = hmrvit(&with_small(&["train", "--epochs", "1", "--data", path(&data), "--out", path(&run)]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ev = dir.path().join("ev");
    let o = hmrvit(&[
        "eval",
        "--checkpoint",
        path(&run.join("checkpoint_last")),
        "--data",
        path(&data),
        "--out",
        path(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "config_id,seed,pve_mm,mpjpe_mm,pa_mpjpe_mm,n");
    assert_eq!(lines[1].split(',').count(), 6);
    assert!(lines[1].ends_with(",2"));
}

#[test]
fn inspect_crm_exports_task_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("crm");
    let o = hmrvit(&["inspect-crm", "--channels", "6", "--steps", "300", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("perm_distance"));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("crm_final") && n.ends_with(".csv")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("crm_final") && n.ends_with(".pgm")), "{names:?}");
}

#[test]
fn count_params_lists_every_variant() {
    let o = hmrvit(&["count-params"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for v in ["baseline_naive", "hmrvit_nocrm", "hmrvit_full"] {
        let line = text.lines().find(|l| l.starts_with(&format!("{v},"))).unwrap();
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], cols[2]);
    }
}

#[test]
fn gradcheck_command_passes_on_small_model() {
    let o = hmrvit(&with_small(&["gradcheck", "--coords", "3"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel err"));
}

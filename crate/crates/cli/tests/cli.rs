use std::path::Path;
use std::process::{Command, Output};

fn fpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpl")).current_dir(dir).env_remove("FPL_THREADS").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fpl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--d", "5", "--n", "4", "--seed", "7", "--out", "pack.fpk"]);
    let text = ok(dir.path(), &["inspect", "pack.fpk"]);
    assert!(text.lines().any(|l| l == "D=5"), "{text}");
    assert!(text.lines().any(|l| l == "N=4"), "{text}");
    assert!(text.contains("dims H=1 W=1 C=8 C_t=16"), "{text}");
}

#[test]
fn train_writes_snapshot_beside_pack() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--d", "3", "--n", "2", "--out", "pack.fpk"]);
    let log = ok(dir.path(), &["train", "--pack", "pack.fpk", "--epochs", "20"]);
    assert_eq!(log.lines().count(), 20);
    let state = json(&dir.path().join("pack.state.json"));
    assert_eq!(state["history"].as_array().unwrap().len(), 20);
    assert!(state["mu"].is_number() && state["epsilon"].is_number());

    // identical inputs give an identical snapshot
    let first = std::fs::read(dir.path().join("pack.state.json")).unwrap();
    ok(dir.path(), &["train", "--pack", "pack.fpk", "--epochs", "20", "--threads", "1"]);
    assert_eq!(std::fs::read(dir.path().join("pack.state.json")).unwrap(), first);
}

#[test]
fn fusion_off_matches_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--d", "4", "--n", "3", "--seed", "2", "--out", "pack.fpk"]);
    ok(dir.path(), &["train", "--pack", "pack.fpk", "--epochs", "2", "--out", "state.json"]);
    ok(dir.path(), &["eval", "--pack", "pack.fpk", "--state", "state.json", "--eta", "0", "--out", "off.json"]);
    ok(dir.path(), &["eval", "--pack", "pack.fpk", "--method", "clip", "--out", "clip.json"]);
    let (off, clip) = (json(&dir.path().join("off.json")), json(&dir.path().join("clip.json")));
    assert_eq!(off["overall_accuracy"], clip["overall_accuracy"]);
    assert_eq!(off["per_class_accuracy"], clip["per_class_accuracy"]);
    assert_eq!(off["pack_hash"], clip["pack_hash"]);
    assert_eq!(off["method"], "fpl");
    assert_eq!(clip["method"], "clip_zero_shot");
}

#[test]
fn eval_reports_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "pack.fpk"]);
    ok(dir.path(), &["train", "--pack", "pack.fpk", "--epochs", "1", "--no-po", "--fixed-delta"]);
    let state = json(&dir.path().join("pack.state.json"));
    assert_eq!(state["mu"], 0.0);
    assert_eq!(state["ablation"]["po_off"], true);

    let report: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["eval", "--pack", "pack.fpk", "--method", "ncm"])).unwrap();
    assert_eq!(report["method"], "nearest_class_mean");
    assert_eq!(report["split"], "test");
    assert_eq!(report["pack_path"], "pack.fpk");

    let sweep = ok(dir.path(), &["eval", "--pack", "pack.fpk", "--state", "pack.state.json", "--shift-noise", "0,1"]);
    let sweep: Vec<serde_json::Value> = serde_json::from_str(&sweep).unwrap();
    let roles: Vec<&str> = sweep.iter().map(|r| r["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["source", "target", "target", "target_average"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| fpl(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--out", "p.fpk", "--bogus"]), 1);
    assert_eq!(code(&["synth", "--out", "p.fpk", "--d", "0"]), 1);
    assert_eq!(code(&["eval", "--pack", "p.fpk"]), 2, "missing pack file is a data error");
    assert_eq!(code(&["synth", "--out", "p.fpk"]), 0);
    assert_eq!(code(&["eval", "--pack", "p.fpk"]), 1, "fpl without --state");
    assert_eq!(code(&["train", "--pack", "p.fpk", "--batch-size", "0"]), 1);

    std::fs::write(dir.path().join("bad.fpk"), b"XXXXnot a pack at all").unwrap();
    let out = fpl(dir.path(), &["inspect", "bad.fpk"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn thread_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "p.fpk"]);
    let run = |v: &str| Command::new(env!("CARGO_BIN_EXE_fpl")).current_dir(dir.path()).env("FPL_THREADS", v).args(["inspect", "p.fpk"]).output().unwrap().status;
    assert!(run("2").success());
    assert_eq!(run("lots").code(), Some(1));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn echo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echo")).args(args).output().expect("spawn echo")
}

fn echo_env(args: &[&str], workers: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echo")).args(args).env("ECHO_NUM_WORKERS", workers).output().expect("spawn echo")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &[&str] = &["--set", "model.dim=8", "--set", "model.blocks=1", "--set", "model.time_dim=8", "--set", "train.stage1.batch=2", "--set", "train.stage2.batch=2", "--set", "train.stage2.subset=1"];

fn synth(dir: &Path, n: &str, windows: &str, seed: &str) {
    ok(&echo(&["synth", "--out", &s(dir), "--n", n, "--windows", windows, "--seed", seed]));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(echo(&["--help"]).status.code(), Some(0));
    assert_eq!(echo(&["--version"]).status.code(), Some(0));
    assert_eq!(echo(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_usage_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = echo(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = echo(&["synth", "--out", &s(tmp.path()), "--set", "synth.nope=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("synth.nope"), "{}", stderr(&out));
    let out = echo(&["synth", "--out", &s(tmp.path()), "--set", "synth.rho=abc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("synth.rho"), "{}", stderr(&out));
    let out = echo(&["synth", "--out", &s(tmp.path()), "--set", "synth.rho=1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "1", "1");
    let manifest = s(&data.join("manifest.txt"));
    let out = echo(&["train", "--stage", "2", "--data", &manifest, "--out", &s(&tmp.path().join("s2"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stage1-ckpt"), "{}", stderr(&out));
    let out = echo(&["train", "--stage", "2", "--data", &manifest, "--stage1-ckpt", &s(&tmp.path().join("missing")), "--out", &s(&tmp.path().join("s2"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_replays_from_its_snapshot() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "3", "2", "11");
    synth(&b, "3", "2", "11");
    assert_eq!(snapshot(&a), snapshot(&b));
    ok(&echo(&["synth", "--config", &s(&a.join("resolved.cfg")), "--out", &s(&c)]));
    assert_eq!(snapshot(&a), snapshot(&c));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 6);
    assert!(summary["mirror_pcc"].as_f64().unwrap() > 0.8);
    let d = tmp.path().join("d");
    synth(&d, "3", "2", "12");
    assert_ne!(snapshot(&a), snapshot(&d));
}

#[test]
fn truncated_sample_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", "1", "1");
    let first = fs::read_to_string(data.join("manifest.txt")).unwrap().lines().next().unwrap().to_string();
    let path = data.join(first);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let out = echo(&["train", "--data", &s(&data.join("manifest.txt")), "--out", &s(&tmp.path().join("s1")), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_replays_bit_identically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "2", "5");
    let manifest = s(&data.join("manifest.txt"));
    let run = |tag: &str, workers: &str| -> PathBuf {
        let root = tmp.path().join(tag);
        let (s1, s2, gen, ev) = (root.join("s1"), root.join("s2"), root.join("gen"), root.join("eval"));
        let mut a = vec!["train", "--data", &manifest, "--out"];
        let s1s = s(&s1);
        a.push(&s1s);
        a.extend_from_slice(&["--steps", "2", "--seed", "3"]);
        a.extend_from_slice(TINY);
        ok(&echo_env(&a, workers));
        let s2s = s(&s2);
        let mut a = vec!["train", "--stage", "2", "--data", &manifest, "--stage1-ckpt", &s1s, "--out", &s2s, "--steps", "2", "--seed", "4"];
        a.extend_from_slice(TINY);
        ok(&echo_env(&a, workers));
        ok(&echo_env(&["generate", "--ckpt", &s2s, "--data", &manifest, "--out", &s(&gen), "--chain", "--n-steps", "3", "--seed", "9"], workers));
        let out = echo_env(&["evaluate", "--manifest", &s(&gen.join("eval_manifest.txt")), "--out", &s(&ev), "--oracle", "--set", "evaluate.restarts=3"], workers);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("oracle cross-check: all fields agree"));
        root
    };
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p.file_name().unwrap() != "train_log.jsonl").collect()
    };
    // Same output paths, different worker counts.
    let a = run("run", "1");
    let first = strip(snapshot(&a));
    fs::remove_dir_all(&a).unwrap();
    let a = run("run", "2");
    assert_eq!(first, strip(snapshot(&a)));

    // Replaying a stage from its own snapshot reproduces its outputs.
    let replay = tmp.path().join("replay");
    ok(&echo(&["train", "--config", &s(&a.join("s2/resolved.cfg")), "--out", &s(&replay)]));
    assert_eq!(fs::read(a.join("s2/model.echo")).unwrap(), fs::read(replay.join("model.echo")).unwrap());
    assert_eq!(fs::read(a.join("s2/adapters.echo")).unwrap(), fs::read(replay.join("adapters.echo")).unwrap());

    let log = fs::read_to_string(a.join("s2/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["align"], 0.0);

    let eval_manifest = fs::read_to_string(a.join("gen/eval_manifest.txt")).unwrap();
    assert_eq!(eval_manifest.lines().count(), 4);
    let meta: Value = serde_json::from_str(&fs::read_to_string(a.join("gen/clips/000000_001.json")).unwrap()).unwrap();
    assert_eq!(meta["prev_source"], "generated:0");
    let meta: Value = serde_json::from_str(&fs::read_to_string(a.join("gen/clips/000000_000.json")).unwrap()).unwrap();
    assert_eq!(meta["prev_source"], "ground-truth");
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["mse_exp"].as_f64().unwrap() > 0.0);
    assert_eq!(report["sequences"].as_array().unwrap().len(), 4);
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3", "1", "8");
    let s1 = tmp.path().join("s1");
    let manifest = s(&data.join("manifest.txt"));
    let mut a = vec!["train", "--data", &manifest, "--steps", "1", "--out"];
    let s1s = s(&s1);
    a.push(&s1s);
    a.extend_from_slice(TINY);
    ok(&echo(&a));
    let gen = tmp.path().join("gen");
    ok(&echo(&["generate", "--ckpt", &s1s, "--data", &manifest, "--out", &s(&gen), "--n-steps", "1"]));
    let lines: String = fs::read_to_string(gen.join("eval_manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let p: Vec<&str> = l.split_whitespace().collect();
            format!("{} {} {}\n", p[1], p[1], p[2])
        })
        .collect();
    let self_manifest = gen.join("self.txt");
    fs::write(&self_manifest, lines).unwrap();
    let ev = tmp.path().join("eval");
    ok(&echo(&["evaluate", "--manifest", &s(&self_manifest), "--out", &s(&ev), "--oracle", "--set", "evaluate.restarts=2"]));
    let r: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["mse_exp"], 0.0);
    assert_eq!(r["mse_pose"], 0.0);
    assert_eq!(r["rpcc"], 0.0);
    assert!(r["fd_exp"].as_f64().unwrap().abs() < 1e-6);
    assert!(r["fd_pose"].as_f64().unwrap().abs() < 1e-6);
    assert!(fs::read_to_string(ev.join("report.txt")).unwrap().contains("sid_sum"));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let out = echo(&["gradcheck", "--out", &s(&tmp.path().join("ok"))]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    for op in ["scan_layer", "sdcm_forward", "generator_forward", "hfa_loss"] {
        assert!(table.contains(op), "{table}");
    }
    let out = echo(&["gradcheck", "--out", &s(&tmp.path().join("bad")), "--inject-fault", "spatial_gate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("spatial_gate"));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("bad/gradcheck.json")).unwrap()).unwrap();
    let failed: Vec<&str> = report.as_array().unwrap().iter().filter(|r| r["passed"] == false).map(|r| r["op"].as_str().unwrap()).collect();
    assert_eq!(failed, ["spatial_gate"]);
    let out = echo(&["gradcheck", "--out", &s(&tmp.path().join("bad2")), "--inject-fault", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

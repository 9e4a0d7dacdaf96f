use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
d_model = 8
blocks = 1
heads = 2
d_text = 8
pretrain_steps = 2
stage_steps = 2
batch_size = 2
log_every = 1
sample_steps = 2
eval_seeds = 0
eval_per_level = 1
calibration_scenes = 60
dataset_scenes = 12
";

fn muse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse")).args(args).env("MUSE_THREADS", "1").output().expect("muse runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.txt");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

fn last_json_line(bytes: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(bytes);
    serde_json::from_str(text.lines().last().expect("stderr has a report")).unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_prints_the_error() {
    let o = muse(&["gradcheck"]);
    ok(&o);
    let out = String::from_utf8(o.stdout).unwrap();
    let line = out.lines().find(|l| l.starts_with("max rel. error")).expect("summary line");
    let v: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(v < 1e-3, "{line}");
}

#[test]
fn sampling_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&muse(&["sample", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]));
        bytes.push(std::fs::read(out.join("sample_7.ppm")).unwrap());
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sample_7.json")).unwrap()).unwrap();
        assert_eq!(side["seed"], 7);
        assert!(side["subjects"].as_array().unwrap().len() >= 2);
        assert!(out.join("config.txt").exists());
    }
    assert!(bytes[0].starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn scale_ablation_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("scale");
    ok(&muse(&["ablate", "--config", &cfg, "--suite", "scale", "--values", "0.6,0.8,1.0", "--out", out.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ablate_scale.json")).unwrap()).unwrap();
    let labels: Vec<&str> = v["reports"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["lambda=0.6", "lambda=0.8", "lambda=1"]);
    let csv = std::fs::read_to_string(out.join("ablate_scale.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn staged_pipeline_runs_from_dataset_to_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    ok(&muse(&["dataset", "--config", &cfg, "--out", o]));
    let ds = out.join("dataset.museds");
    assert_eq!(&std::fs::read(&ds).unwrap()[..7], b"MUSEDS1");
    let set_ds = format!("dataset={}", ds.display());
    ok(&muse(&["pretrain", "--config", &cfg, "--out", o, "--set", &set_ds]));
    let base = out.join("base.ckpt");
    ok(&muse(&["train", "--config", &cfg, "--out", o, "--checkpoint", base.to_str().unwrap(), "--stage", "1", "--strategy", "two_stage"]));
    let s1 = out.join("two_stage_stage1.ckpt");
    ok(&muse(&["train", "--config", &cfg, "--out", o, "--checkpoint", s1.to_str().unwrap(), "--stage", "2", "--strategy", "two_stage"]));
    let s2 = out.join("two_stage_stage2.ckpt");
    ok(&muse(&["eval", "--config", &cfg, "--out", o, "--checkpoint", s2.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0]));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].is_number()));
}

#[test]
fn failures_emit_a_machine_readable_report() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = muse(&["eval", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = last_json_line(&o.stderr);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("no_such_key"));

    let o = muse(&["train", "--config", &small_config(dir.path()), "--out", dir.path().to_str().unwrap(), "--stage", "2", "--strategy", "single_stage", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));

    let o = muse(&["sample", "--checkpoint", "/nonexistent/x.ckpt", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = last_json_line(&o.stderr);
    assert_eq!(err["error"]["kind"], "io");

    let o = muse(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

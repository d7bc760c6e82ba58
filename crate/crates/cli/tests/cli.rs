use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reid-audit"));
    cmd.env_remove("REID_AUDIT_WORKERS");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn reid-audit");
    assert!(
        out.status.success(),
        "failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn gen(dir: &Path, mode: &str) {
    run(bin()
        .args(["--seed", "3", "--out"])
        .arg(dir)
        .args(["gen-synth", "--identities", "60", "--frames", "6", "--dimension", "8", "--mode", mode]));
}

fn audit_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "train": dir.join("train.emb1"),
        "test": dir.join("test.emb1"),
        "synthetic": dir.join("synthetic.emb1"),
        "out_dir": out_dir,
        "min_frames": 6,
        "max_offset": 5,
        "n_resamples": 200,
    });
    let path = dir.join("audit.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn help_lists_exit_codes() {
    let out = run(bin().arg("--help"));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Exit codes"));
    assert!(text.contains("REID_AUDIT_WORKERS"));
}

#[test]
fn gen_synth_then_audit() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "copy");
    let out_dir = tmp.path().join("bundle");
    let cfg = audit_config(tmp.path(), &out_dir);
    let out = run(bin().args(["--workers", "1", "audit", "--config"]).arg(&cfg));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["flagged"], summary["n_synthetic"]);

    let manifest: Value = serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 9);
    for a in artifacts {
        assert!(out_dir.join(a["name"].as_str().unwrap()).is_file());
    }
    assert_eq!(manifest["config"]["workers"], 1);
}

#[test]
fn env_workers_overrides_flag() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "resample");
    let out_dir = tmp.path().join("bundle");
    let cfg = audit_config(tmp.path(), &out_dir);
    run(bin()
        .env("REID_AUDIT_WORKERS", "2")
        .args(["--workers", "1", "audit", "--config"])
        .arg(&cfg));
    let manifest: Value = serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["workers"], 2);

    let out = bin().env("REID_AUDIT_WORKERS", "many").arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin()
        .env("REID_AUDIT_WORKERS", "many")
        .args(["audit", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["class"], "config");
}

#[test]
fn missing_synthetic_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "resample");
    fs::remove_file(tmp.path().join("synthetic.emb1")).unwrap();
    let out_dir = tmp.path().join("bundle");
    let cfg = audit_config(tmp.path(), &out_dir);
    let out = bin().args(["audit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert!(err["path"].as_str().unwrap().ends_with("synthetic.emb1"), "{err}");
    assert_eq!(err["exit_code"], 2);
    let leftovers = fs::read_dir(&out_dir).map(|d| d.count()).unwrap_or(0);
    assert_eq!(leftovers, 0);
}

#[test]
fn corrupt_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.emb1");
    fs::write(&bad, b"EMB1\x00\x01garbage").unwrap();
    let out = bin().args(["consistency", "--data"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["class"], "data");
}

#[test]
fn stepwise_pipeline_on_copies() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "copy");
    let pmax = d.join("pmax.csv");
    let test_pmax = d.join("test_pmax.csv");
    let threshold = d.join("threshold.json");
    let data = |name: &str| d.join(format!("{name}.emb1"));

    run(bin()
        .arg("--out")
        .arg(&test_pmax)
        .args(["pmax", "--query-split", "test", "--queries"])
        .arg(data("test"))
        .arg("--reference")
        .arg(data("train")));
    run(bin()
        .arg("--out")
        .arg(&pmax)
        .args(["pmax", "--queries"])
        .arg(data("synthetic"))
        .arg("--reference")
        .arg(data("train")));
    run(bin().arg("--out").arg(&threshold).args(["calibrate", "--pmax"]).arg(&test_pmax));

    let t: Value = serde_json::from_slice(&fs::read(&threshold).unwrap()).unwrap();
    assert_eq!(t["percentile"], 95.0);

    let out = run(bin()
        .args(["filter", "--threshold"])
        .arg(&threshold)
        .arg("--pmax")
        .arg(&pmax));
    let filtered: Value = serde_json::from_slice(&out.stdout).unwrap();
    let n_synth = fs::read_to_string(&pmax).unwrap().lines().count() - 1;
    assert_eq!(filtered["flagged_count"].as_u64().unwrap() as usize, n_synth);

    let freq = d.join("freq.csv");
    let out = run(bin()
        .args(["recall", "--n-train", "30", "--pmax"])
        .arg(&pmax)
        .arg("--threshold")
        .arg(&threshold)
        .arg("--frequency")
        .arg(&freq));
    let recall: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(recall["learned_count"].as_u64().unwrap() > 0);
    assert!(fs::read_to_string(&freq).unwrap().starts_with("train_id,count"));

    let out = run(bin()
        .args(["select-subset", "--n-train", "30", "--k", "1", "--pmax"])
        .arg(&pmax)
        .arg("--threshold")
        .arg(&threshold));
    // every copy is memorized, so nothing qualifies
    assert!(out.stdout.is_empty());

    let out = bin()
        .args(["select-subset", "--n-train", "30", "--k", "0", "--pmax"])
        .arg(&pmax)
        .arg("--threshold")
        .arg(&threshold)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_head_and_eval_with_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "resample");
    let head = d.join("head.head1");
    let log = d.join("log.csv");
    run(bin()
        .arg("--out")
        .arg(&head)
        .args(["train-head", "--pairs", "400", "--epochs", "3", "--hidden", "8", "--data"])
        .arg(d.join("train.emb1"))
        .arg("--log")
        .arg(&log));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);
    let out = run(bin()
        .args(["eval", "--metric", "pred", "--resamples", "100", "--head"])
        .arg(&head)
        .arg("--data")
        .arg(d.join("test.emb1")));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["threshold_source"], "pred_default");
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn select_subset_draws_only_unflagged_videos() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(bin()
        .args(["--seed", "5", "--out"])
        .arg(d)
        .args(["gen-synth", "--identities", "120", "--frames", "4", "--dimension", "8", "--sigma-intra", "0.6"]));
    let pmax = d.join("pmax.csv");
    let test_pmax = d.join("test_pmax.csv");
    let threshold = d.join("threshold.json");
    run(bin()
        .arg("--out")
        .arg(&test_pmax)
        .args(["pmax", "--query-split", "test", "--queries"])
        .arg(d.join("test.emb1"))
        .arg("--reference")
        .arg(d.join("train.emb1")));
    run(bin()
        .arg("--out")
        .arg(&pmax)
        .args(["pmax", "--queries"])
        .arg(d.join("synthetic.emb1"))
        .arg("--reference")
        .arg(d.join("train.emb1")));
    run(bin()
        .arg("--out")
        .arg(&threshold)
        .args(["calibrate", "--percentile", "50", "--pmax"])
        .arg(&test_pmax));
    let out = run(bin()
        .args(["filter", "--threshold"])
        .arg(&threshold)
        .arg("--pmax")
        .arg(&pmax));
    let filtered: Value = serde_json::from_slice(&out.stdout).unwrap();
    let flagged: Vec<&str> = filtered["flagged_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();

    let out = run(bin()
        .args(["select-subset", "--n-train", "60", "--k", "2", "--pmax"])
        .arg(&pmax)
        .arg("--threshold")
        .arg(&threshold));
    let ids = String::from_utf8(out.stdout).unwrap();
    assert!(ids.lines().count() > 0);
    for id in ids.lines() {
        assert!(!flagged.contains(&id), "{id} is flagged");
    }
}

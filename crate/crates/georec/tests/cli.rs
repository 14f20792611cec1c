//! Drives the `georec` binary end to end: pipeline composition, output
//! files, exit codes, reproducibility, and checkpoint resume.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn georec(dir: &Path, args: &[&str], extra_sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_georec"));
    cmd.args(args);
    for s in base_sets(dir) {
        cmd.arg("--set").arg(s);
    }
    for s in extra_sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("spawn georec")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

/// Small paired regions plus a fast schedule; everything else defaults.
fn base_sets(dir: &Path) -> Vec<String> {
    vec![
        format!("out_dir={}", dir.display()),
        "seed=11".into(),
        "synth.n_groups=3".into(),
        "synth.n_categories=5".into(),
        "synth.source.n_users=30".into(),
        "synth.source.n_pois=15".into(),
        "synth.source.n_checkins=900".into(),
        "synth.source.social_within=0.4".into(),
        "synth.source.social_between=0.05".into(),
        "synth.target.n_users=20".into(),
        "synth.target.n_pois=10".into(),
        "synth.target.n_checkins=400".into(),
        "synth.target.social_within=0.4".into(),
        "synth.target.social_between=0.05".into(),
        "ingest.source_min_poi_checkins=1".into(),
        "ingest.source_min_user_checkins=1".into(),
        "ingest.source_min_user_connections=1".into(),
        "ingest.target_min_poi_checkins=1".into(),
        "ingest.target_min_user_checkins=1".into(),
        "ingest.target_min_user_connections=1".into(),
        "train.epochs=2".into(),
        "train.inner_steps=1".into(),
        "train.batch_size=8".into(),
        "train.fine_tune_epochs=1".into(),
        "train.transfer_every=2".into(),
        "train.transfer.clusters=3".into(),
        "train.transfer.steps=1".into(),
        "train.social_anchor_cap=32".into(),
        "model.embed_dim=4".into(),
        "model.mlp_hidden=6".into(),
        "model.sample_size=3".into(),
    ]
}

fn run_pipeline(dir: &Path) {
    assert_ok(&georec(dir, &["gen-synth"], &[]), "gen-synth");
    assert_ok(&georec(dir, &["build-graph"], &[]), "build-graph");
    assert_ok(&georec(dir, &["train"], &[]), "train");
}

/// First user id in the target check-in file (guaranteed to survive the
/// loose filters above).
fn some_target_user(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("data/checkins_target.tsv")).unwrap();
    text.lines()
        .next()
        .and_then(|l| l.split('\t').next())
        .expect("non-empty target check-ins")
        .to_string()
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = georec(dir, &["gen-synth"], &[]);
    assert_ok(&out, "gen-synth");
    let v = stdout_json(&out);
    assert!(dir.join("data/checkins_source.tsv").exists());
    assert!(dir.join("data/social_target.tsv").exists());
    assert!(PathBuf::from(v["ground_truth"].as_str().unwrap()).exists());

    let out = georec(dir, &["build-graph"], &[]);
    assert_ok(&out, "build-graph");
    let v = stdout_json(&out);
    assert_eq!(v.as_array().map(|a| a.len()), Some(2));
    assert!(v[0]["users"].as_u64().unwrap() > 0);
    assert!(dir.join("graph_source.bin").exists());
    assert!(dir.join("graph_target.bin").exists());
    assert!(dir.join("filtered/checkins_target.tsv").exists());

    let out = georec(dir, &["train"], &[]);
    assert_ok(&out, "train");
    let v = stdout_json(&out);
    assert_eq!(v["meta_epochs"].as_u64(), Some(2));
    assert_eq!(v["fine_tune_epochs"].as_u64(), Some(1));
    assert!(dir.join("train_log.jsonl").exists());
    assert!(dir.join("checkpoint_final.bin").exists());

    let out = georec(dir, &["evaluate", "--baseline"], &[]);
    assert_ok(&out, "evaluate");
    let v = stdout_json(&out);
    assert_eq!(v["model"]["region"].as_str(), Some("target"));
    assert_eq!(v["model"]["split"].as_str(), Some("test"));
    assert!(v["model"]["n_users"].as_u64().unwrap() > 0);
    let ks = v["model"]["ks"].as_array().unwrap();
    assert!(ks.iter().any(|m| m["k"].as_u64() == Some(5)));
    assert!(v["popularity"]["ks"].is_array());
    assert!(dir.join("metrics_target_test.json").exists());

    let user = some_target_user(dir);
    let out = georec(dir, &["recommend", "--user", &user, "-k", "5"], &[]);
    assert_ok(&out, "recommend");
    let v = stdout_json(&out);
    assert_eq!(v["user_id"].as_str(), Some(user.as_str()));
    let items = v["items"].as_array().unwrap();
    assert!(!items.is_empty() && items.len() <= 5);
    for w in items.windows(2) {
        assert!(w[0]["score"].as_f64() >= w[1]["score"].as_f64());
    }

    // A user that exists nowhere is a runtime (not usage) failure.
    let out = georec(dir, &["recommend", "--user", "nobody"], &[]);
    assert_eq!(exit_code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identical_configs_reproduce_identical_artifacts() {
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        run_pipeline(tmp.path());
        assert_ok(&georec(tmp.path(), &["evaluate"], &[]), "evaluate");
        snapshots.push((
            read(tmp.path(), "data/checkins_target.tsv"),
            read(tmp.path(), "train_log.jsonl"),
            read(tmp.path(), "checkpoint_final.bin"),
            read(tmp.path(), "metrics_target_test.json"),
        ));
    }
    assert_eq!(snapshots[0].0, snapshots[1].0, "synthetic data differs");
    assert_eq!(snapshots[0].1, snapshots[1].1, "train logs differ");
    assert_eq!(snapshots[0].2, snapshots[1].2, "checkpoints differ");
    assert_eq!(snapshots[0].3, snapshots[1].3, "metrics differ");
}

#[test]
fn resume_reaches_the_same_final_checkpoint() {
    // Four epochs with a transfer (and its checkpoint) halfway. Validation is
    // pushed past the horizon so the straight and resumed runs track the same
    // best-value bookkeeping.
    let sets = vec!["train.epochs=4".into(), "train.val_every=1000".into()];
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&georec(dir, &["gen-synth"], &[]), "gen-synth");
    assert_ok(&georec(dir, &["build-graph"], &[]), "build-graph");
    assert_ok(&georec(dir, &["train"], &sets), "train");
    let straight = std::fs::read(dir.join("checkpoint_final.bin")).unwrap();
    let halfway = dir.join("resume_from.bin");
    std::fs::copy(dir.join("checkpoint_transfer_1.bin"), &halfway).unwrap();

    let out = georec(
        dir,
        &["train", "--resume", halfway.to_str().unwrap()],
        &sets,
    );
    assert_ok(&out, "train --resume");
    let resumed = std::fs::read(dir.join("checkpoint_final.bin")).unwrap();
    assert_eq!(straight, resumed, "resumed run diverged");

    let log = std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["resumed_from_epoch"].as_u64(), Some(2));

    // A checkpoint trained in one mode cannot seed a run in another.
    let mut other = sets.clone();
    other.push("mode=target-only".into());
    let out = georec(dir, &["train", "--resume", halfway.to_str().unwrap()], &other);
    assert_eq!(exit_code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Raw inputs absent.
    let out = georec(dir, &["build-graph"], &[]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("input file not found"));

    // Malformed --set.
    let out = georec(dir, &["gen-synth"], &["train.epochs".into()]);
    assert_eq!(exit_code(&out), 2);

    // Unknown configuration key.
    let out = georec(dir, &["gen-synth"], &["train.warp_speed=9".into()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));

    // Unknown mode and unknown region.
    let out = georec(dir, &["gen-synth"], &["mode=warp".into()]);
    assert_eq!(exit_code(&out), 2);
    let out = georec(dir, &["evaluate", "--region", "both"], &[]);
    assert_eq!(exit_code(&out), 2);

    // Evaluating before any checkpoint exists is a missing input, not a crash.
    assert_ok(&georec(dir, &["gen-synth"], &[]), "gen-synth");
    assert_ok(&georec(dir, &["build-graph"], &[]), "build-graph");
    let out = georec(dir, &["evaluate"], &[]);
    assert_eq!(exit_code(&out), 2);

    // Nonexistent --config file.
    let out = Command::new(env!("CARGO_BIN_EXE_georec"))
        .args(["--config", "/no/such/file.toml", "gen-synth"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn config_file_and_set_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg_path = dir.join("run.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "seed = 7\nout_dir = \"{}\"\n\n[synth]\nn_groups = 2\nn_categories = 3\n\n[synth.source]\nn_users = 12\nn_pois = 6\nn_checkins = 120\n\n[synth.target]\nn_users = 8\nn_pois = 5\nn_checkins = 60\n",
            dir.display()
        ),
    )
    .unwrap();

    let gen = |extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_georec"));
        cmd.args(["--config", cfg_path.to_str().unwrap(), "gen-synth"]);
        for s in extra {
            cmd.arg("--set").arg(s);
        }
        cmd.output().unwrap()
    };

    assert_ok(&gen(&[]), "gen-synth from file");
    let seed7 = std::fs::read(dir.join("data/checkins_target.tsv")).unwrap();
    // Same file again: identical output.
    assert_ok(&gen(&[]), "gen-synth repeat");
    assert_eq!(seed7, std::fs::read(dir.join("data/checkins_target.tsv")).unwrap());
    // --set wins over the file.
    assert_ok(&gen(&["seed=9"]), "gen-synth with override");
    let seed9 = std::fs::read(dir.join("data/checkins_target.tsv")).unwrap();
    assert_ne!(seed7, seed9, "seed override had no effect");
}

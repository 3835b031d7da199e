//! End-to-end tests of the `gdnorm` binary: artifact layout, exit codes,
//! reproducibility of generated files and checkpoints, and the strict
//! config schema.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gdnorm"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gdnorm-cli-{}-{tag}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config(dir: &Path, seed: u64, epochs: usize) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "data": {{ "generator": {{ "seed": {seed}, "ids_per_domain": 8, "samples_per_id": 8, "held_out_ids": 6, "held_out_samples_per_id": 6 }} }},
  "train": {{ "epochs": {epochs}, "p_identities": 4, "q_instances": 4, "seed": {seed} }},
  "eval": {{ "spread_paths": 5, "lambda_grid": [0.0, 0.6], "sweep_grid": [0.6] }}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn file_hash(path: &Path) -> u64 {
    let bytes = std::fs::read(path).unwrap();
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[test]
fn gen_is_reproducible_and_manifest_counts_match() {
    let dir = tmp_dir("gen");
    let cfg = small_config(&dir, 5, 1);
    for sub in ["a", "b"] {
        run_ok(bin().args([
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]));
    }
    for name in [
        "domain_0.jsonl",
        "domain_1.jsonl",
        "domain_2.jsonl",
        "held_out.jsonl",
    ] {
        assert_eq!(
            file_hash(&dir.join("a").join(name)),
            file_hash(&dir.join("b").join(name)),
            "{name} must be byte-identical across runs"
        );
    }
    // manifest sample counts match the file line counts
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("a/manifest.json")).unwrap())
            .unwrap();
    for entry in manifest["files"].as_array().unwrap() {
        let file = entry["file"].as_str().unwrap();
        let lines = std::fs::read_to_string(dir.join("a").join(file))
            .unwrap()
            .lines()
            .count();
        assert_eq!(entry["samples"].as_u64().unwrap() as usize, lines, "{file}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_is_reproducible_and_eval_reruns_identically() {
    let dir = tmp_dir("train");
    let cfg = small_config(&dir, 7, 2);
    run_ok(bin().args([
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
    ]));
    for sub in ["r1", "r2"] {
        run_ok(bin().args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            dir.join("data").to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]));
    }
    assert_eq!(
        file_hash(&dir.join("r1/checkpoint.gdn")),
        file_hash(&dir.join("r2/checkpoint.gdn")),
        "identical config and seed must give identical checkpoints"
    );
    assert_eq!(
        file_hash(&dir.join("r1/metrics.jsonl")),
        file_hash(&dir.join("r2/metrics.jsonl"))
    );

    // eval twice; metric fields identical (timing fields may differ)
    let metric_fields = |out: &Path| -> Vec<(String, String, String)> {
        std::fs::read_to_string(out.join("results.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["baseline"].to_string(),
                    v["map"].to_string(),
                    v["rank1"].to_string(),
                )
            })
            .collect()
    };
    for sub in ["e1", "e2"] {
        run_ok(bin().args([
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            dir.join("r1/checkpoint.gdn").to_str().unwrap(),
            "--data",
            dir.join("data").to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]));
    }
    assert_eq!(
        metric_fields(&dir.join("e1")),
        metric_fields(&dir.join("e2"))
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_epoch_train_keeps_initialization() {
    let dir = tmp_dir("zero");
    let cfg = small_config(&dir, 9, 0);
    for sub in ["z1", "z2"] {
        run_ok(bin().args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]));
    }
    assert_eq!(
        file_hash(&dir.join("z1/checkpoint.gdn")),
        file_hash(&dir.join("z2/checkpoint.gdn"))
    );
    // empty logs
    assert_eq!(
        std::fs::read_to_string(dir.join("z1/metrics.jsonl")).unwrap(),
        ""
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn export_import_path_roundtrip() {
    let dir = tmp_dir("paths");
    let cfg = small_config(&dir, 11, 1);
    run_ok(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]));
    let ckpt = dir.join("run/checkpoint.gdn");
    run_ok(bin().args([
        "export-path",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.join("mean.path").to_str().unwrap(),
        "--kind",
        "mean",
    ]));
    let out = run_ok(bin().args([
        "import-path",
        "--config",
        cfg.to_str().unwrap(),
        "--path",
        dir.join("mean.path").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.join("imp").to_str().unwrap(),
        "--format",
        "json",
    ]));
    let row: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap()).unwrap();
    assert!(row["map"].as_f64().unwrap() >= 0.0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_suite_is_usage_error() {
    let out = bin().args(["repro", "--suite", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected_with_the_offending_key() {
    let dir = tmp_dir("badcfg");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{ "train": { "epochz": 3 } }"#).unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("epochz"),
        "error must name the offending key: {stderr}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn env_seed_overrides_config() {
    let dir = tmp_dir("envseed");
    let cfg = small_config(&dir, 5, 1);
    // same env seed twice -> identical; different -> different
    let run_with = |env_seed: &str, sub: &str| {
        run_ok(bin().env("GDNORM_SEED", env_seed).args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]));
        file_hash(&dir.join(sub).join("checkpoint.gdn"))
    };
    let a = run_with("21", "a");
    let b = run_with("21", "b");
    let c = run_with("22", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn shared_bn_trainer_flag_works() {
    let dir = tmp_dir("sharedbn");
    let cfg = small_config(&dir, 13, 1);
    run_ok(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--trainer",
        "shared-bn",
        "--out",
        dir.join("run").to_str().unwrap(),
    ]));
    // a shared model has exactly one BN set -> one domain path file
    assert!(dir.join("run/paths/domain_0.gdnpath").exists());
    assert!(!dir.join("run/paths/domain_1.gdnpath").exists());
    std::fs::remove_dir_all(&dir).ok();
}

//! End-to-end checks of the `dnfnet` binary: exit codes, file outputs, and
//! rerun determinism.

use std::path::Path;
use std::process::{Command, Output};

fn dnfnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnfnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("DNFNET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_required_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dnfnet(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn synth_rejects_small_d() {
    let dir = tempfile::tempdir().unwrap();
    let out = dnfnet(&["synth", "--task", "syn1", "--d", "5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage error"));
}

#[test]
fn synth_is_deterministic_and_sweep_emits_all_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--task", "syn2", "--d", "11", "--n", "200", "--seed", "3"];
    assert_success(&dnfnet(&args, dir.path()));
    let first = std::fs::read(dir.path().join("syn2_d11_n200_seed3.csv")).unwrap();
    assert_success(&dnfnet(&args, dir.path()));
    let second = std::fs::read(dir.path().join("syn2_d11_n200_seed3.csv")).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 201);

    let sweep = tempfile::tempdir().unwrap();
    assert_success(&dnfnet(
        &["synth", "--task", "syn1", "--n", "50", "--sweep-d"],
        sweep.path(),
    ));
    for d in [11, 50, 100, 150, 200, 250, 300] {
        assert!(sweep.path().join(format!("syn1_d{d}_n50_seed1.csv")).exists());
        assert!(sweep
            .path()
            .join(format!("syn1_d{d}_n50_seed1.manifest.json"))
            .exists());
    }
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&dnfnet(
        &["synth", "--task", "syn1", "--d", "11", "--n", "400", "--seed", "1"],
        dir.path(),
    ));
    let train_args = [
        "train",
        "--data",
        "syn1_d11_n400_seed1.csv",
        "--n-formulas",
        "4",
        "--max-epochs",
        "5",
        "--early-stop-patience",
        "4",
    ];
    assert_success(&dnfnet(&train_args, dir.path()));
    for artifact in ["train_results.jsonl", "train_manifest.json", "model.ckpt", "scaler.json"] {
        assert!(dir.path().join(artifact).exists(), "missing {artifact}");
    }
    let results = std::fs::read(dir.path().join("train_results.jsonl")).unwrap();
    let ckpt = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    assert_success(&dnfnet(&train_args, dir.path()));
    assert_eq!(results, std::fs::read(dir.path().join("train_results.jsonl")).unwrap());
    assert_eq!(ckpt, std::fs::read(dir.path().join("model.ckpt")).unwrap());

    // the checkpoint round-trips through evaluate
    let out = dnfnet(
        &[
            "evaluate",
            "--checkpoint",
            "model.ckpt",
            "--data",
            "syn1_d11_n400_seed1.csv",
            "--scaler",
            "scaler.json",
        ],
        dir.path(),
    );
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("log-loss"));
}

#[test]
fn gridsearch_ablation_presets_exp3_and_exp6_match() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "gridsearch",
        "--synth-task",
        "syn1",
        "--d",
        "11",
        "--n-samples",
        "300",
        "--n-formulas-grid",
        "4",
        "--seeds",
        "1",
        "--partitions",
        "0",
        "--max-epochs",
        "4",
    ];
    let run = |preset: &str, out: &str| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["--ablation", preset, "--out-dir", out]);
        assert_success(&dnfnet(&args, dir.path()));
        std::fs::read(dir.path().join(out).join("grid_results.jsonl")).unwrap()
    };
    assert_eq!(run("exp3", "a"), run("exp6", "b"));
    let bad = dnfnet(
        &["gridsearch", "--synth-task", "syn1", "--ablation", "exp9"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gridsearch_records_format_emits_schema_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dnfnet(
        &[
            "gridsearch",
            "--synth-task",
            "syn1",
            "--d",
            "11",
            "--n-samples",
            "300",
            "--n-formulas-grid",
            "4",
            "--seeds",
            "1",
            "--partitions",
            "0",
            "--max-epochs",
            "3",
            "--format",
            "records",
        ],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut aggregate = 0;
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("json line");
        if v["schema"] == "grid-aggregate-v1" {
            aggregate += 1;
            assert!(v["failures"].as_array().unwrap().is_empty());
        }
    }
    assert_eq!(aggregate, 1);
}

#[test]
fn vc_curves_table_matches_rank1_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&dnfnet(
        &["vc-curves", "--n-min", "1", "--n-max", "30", "--tree-ranks", "1", "--dnf-ks", "2"],
        dir.path(),
    ));
    let tsv = std::fs::read_to_string(dir.path().join("vc_curves.tsv")).unwrap();
    for line in tsv.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[1] == "tree-rank-1" {
            let n: usize = cols[0].parse().unwrap();
            assert_eq!(cols[2].parse::<f64>().unwrap(), (n + 1) as f64);
        }
    }
    assert!(dir.path().join("vc_curves.jsonl").exists());
}

#[test]
fn out_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_dnfnet"))
        .args(["vc-curves", "--n-min", "1", "--n-max", "3"])
        .current_dir(dir.path())
        .env("DNFNET_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("vc_curves.tsv").exists());
}

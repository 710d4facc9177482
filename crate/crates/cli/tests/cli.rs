mod common;

use std::fs;
use std::path::Path;

use common::*;
use splitinf_core::{build_reference_model, load_model, save_model};
use tempfile::tempdir;

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn reference_models(dir: &Path) {
    save_model(&build_reference_model(5), dir.join("dense.splitnn")).unwrap();
    run_ok(dir, &["--config", "run.toml", "prune", "--model", "dense.splitnn"]);
}

#[test]
fn train_missing_dataset_names_the_file() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    fs::remove_file(dir.path().join("train-images-idx3-ubyte")).unwrap();
    let out = run(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train-images-idx3-ubyte"), "{}", stderr(&out));
}

#[test]
fn train_writes_a_loadable_model_and_curve() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    run_ok(dir.path(), &["--config", "run.toml", "train"]);
    let model = load_model(dir.path().join("out/model_dense.splitnn")).unwrap();
    assert_eq!(model.param_count(), 433_274);
    let (header, rows) = read_csv(&dir.path().join("out/loss.csv"));
    assert_eq!(header, ["epoch", "objective", "loss", "l1_term"]);
    assert_eq!(rows.len(), 1);
    for v in &rows[0][1..] {
        assert!(v.parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    run_ok(dir.path(), &["--config", "run.toml", "--out", "a", "train"]);
    run_ok(
        dir.path(),
        &["--config", "run.toml", "--out", "b", "--seed", "3", "train"],
    );
    run_ok(
        dir.path(),
        &["--config", "run.toml", "--out", "c", "--seed", "4", "train"],
    );
    let read = |d: &str| fs::read(dir.path().join(d).join("model_dense.splitnn")).unwrap();
    // the config's training seed is 3
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn prune_threshold_zero_is_ratio_one() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    save_model(&build_reference_model(5), dir.path().join("dense.splitnn")).unwrap();
    run_ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "prune",
            "--model",
            "dense.splitnn",
            "--threshold",
            "0",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/compression.json")).unwrap()).unwrap();
    assert_eq!(report["ratio"].as_f64(), Some(1.0));
    assert_eq!(report["nonzero_compressed"].as_u64(), Some(433_274));
}

#[test]
fn prune_report_matches_file_scan() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    reference_models(dir.path());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/compression.json")).unwrap()).unwrap();
    let scanned = scan_retained(&dir.path().join("out/model_pruned.splitnn"));
    let per_layer: Vec<usize> = report["per_layer_nonzeros"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(per_layer, scanned);
    assert_eq!(
        report["nonzero_compressed"].as_u64().unwrap() as usize,
        scanned.iter().sum::<usize>()
    );
    let original: usize = scan_retained(&dir.path().join("dense.splitnn")).iter().sum();
    assert_eq!(report["nonzero_original"].as_u64().unwrap() as usize, original);
    let ratio = report["ratio"].as_f64().unwrap();
    assert!(ratio > 1.0);
    assert_eq!(ratio, original as f64 / scanned.iter().sum::<usize>() as f64);
}

#[test]
fn prune_everything_fails_with_threshold() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    save_model(&build_reference_model(5), dir.path().join("dense.splitnn")).unwrap();
    let out = run(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "prune",
            "--model",
            "dense.splitnn",
            "--threshold",
            "1e9",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("threshold"), "{}", stderr(&out));
    assert!(!dir.path().join("out/model_pruned.splitnn").exists());
}

#[test]
fn profile_dense_and_masked() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    reference_models(dir.path());
    run_ok(
        dir.path(),
        &["--config", "run.toml", "profile", "--model", "out/model_pruned.splitnn"],
    );
    let (header, dense) = read_csv(&dir.path().join("out/profile_dense.csv"));
    let (h2, masked) = read_csv(&dir.path().join("out/profile_masked.csv"));
    assert_eq!(header, h2);
    assert_eq!(dense.len(), 13);
    assert_eq!(masked.len(), 13);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let gamma: u64 = dense.iter().map(|r| r[col("Gamma")].parse::<u64>().unwrap()).sum();
    assert_eq!(gamma, 433_274);
    for (d, m) in dense.iter().zip(&masked) {
        assert_eq!(d[0], m[0]);
        for name in ["M", "A", "Gamma", "d_out", "E_c", "E_m", "E_p_prefix"] {
            let (a, b): (f64, f64) = (d[col(name)].parse().unwrap(), m[col(name)].parse().unwrap());
            assert!(b <= a, "{} {name}: masked {b} > dense {a}", d[0]);
        }
    }
}

#[test]
fn simulate_writes_reports() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    reference_models(dir.path());
    let out = run_ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "simulate",
            "--compressed",
            "out/model_pruned.splitnn",
            "--dense",
            "dense.splitnn",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    for p in ["PS ", "PSNC", "pool-1", "softmax"] {
        assert_eq!(
            stdout.lines().filter(|l| l.contains(p) && l.contains("E = ")).count(),
            1,
            "{p}\n{stdout}"
        );
    }
    let (header, rows) = read_csv(&dir.path().join("out/report.csv"));
    assert_eq!(header, ["W", "policy", "metric", "value", "stderr"]);
    assert!(rows.iter().all(|r| r.len() == 5 && !r[4].is_empty()));
    let mean = |p: &str| -> f64 {
        rows.iter().find(|r| r[1] == p && r[2] == "E").unwrap()[3]
            .parse()
            .unwrap()
    };
    for p in ["PSNC", "pool-1", "softmax"] {
        assert!(mean("PS") <= mean(p), "PS {} vs {p} {}", mean("PS"), mean(p));
    }
    let (h, decisions) = read_csv(&dir.path().join("out/decisions.csv"));
    assert_eq!(h.join(","), "inference_id,policy,cut_layer,d,tau,E_p,E_tr,E");
    assert_eq!(decisions.len(), 40 * 4);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(json["waypoints"].as_array().unwrap().len(), 2);
    assert_eq!(json["inferences"].as_u64(), Some(40));
}

#[test]
fn bandwidth_sweep_has_two_by_four_cells() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    reference_models(dir.path());
    run_ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "sweep",
            "bandwidth",
            "--compressed",
            "out/model_pruned.splitnn",
            "--dense",
            "dense.splitnn",
        ],
    );
    let (_, rows) = read_csv(&dir.path().join("out/sweep_bandwidth.csv"));
    let cells: std::collections::BTreeSet<(String, String)> = rows
        .iter()
        .filter(|r| r[2] == "E")
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    assert_eq!(cells.len(), 8);
    assert_eq!(rows.iter().filter(|r| r[2] == "E").count(), 8);
}

#[test]
fn compression_sweep_ratio_is_monotone() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    save_model(&build_reference_model(5), dir.path().join("dense.splitnn")).unwrap();
    run_ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "sweep",
            "compression",
            "--model",
            "dense.splitnn",
        ],
    );
    let (header, rows) = read_csv(&dir.path().join("out/sweep_compression.csv"));
    assert_eq!(&header[..3], ["threshold", "C_r", "test_accuracy"]);
    assert_eq!(rows.len(), 4);
    let ratios: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ratios[0], 1.0);
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]), "{ratios:?}");
}

#[test]
fn compression_sweep_rejects_empty_thresholds() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    let cfg = fs::read_to_string(dir.path().join("run.toml")).unwrap();
    fs::write(
        dir.path().join("run.toml"),
        cfg.replace("thresholds = [0.0, 0.01, 0.02, 0.05]", "thresholds = []"),
    )
    .unwrap();
    save_model(&build_reference_model(5), dir.path().join("dense.splitnn")).unwrap();
    let out = run(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "sweep",
            "compression",
            "--model",
            "dense.splitnn",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("threshold"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "colour = \"blue\"");
    let out = run(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));

    write_config(dir.path(), "[link]\nW = 5e6");
    let out = run(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no unit"), "{}", stderr(&out));

    let out = run(dir.path(), &["--config", "missing.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.toml"));
}

#[test]
fn corrupt_model_is_reported() {
    let dir = tempdir().unwrap();
    write_config(dir.path(), "");
    fs::write(dir.path().join("bad.splitnn"), b"SPLITNN1 not really").unwrap();
    let out = run(
        dir.path(),
        &["--config", "run.toml", "profile", "--model", "bad.splitnn"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.splitnn"));
}

//! End-to-end exercises of the `uadbench` binary on micro-scale phantom
//! experiments: artifact layout, caching, determinism across worker
//! pools, and the error surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_uadbench")
}

fn run_args(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(binary());
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn micro_config(out_dir: &Path, methods: &str, extra: &str) -> String {
    format!(
        r#"
schema_version = 1
seed = 11
output_dir = "{}"
{extra}
[data]
volume_shape = [32, 32, 16]
input_size = 16
n_train = 4
n_val = 2
n_test_healthy = 1
n_test_anomalous = 2
lesion_mode = "hyper"

[net]
widths = [2, 4, 4, 4]
dense_dim = 16

[train]
learning_rate = 0.002
batch_size = 16
max_epochs = 2
critic_steps = 2
corrupt_patches = [1, 2]
corrupt_sides = [2, 5]

[scoring]
n_samples = 4
n_iters = 5

{methods}
"#,
        out_dir.display()
    )
}

const ONE_METHOD: &str = r#"
[[methods]]
tag = "VAE"
scorers = ["reconstruction"]
"#;

fn write_config(dir: &Path, content: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, content).unwrap();
    path
}

fn read_csv(out_dir: &Path) -> String {
    std::fs::read_to_string(out_dir.join("report").join("results.csv")).unwrap()
}

/// Cached models, ignoring their history sidecars.
fn checkpoint_count(out_dir: &Path) -> usize {
    std::fs::read_dir(out_dir.join("cache"))
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt")
        })
        .count()
}

#[test]
fn run_produces_one_row_and_rerun_is_byte_identical_via_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), &micro_config(&out, ONE_METHOD, ""));

    let first = run_args(&["run", "--config", config.to_str().unwrap()], &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));

    let csv = read_csv(&out);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "Approach,AUROC,AUPRC,⌈DICE⌉,DICE,ℓ1-RE_N,ℓ1-RE_A,χ²");
    let row = lines.next().expect("exactly one result row");
    assert!(row.starts_with("VAE (reconstruction),"), "{row}");
    assert_eq!(lines.next(), None);

    // The checkpoint cache holds exactly one model; a re-run reuses both
    // the model and the stored cell result, reproducing the report
    // byte for byte.
    assert_eq!(checkpoint_count(&out), 1);
    let second = run_args(&["run", "--config", config.to_str().unwrap()], &[]);
    assert!(second.status.success());
    assert_eq!(csv, read_csv(&out));

    // Artifact layout: phantoms, manifest, plots.
    assert!(out.join("phantoms/train").is_dir());
    assert!(out.join("phantoms/manifest.json").is_file());
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("report/auprc.svg").is_file());
    assert!(out.join("report/residuals_VAE_f1.000_reconstruction.svg").is_file());
    // Fewer than three rows: no correlation heatmap.
    assert!(!out.join("report/correlation.svg").exists());
}

#[test]
fn micro_matrix_yields_unit_interval_areas_and_all_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let methods = r#"
[[methods]]
tag = "AE_dense"
scorers = ["reconstruction", "mc"]

[[methods]]
tag = "AE_spatial"
scorers = ["reconstruction"]

[[methods]]
tag = "ContextAE"
scorers = ["reconstruction"]

[[methods]]
tag = "VAE"
scorers = ["reconstruction", "gradient"]
"#;
    let config = write_config(tmp.path(), &micro_config(&out, methods, ""));
    let result = run_args(&["run", "--config", config.to_str().unwrap()], &[]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));

    let csv = read_csv(&out);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "4 methods, 6 scorer rows:\n{csv}");
    for row in rows {
        let auprc: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auprc), "AUPRC out of range in {row}");
        let auroc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auroc), "AUROC out of range in {row}");
    }
    // ≥3 rows: correlation heatmap present.
    assert!(out.join("report/correlation.svg").is_file());
}

#[test]
fn worker_pool_reproduces_the_sequential_report() {
    let tmp = tempfile::tempdir().unwrap();
    let methods = r#"
[[methods]]
tag = "AE_dense"
scorers = ["reconstruction"]

[[methods]]
tag = "VAE"
scorers = ["reconstruction"]
"#;
    let out_seq = tmp.path().join("seq");
    let cfg_seq = write_config(tmp.path(), &micro_config(&out_seq, methods, ""));
    let seq = run_args(&["run", "--config", cfg_seq.to_str().unwrap()], &[]);
    assert!(seq.status.success(), "{}", String::from_utf8_lossy(&seq.stderr));

    let tmp2 = tempfile::tempdir().unwrap();
    let out_par = tmp2.path().join("par");
    let cfg_par = write_config(tmp2.path(), &micro_config(&out_par, methods, ""));
    let par = run_args(
        &["run", "--config", cfg_par.to_str().unwrap()],
        &[("UADBENCH_WORKERS", "2")],
    );
    assert!(par.status.success(), "{}", String::from_utf8_lossy(&par.stderr));

    assert_eq!(read_csv(&out_seq), read_csv(&out_par));
}

#[test]
fn subsample_sweep_emits_rows_per_fraction_and_the_sweep_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(
        tmp.path(),
        &micro_config(&out, ONE_METHOD, "subsample_fractions = [0.5, 1.0]\n"),
    );
    let result = run_args(&["run", "--config", config.to_str().unwrap()], &[]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let csv = read_csv(&out);
    assert_eq!(csv.lines().count(), 3, "header + 2 fraction rows:\n{csv}");
    assert!(csv.contains("50.0% train"));
    assert!(out.join("report/sweep.svg").is_file());
    // Two fractions of the same method are distinct cache entries.
    assert_eq!(checkpoint_count(&out), 2);
}

#[test]
fn seed_override_changes_results_without_touching_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let cfg = write_config(tmp.path(), &micro_config(&out_a, ONE_METHOD, ""));
    let a = run_args(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));

    let out_b = tmp.path().join("b");
    let b = run_args(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "1234",
            "--out",
            out_b.to_str().unwrap(),
        ],
        &[],
    );
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_ne!(read_csv(&out_a), read_csv(&out_b), "a different seed must change results");
}

#[test]
fn usage_and_error_categories_reach_the_exit_code() {
    // Unknown subcommand: usage text, nonzero exit.
    let unknown = run_args(&["frobnicate"], &[]);
    assert!(!unknown.status.success());
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");

    // Inadmissible (method, scorer) pair: config category, exit 2.
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(
        tmp.path(),
        &micro_config(
            &tmp.path().join("out"),
            "[[methods]]\ntag = \"AE_dense\"\nscorers = [\"gradient\"]\n",
            "",
        ),
    );
    let result = run_args(&["run", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("[category=config]"), "{stderr}");

    // Report before any cell completed: empty-results category, exit 6.
    let empty_cfg = write_config(
        &tmp.path().join("."),
        &micro_config(&tmp.path().join("never"), ONE_METHOD, ""),
    );
    let report = run_args(&["report", "--config", empty_cfg.to_str().unwrap()], &[]);
    assert_eq!(report.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&report.stderr).contains("[category=empty-results]"));
}

#[test]
fn evaluate_and_train_subcommands_work_cell_wise() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), &micro_config(&out, ONE_METHOD, ""));
    let synth = run_args(&["synth", "--config", config.to_str().unwrap()], &[]);
    assert!(synth.status.success());

    let train = run_args(
        &["train", "--config", config.to_str().unwrap(), "--method", "VAE"],
        &[],
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(String::from_utf8_lossy(&train.stdout).contains("trained"));

    // Second `train` hits the checkpoint cache.
    let again = run_args(
        &["train", "--config", config.to_str().unwrap(), "--method", "VAE"],
        &[],
    );
    assert!(String::from_utf8_lossy(&again.stdout).contains("cache hit"));

    let eval = run_args(
        &["evaluate", "--config", config.to_str().unwrap(), "--method", "VAE"],
        &[],
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("VAE (reconstruction),"));
    assert!(out.join("cells/VAE_f1.000/report.json").is_file());

    // `score` persists raw score volumes for inspection.
    let score = run_args(
        &[
            "score",
            "--config",
            config.to_str().unwrap(),
            "--method",
            "VAE",
            "--scorer",
            "reconstruction",
        ],
        &[],
    );
    assert!(score.status.success(), "{}", String::from_utf8_lossy(&score.stderr));
    assert!(out.join("scores/VAE_f1.000").is_dir());
}

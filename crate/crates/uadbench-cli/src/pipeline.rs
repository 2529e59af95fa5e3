//! The train → score → post-process → evaluate pipeline over the
//! experiment matrix, with checkpoint and result caching, fail-fast error
//! handling, and a bounded pool of worker processes for matrix cells.

use crate::config::{Cell, DatasetPart, ExperimentConfig};
use crate::error::CliError;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use uadbench_core::data::{
    extract_slices_sized, generate_phantoms, load_dataset, normalize_volume, write_dataset,
    SliceBatch, Volume,
};
use uadbench_core::metrics::{
    auroc, dice_at_op, greedy_best_dice, prc_and_auprc, residual_histograms, residual_stats,
    EvalReport, ResidualHistograms,
};
use uadbench_core::postproc::run_pipeline;
use uadbench_core::scoring::{score_volume, write_score_volume, ScoreMethod};
use uadbench_core::seeding::subseed;
use uadbench_core::zoo::{train, MethodTag, TrainedModel};

const HISTOGRAM_BINS: usize = 100;

/// One scorer's evaluation inside a cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRow {
    pub scorer: ScoreMethod,
    pub report: EvalReport,
    pub histograms: ResidualHistograms,
}

/// Everything a completed matrix cell persists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_id: String,
    pub tag: MethodTag,
    pub fraction: f64,
    pub cache_key: String,
    /// Hash over every setting that influences the rows; re-runs with an
    /// unchanged key reuse the stored result verbatim.
    pub result_key: String,
    pub rows: Vec<CellRow>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub completed: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))
}

/// Generate the three phantom datasets under `<out>/phantoms/`, reusing
/// them when a previous run already produced the same recipes.
pub fn synth(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.phantom_dir();
    let manifest_path = dir.join("manifest.json");
    let recipes = serde_json::json!({
        "train": cfg.phantoms(DatasetPart::Train),
        "val": cfg.phantoms(DatasetPart::Val),
        "test": cfg.phantoms(DatasetPart::Test),
    });
    if manifest_path.is_file() {
        if let Ok(existing) = read_json::<serde_json::Value>(&manifest_path) {
            if existing == recipes {
                return Ok(dir);
            }
        }
        // Stale phantoms from a different recipe: rebuild from scratch.
        std::fs::remove_dir_all(&dir)
            .map_err(|e| CliError::io(format!("clearing {}", dir.display()), e))?;
    }
    for part in [DatasetPart::Train, DatasetPart::Val, DatasetPart::Test] {
        let volumes = generate_phantoms(&cfg.phantoms(part))?;
        write_dataset(&dir, part.name(), &volumes)?;
    }
    write_json(&manifest_path, &recipes)?;
    Ok(dir)
}

/// Load one dataset part and normalize every volume.
pub fn load_part(cfg: &ExperimentConfig, part: DatasetPart) -> Result<Vec<Volume>, CliError> {
    let volumes = load_dataset(&cfg.phantom_dir(), part.name())?;
    volumes
        .iter()
        .map(|v| normalize_volume(v).map_err(CliError::from))
        .collect()
}

fn slice_pool(cfg: &ExperimentConfig, volumes: &[Volume]) -> Result<SliceBatch, CliError> {
    let batches = volumes
        .iter()
        .map(|v| extract_slices_sized(v, cfg.data.input_size).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SliceBatch::concat(&batches))
}

/// The training slices for one fraction: a seeded shuffle fixes one
/// ordering per experiment, and every fraction keeps a prefix of it, so
/// smaller fractions are strict subsets of larger ones.
pub fn training_pool(cfg: &ExperimentConfig, fraction: f64) -> Result<SliceBatch, CliError> {
    let pool = slice_pool(cfg, &load_part(cfg, DatasetPart::Train)?)?;
    if fraction >= 1.0 {
        return Ok(pool);
    }
    let keep = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "subsample", 0)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(pool.select(&kept))
}

pub struct CellModel {
    pub model: TrainedModel,
    pub cache_key: String,
    pub cache_hit: bool,
}

/// Load the cell's model from the checkpoint cache or train it.
pub fn ensure_model(cfg: &ExperimentConfig, cell: Cell) -> Result<CellModel, CliError> {
    let cache_key = cfg.cache_key(cell);
    let path = cfg.cache_dir().join(format!("{cache_key}.ckpt"));
    if path.is_file() {
        return Ok(CellModel {
            model: TrainedModel::load(&path)?,
            cache_key,
            cache_hit: true,
        });
    }
    let tag = cfg.methods[cell.method_idx].tag;
    let spec = cfg.net_spec(tag);
    let train_cfg = cfg.train_config(cell);
    let train_data = training_pool(cfg, cfg.subsample_fractions[cell.fraction_idx])?;
    let val_data = slice_pool(cfg, &load_part(cfg, DatasetPart::Val)?)?;
    let model = train(tag, &spec, &train_data, &val_data, &train_cfg)?;
    std::fs::create_dir_all(cfg.cache_dir())
        .map_err(|e| CliError::io(format!("creating {}", cfg.cache_dir().display()), e))?;
    model.save(&path)?;
    Ok(CellModel {
        model,
        cache_key,
        cache_hit: false,
    })
}

fn gt_of(v: &Volume) -> Array3<bool> {
    v.gt_mask
        .clone()
        .unwrap_or_else(|| Array3::from_elem(v.intensities.raw_dim(), false))
}

/// Hash over everything that influences a cell's evaluation rows beyond
/// the trained model: scoring parameters, post-processing, and the test
/// dataset recipe.
fn result_key(cfg: &ExperimentConfig, cell: Cell, cache_key: &str) -> String {
    let scorers = &cfg.methods[cell.method_idx].scorers;
    let material = serde_json::json!({
        "cache_key": cache_key,
        "scorers": scorers,
        "scoring": cfg.scoring,
        "postproc": cfg.postproc_config(),
        "test_phantoms": cfg.phantoms(DatasetPart::Test),
        "seed": cfg.seed,
    });
    let digest = Sha256::digest(serde_json::to_vec(&material).expect("json"));
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn cell_report_path(cfg: &ExperimentConfig, cell: Cell) -> PathBuf {
    cfg.cells_dir().join(cfg.cell_id(cell)).join("report.json")
}

pub fn read_cell_result(path: &Path) -> Result<CellResult, CliError> {
    read_json(path)
}

/// Run one matrix cell end to end and persist its result. Re-runs whose
/// settings are unchanged return the stored result without recomputing.
pub fn evaluate_cell(cfg: &ExperimentConfig, cell: Cell) -> Result<CellResult, CliError> {
    let cache_key = cfg.cache_key(cell);
    let rkey = result_key(cfg, cell, &cache_key);
    let report_path = cell_report_path(cfg, cell);
    if report_path.is_file() {
        if let Ok(existing) = read_json::<CellResult>(&report_path) {
            if existing.result_key == rkey {
                return Ok(existing);
            }
        }
    }

    let cm = ensure_model(cfg, cell)?;
    let test = load_part(cfg, DatasetPart::Test)?;
    let pp = cfg.postproc_config();
    let mut rows = Vec::new();
    for &scorer in &cfg.methods[cell.method_idx].scorers {
        let params = cfg.score_params(&cm.model, cell, scorer);
        // (post-processed scores, ground truth, brain mask) per subject.
        let mut posts: Vec<(Array3<f64>, Array3<bool>, Array3<bool>)> = Vec::new();
        for v in &test {
            let sv = score_volume(&cm.model, v, scorer, &params)?;
            let (post, _) = run_pipeline(&sv, &v.brain_mask, &pp)?;
            posts.push((post.scores, gt_of(v), v.brain_mask.clone()));
        }

        let mut pooled_scores = Vec::new();
        let mut pooled_labels = Vec::new();
        for (scores, gt, mask) in &posts {
            for ((&s, &g), &m) in scores.iter().zip(gt.iter()).zip(mask.iter()) {
                if m {
                    pooled_scores.push(s);
                    pooled_labels.push(g);
                }
            }
        }
        let auroc_v = auroc(&pooled_scores, &pooled_labels)?;
        let (_, auprc_v) = prc_and_auprc(&pooled_scores, &pooled_labels)?;

        let dice_subjects: Vec<(&Array3<f64>, &Array3<bool>)> =
            posts.iter().map(|(s, g, _)| (s, g)).collect();
        let (best_dice, t_star) = greedy_best_dice(&dice_subjects, &pp)?;
        let dice = dice_at_op(&dice_subjects, t_star, &pp);

        let stat_subjects: Vec<(&Array3<f64>, &Array3<bool>, &Array3<bool>)> =
            posts.iter().map(|(s, g, m)| (s, g, m)).collect();
        let (re_normal, re_anom) = residual_stats(&stat_subjects);
        let histograms = residual_histograms(&stat_subjects, HISTOGRAM_BINS);
        let chi_sq = histograms.chi_square();

        rows.push(CellRow {
            scorer,
            report: EvalReport {
                approach: cfg.approach(cell, scorer),
                auroc: auroc_v,
                auprc: auprc_v,
                best_dice,
                best_dice_threshold: t_star,
                dice,
                re_normal,
                re_anom,
                chi_sq,
            },
            histograms,
        });
    }

    let result = CellResult {
        cell_id: cfg.cell_id(cell),
        tag: cfg.methods[cell.method_idx].tag,
        fraction: cfg.subsample_fractions[cell.fraction_idx],
        cache_key,
        result_key: rkey,
        rows,
    };
    write_json(&report_path, &result)?;
    Ok(result)
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("manifest.json")
}

/// Record a completed cell. Single-writer: only the orchestrating process
/// (or a user-driven `evaluate`) calls this, never pooled workers.
pub fn mark_completed(cfg: &ExperimentConfig, cell: Cell) -> Result<(), CliError> {
    let path = manifest_path(cfg);
    let mut manifest: RunManifest = if path.is_file() {
        read_json(&path)?
    } else {
        RunManifest::default()
    };
    let id = cfg.cell_id(cell);
    if !manifest.completed.contains(&id) {
        manifest.completed.push(id);
        // Keep canonical matrix order regardless of completion order.
        let order: Vec<String> = cfg.cells().iter().map(|&c| cfg.cell_id(c)).collect();
        manifest.completed.sort_by_key(|c| order.iter().position(|o| o == c));
    }
    write_json(&path, &manifest)
}

/// Score the test set with one scorer and persist the raw (pre
/// post-processing) score volumes for inspection.
pub fn score_cell(
    cfg: &ExperimentConfig,
    cell: Cell,
    scorer: ScoreMethod,
) -> Result<PathBuf, CliError> {
    let cm = ensure_model(cfg, cell)?;
    let params = cfg.score_params(&cm.model, cell, scorer);
    let dir = cfg.output_dir.join("scores").join(cfg.cell_id(cell));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    for v in load_part(cfg, DatasetPart::Test)? {
        let sv = score_volume(&cm.model, &v, scorer, &params)?;
        write_score_volume(&dir, &sv, &v)?;
    }
    Ok(dir)
}

/// Execute every matrix cell in-process, sequentially and in canonical
/// order, then emit the report. Fails fast on the first error; completed
/// cells stay on disk together with the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    synth(cfg)?;
    for &cell in &cfg.cells() {
        evaluate_cell(cfg, cell)?;
        mark_completed(cfg, cell)?;
    }
    crate::report::emit(cfg)
}

/// Arguments forwarded verbatim to worker processes.
pub struct ForwardArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Like [`run_experiment`], but matrix cells run as independent worker
/// processes with at most `workers` in flight.
pub fn run_with_workers(
    cfg: &ExperimentConfig,
    forward: &ForwardArgs,
    workers: usize,
) -> Result<PathBuf, CliError> {
    if workers <= 1 {
        return run_experiment(cfg);
    }
    synth(cfg)?;
    let exe = std::env::current_exe().map_err(|e| CliError::io("locating worker binary", e))?;
    let cells = cfg.cells();
    let mut pending = 0..cells.len();
    let mut running: Vec<(std::process::Child, usize)> = Vec::new();
    let mut failure: Option<CliError> = None;

    loop {
        while failure.is_none() && running.len() < workers {
            let Some(index) = pending.next() else { break };
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg("cell")
                .arg("--config")
                .arg(&forward.config)
                .arg("--index")
                .arg(index.to_string());
            if let Some(seed) = forward.seed {
                cmd.arg("--seed").arg(seed.to_string());
            }
            if let Some(out) = &forward.out {
                cmd.arg("--out").arg(out);
            }
            let child = cmd
                .spawn()
                .map_err(|e| CliError::io(format!("spawning worker for cell {index}"), e))?;
            running.push((child, index));
        }
        if running.is_empty() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
        let mut still_running = Vec::new();
        for (mut child, index) in running {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let cell = cells[index];
                    if status.success() {
                        mark_completed(cfg, cell)?;
                    } else if failure.is_none() {
                        failure = Some(CliError::Worker {
                            cell: cfg.cell_id(cell),
                            code: status.code().unwrap_or(1),
                        });
                    }
                }
                Ok(None) => still_running.push((child, index)),
                Err(e) => {
                    if failure.is_none() {
                        failure = Some(CliError::io(format!("waiting for cell {index}"), e));
                    }
                }
            }
        }
        running = still_running;
    }

    if let Some(err) = failure {
        return Err(err);
    }
    crate::report::emit(cfg)
}

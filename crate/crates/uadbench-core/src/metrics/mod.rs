//! Voxel-level evaluation of score volumes: precision–recall and ROC
//! areas on dataset-pooled voxels, pooled best-DICE with its operating
//! point, per-patient DICE statistics at a fixed threshold, residual
//! statistics split by ground truth, residual-histogram χ² distance, and
//! cross-model metric correlations.

use crate::postproc::{binarize, prune_components, Connectivity, PostprocConfig};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("histograms have {left} and {right} bins")]
    BinMismatch { left: usize, right: usize },
    #[error("correlation needs at least 3 model rows, got {0}")]
    TooFewModels(usize),
}

/// Mean and population standard deviation of a value set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One model's full evaluation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub approach: String,
    pub auroc: f64,
    pub auprc: f64,
    /// Dataset-pooled best DICE and the threshold achieving it.
    pub best_dice: f64,
    pub best_dice_threshold: f64,
    /// Per-patient DICE at the validation-chosen operating point.
    pub dice: MeanStd,
    pub re_normal: MeanStd,
    /// `None` when the evaluation set has no anomalous voxels.
    pub re_anom: Option<MeanStd>,
    pub chi_sq: f64,
}

/// Normalized residual-intensity histograms over (0, 1], one for normal
/// and one for anomalous voxels; zero residuals are excluded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualHistograms {
    pub normal: Vec<f64>,
    pub anom: Vec<f64>,
    pub bin_count: usize,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&b| b).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Precision–recall curve over every distinct score threshold plus its
/// trapezoidal area. The curve is anchored at recall 0 with the precision
/// of the highest-score threshold. Points are (recall, precision).
pub fn prc_and_auprc(
    scores: &[f64],
    labels: &[bool],
) -> Result<(Vec<(f64, f64)>, f64), MetricsError> {
    let (pos, _) = check_lengths(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        // Consume the whole tie group at this threshold.
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }

    let anchor = (0.0, curve[0].1);
    let mut area = 0.0;
    let mut prev = anchor;
    for &(r, p) in &curve {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    let mut full = vec![anchor];
    full.extend(curve);
    Ok((full, area))
}

/// Area under the ROC curve, computed as the Mann–Whitney statistic with
/// average ranks over ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (pos, neg) = check_lengths(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        let start = i;
        let mut tie_pos = 0usize;
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tie_pos += 1;
            }
            i += 1;
        }
        // 1-based ranks start..i share the average rank.
        let avg_rank = (start + 1 + i) as f64 / 2.0;
        rank_sum_pos += avg_rank * tie_pos as f64;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Overlap `2|a∩b| / (|a|+|b|)`; two empty masks count as perfect
/// agreement (1.0).
pub fn dice(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "DICE over unequal shapes");
    let mut inter = 0usize;
    let (mut na, mut nb) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dataset-pooled DICE after binarization and component pruning at `t`.
pub fn pooled_dice_at(
    subjects: &[(&Array3<f64>, &Array3<bool>)],
    t: f64,
    cfg: &PostprocConfig,
) -> f64 {
    let mut inter = 0usize;
    let (mut na, mut nb) = (0usize, 0usize);
    for (scores, gt) in subjects {
        let bin = prune_components(
            &binarize(scores, t),
            cfg.min_component_voxels,
            cfg.connectivity,
        );
        for (&p, &g) in bin.iter().zip(gt.iter()) {
            inter += (p && g) as usize;
            na += p as usize;
            nb += g as usize;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Sweep the full three-decimal threshold grid and return the best pooled
/// DICE with the smallest threshold achieving it.
///
/// Evaluating 1001 thresholds by re-binarizing and re-pruning would cost
/// O(V) per threshold. Walking the grid downward instead only ever turns
/// voxels on, and connected components only ever merge, so one
/// union-find pass per subject yields every threshold's pruned
/// prediction counts exactly — the same integers the naive
/// [`pooled_dice_at`] produces.
pub fn greedy_best_dice(
    subjects: &[(&Array3<f64>, &Array3<bool>)],
    cfg: &PostprocConfig,
) -> Result<(f64, f64), MetricsError> {
    if !subjects.iter().any(|(_, gt)| gt.iter().any(|&b| b)) {
        return Err(MetricsError::DegenerateLabels);
    }
    let total_gt: usize = subjects
        .iter()
        .map(|(_, gt)| gt.iter().filter(|&&b| b).count())
        .sum();

    // kept[k] = (pruned predicted voxels, their gt overlap) at t = k/1000,
    // summed over subjects.
    let mut kept = vec![(0u64, 0u64); GRID_STEPS + 1];
    for (scores, gt) in subjects {
        sweep_subject(scores, gt, cfg, &mut kept);
    }

    let mut best = (f64::NEG_INFINITY, 0.0);
    for (k, &(pred, inter)) in kept.iter().enumerate() {
        let d = if pred + total_gt as u64 == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (pred + total_gt as u64) as f64
        };
        let t = k as f64 / GRID_STEPS as f64;
        if d > best.0 {
            best = (d, t);
        }
    }
    Ok(best)
}

const GRID_STEPS: usize = 1000;

/// Accumulate one subject's pruned prediction counts for every grid
/// threshold via an activation sweep with union-find component merging.
fn sweep_subject(
    scores: &Array3<f64>,
    gt: &Array3<bool>,
    cfg: &PostprocConfig,
    kept: &mut [(u64, u64)],
) {
    let shape = scores.dim();
    let (nx, ny, nz) = shape;
    let n = nx * ny * nz;
    let flat_scores = scores.as_slice().expect("standard layout");
    let flat_gt = gt.as_slice().expect("standard layout");

    // Voxels in descending score order; only positive scores can ever
    // satisfy the strict `score > t` binarization for t ≥ 0.
    let mut order: Vec<u32> = (0..n as u32).filter(|&i| flat_scores[i as usize] > 0.0).collect();
    order.sort_by(|&a, &b| {
        flat_scores[b as usize].partial_cmp(&flat_scores[a as usize]).unwrap()
    });

    let offsets = neighbor_offsets(cfg.connectivity);
    let min_size = cfg.min_component_voxels as u64;
    let mut parent: Vec<u32> = vec![u32::MAX; n]; // MAX = inactive
    let mut size: Vec<u64> = vec![0; n];
    let mut inter: Vec<u64> = vec![0; n];

    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    // Running totals over components of size ≥ min_size.
    let (mut pred, mut overlap) = (0u64, 0u64);
    let mut cursor = 0usize;
    for k in (0..=GRID_STEPS).rev() {
        let t = k as f64 / GRID_STEPS as f64;
        while cursor < order.len() && flat_scores[order[cursor] as usize] > t {
            let v = order[cursor];
            cursor += 1;
            let vi = v as usize;
            parent[vi] = v;
            size[vi] = 1;
            inter[vi] = flat_gt[vi] as u64;
            if 1 >= min_size {
                pred += 1;
                overlap += inter[vi];
            }
            let (x, y, z) = (vi / (ny * nz), (vi / nz) % ny, vi % nz);
            for &(dx, dy, dz) in &offsets {
                let (ax, ay, az) =
                    (x as isize + dx, y as isize + dy, z as isize + dz);
                if ax < 0 || ay < 0 || az < 0 {
                    continue;
                }
                let (ax, ay, az) = (ax as usize, ay as usize, az as usize);
                if ax >= nx || ay >= ny || az >= nz {
                    continue;
                }
                let ni = ax * ny * nz + ay * nz + az;
                if parent[ni] == u32::MAX {
                    continue;
                }
                let ra = find(&mut parent, v);
                let rb = find(&mut parent, ni as u32);
                if ra == rb {
                    continue;
                }
                // Merge smaller into larger; retire both side's counter
                // contributions and re-add the union's.
                let (hi, lo) = if size[ra as usize] >= size[rb as usize] {
                    (ra as usize, rb as usize)
                } else {
                    (rb as usize, ra as usize)
                };
                if size[hi] >= min_size {
                    pred -= size[hi];
                    overlap -= inter[hi];
                }
                if size[lo] >= min_size {
                    pred -= size[lo];
                    overlap -= inter[lo];
                }
                parent[lo] = hi as u32;
                size[hi] += size[lo];
                inter[hi] += inter[lo];
                if size[hi] >= min_size {
                    pred += size[hi];
                    overlap += inter[hi];
                }
            }
        }
        kept[k].0 += pred;
        kept[k].1 += overlap;
    }
}

fn neighbor_offsets(connectivity: Connectivity) -> Vec<(isize, isize, isize)> {
    let mut offsets = Vec::new();
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if matches!(connectivity, Connectivity::TwentySix) || manhattan == 1 {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    offsets
}

/// Per-patient DICE at a fixed operating point: mean and population
/// standard deviation across patients.
pub fn dice_at_op(
    subjects: &[(&Array3<f64>, &Array3<bool>)],
    t: f64,
    cfg: &PostprocConfig,
) -> MeanStd {
    let per_patient: Vec<f64> = subjects
        .iter()
        .map(|(scores, gt)| {
            let bin = prune_components(
                &binarize(scores, t),
                cfg.min_component_voxels,
                cfg.connectivity,
            );
            dice(&bin, gt)
        })
        .collect();
    MeanStd::of(&per_patient)
}

/// Mean ± std of score values over normal (in-mask, non-lesion) and
/// anomalous (lesion) voxels, pooled across subjects. The anomalous side
/// is `None` when no lesion voxel exists.
pub fn residual_stats(
    subjects: &[(&Array3<f64>, &Array3<bool>, &Array3<bool>)],
) -> (MeanStd, Option<MeanStd>) {
    let mut normal = Vec::new();
    let mut anom = Vec::new();
    for (scores, gt, mask) in subjects {
        for ((&s, &g), &m) in scores.iter().zip(gt.iter()).zip(mask.iter()) {
            if !m {
                continue;
            }
            if g {
                anom.push(s);
            } else {
                normal.push(s);
            }
        }
    }
    let re_a = if anom.is_empty() {
        None
    } else {
        Some(MeanStd::of(&anom))
    };
    (MeanStd::of(&normal), re_a)
}

/// Build normalized residual histograms over (0, 1] with `bin_count`
/// uniform bins; zero (and out-of-range) residuals are excluded.
pub fn residual_histograms(
    subjects: &[(&Array3<f64>, &Array3<bool>, &Array3<bool>)],
    bin_count: usize,
) -> ResidualHistograms {
    let mut normal = vec![0.0; bin_count];
    let mut anom = vec![0.0; bin_count];
    for (scores, gt, mask) in subjects {
        for ((&s, &g), &m) in scores.iter().zip(gt.iter()).zip(mask.iter()) {
            if !m || !(s > 0.0 && s <= 1.0) {
                continue;
            }
            // Bin i covers (i/n, (i+1)/n].
            let bin = ((s * bin_count as f64).ceil() as usize - 1).min(bin_count - 1);
            if g {
                anom[bin] += 1.0;
            } else {
                normal[bin] += 1.0;
            }
        }
    }
    for h in [&mut normal, &mut anom] {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            for v in h.iter_mut() {
                *v /= total;
            }
        }
    }
    ResidualHistograms {
        normal,
        anom,
        bin_count,
    }
}

impl ResidualHistograms {
    /// Symmetric χ² distance between the normal and anomalous histograms.
    pub fn chi_square(&self) -> f64 {
        chi_square(&self.normal, &self.anom).expect("same bin count by construction")
    }
}

/// Symmetric χ² distance `½·Σ (p−q)²/(p+q)` over bins with any mass.
pub fn chi_square(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::BinMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q.iter())
        .filter(|(&a, &b)| a + b > 0.0)
        .map(|(&a, &b)| (a - b) * (a - b) / (a + b))
        .sum::<f64>()
        / 2.0)
}

/// The metric columns the cross-model correlation is computed over.
pub const CORR_COLUMNS: [&str; 5] = ["AUPRC", "⌈DICE⌉", "ℓ1-RE_N", "ℓ1-RE_A", "χ²"];

/// Pairwise Pearson correlation across models for the `CORR_COLUMNS`
/// metrics. Zero-variance (or missing-value) columns produce NaN entries.
pub fn correlation_matrix(reports: &[EvalReport]) -> Result<Array2<f64>, MetricsError> {
    if reports.len() < 3 {
        return Err(MetricsError::TooFewModels(reports.len()));
    }
    let columns: Vec<Vec<f64>> = (0..CORR_COLUMNS.len())
        .map(|c| {
            reports
                .iter()
                .map(|r| match c {
                    0 => r.auprc,
                    1 => r.best_dice,
                    2 => r.re_normal.mean,
                    3 => r.re_anom.map(|m| m.mean).unwrap_or(f64::NAN),
                    _ => r.chi_sq,
                })
                .collect()
        })
        .collect();
    let k = columns.len();
    let mut m = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            m[[i, j]] = pearson(&columns[i], &columns[j]);
        }
    }
    Ok(m)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// The fixed result-table header.
pub const CSV_HEADER: &str = "Approach,AUROC,AUPRC,⌈DICE⌉,DICE,ℓ1-RE_N,ℓ1-RE_A,χ²";

fn mean_std_cell(m: &MeanStd) -> String {
    format!("{:.6}±{:.6}", m.mean, m.std)
}

impl EvalReport {
    /// One comma-separated row under `CSV_HEADER`.
    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        write!(
            row,
            "{},{:.6},{:.6},{:.6},{},{},{},{:.6}",
            self.approach,
            self.auroc,
            self.auprc,
            self.best_dice,
            mean_std_cell(&self.dice),
            mean_std_cell(&self.re_normal),
            self.re_anom
                .as_ref()
                .map(mean_std_cell)
                .unwrap_or_else(|| "undefined".into()),
            self.chi_sq
        )
        .unwrap();
        row
    }
}

/// Render a full result table: header plus one row per report.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::Connectivity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_prune_cfg() -> PostprocConfig {
        PostprocConfig {
            min_component_voxels: 1,
            connectivity: Connectivity::TwentySix,
            ..PostprocConfig::default()
        }
    }

    #[test]
    fn perfect_separation_saturates_both_areas() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        let (_, auprc) = prc_and_auprc(&scores, &labels).unwrap();
        assert!((auprc - 1.0).abs() < 1e-12);
        assert!((auroc(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_yield_auprc_equal_to_prevalence() {
        let scores = [0.4; 10];
        let mut labels = [false; 10];
        labels[0] = true;
        labels[1] = true;
        labels[2] = true;
        let (_, auprc) = prc_and_auprc(&scores, &labels).unwrap();
        assert!((auprc - 0.3).abs() < 1e-12);
        // A single tie group is also the classic 0.5-AUROC case.
        assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 1e-12);
    }

    /// Exhaustive threshold-enumeration oracle for the PR curve.
    fn auprc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&b| b).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut points = Vec::new();
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels.iter()) {
                if s >= t {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            points.push((tp / pos, tp / (tp + fp)));
        }
        let mut area = 0.0;
        let mut prev = (0.0, points[0].1);
        for &(r, p) in &points {
            area += (r - prev.0) * (p + prev.1) / 2.0;
            prev = (r, p);
        }
        area
    }

    #[test]
    fn auprc_matches_the_enumeration_oracle_on_the_worked_example() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, false, true, false];
        let (curve, auprc) = prc_and_auprc(&scores, &labels).unwrap();
        assert!((auprc - auprc_oracle(&scores, &labels)).abs() < 1e-12);
        assert_eq!(curve[0], (0.0, 1.0)); // anchor
        assert!((auprc - 19.0 / 24.0).abs() < 1e-12); // hand integration
    }

    #[test]
    fn auprc_matches_the_enumeration_oracle_on_random_inputs_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = 60;
            // Coarse quantization forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            if labels.iter().all(|&b| b) || !labels.iter().any(|&b| b) {
                continue;
            }
            let (_, got) = prc_and_auprc(&scores, &labels).unwrap();
            assert!((got - auprc_oracle(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_equals_the_pairwise_comparison_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let got = auroc(&scores, &labels).unwrap();

        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        assert!((got - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn auroc_of_label_independent_scores_hovers_at_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((0.45..0.55).contains(&a), "AUROC {a} too far from chance");
    }

    #[test]
    fn areas_are_invariant_under_strictly_monotone_score_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..200).map(|_| (rng.gen::<f64>() * 4.0).round() / 4.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.25)).collect();
        let base_prc = prc_and_auprc(&scores, &labels).unwrap().1;
        let base_roc = auroc(&scores, &labels).unwrap();
        for transform in [|v: f64| v.exp(), |v: f64| 3.0 * v + 7.0] {
            let mapped: Vec<f64> = scores.iter().map(|&v| transform(v)).collect();
            assert_eq!(prc_and_auprc(&mapped, &labels).unwrap().1, base_prc);
            assert_eq!(auroc(&mapped, &labels).unwrap(), base_roc);
        }
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let scores = [0.1, 0.2];
        assert!(matches!(
            prc_and_auprc(&scores, &[true, true]),
            Err(MetricsError::DegenerateLabels)
        ));
        assert!(matches!(
            auroc(&scores, &[false, false]),
            Err(MetricsError::DegenerateLabels)
        ));
        assert!(matches!(
            prc_and_auprc(&scores, &[true]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    fn cube(n: usize, fill: &[[usize; 3]]) -> Array3<bool> {
        let mut a = Array3::from_elem((n, n, n), false);
        for &v in fill {
            a[v] = true;
        }
        a
    }

    #[test]
    fn dice_handles_identity_disjointness_and_partial_overlap() {
        let a = cube(4, &[[0, 0, 0], [1, 1, 1]]);
        let b = cube(4, &[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &cube(4, &[[3, 3, 3]])), 0.0);
        assert_eq!(dice(&a, &b), 0.5); // 2 and 2 voxels, 1 shared
        let empty = cube(4, &[]);
        assert_eq!(dice(&empty, &empty), 1.0);
    }

    #[test]
    fn indicator_scores_reach_perfect_pooled_dice() {
        let mut scores = Array3::zeros((8, 8, 8));
        let mut gt = Array3::from_elem((8, 8, 8), false);
        for i in 0..3 {
            scores[[i, 0, 0]] = 1.0;
            gt[[i, 0, 0]] = true;
        }
        let subjects = [(&scores, &gt)];
        let (best, t) = greedy_best_dice(&subjects, &no_prune_cfg()).unwrap();
        assert_eq!(best, 1.0);
        // Binarization is strict, so t = 0 already separates the indicator;
        // the search reports the smallest maximizing threshold.
        assert_eq!(t, 0.0);
    }

    #[test]
    fn greedy_search_matches_the_exhaustive_grid_and_dominates_coarser_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores = Array3::from_shape_simple_fn((16, 16, 16), || rng.gen::<f64>());
        let gt = Array3::from_shape_simple_fn((16, 16, 16), || rng.gen_bool(0.1));
        let cfg = PostprocConfig {
            min_component_voxels: 2,
            ..no_prune_cfg()
        };
        let subjects = [(&scores, &gt)];
        let (best, t_star) = greedy_best_dice(&subjects, &cfg).unwrap();

        let mut grid_best = f64::NEG_INFINITY;
        for k in 0..=1000u32 {
            let d = pooled_dice_at(&subjects, k as f64 / 1000.0, &cfg);
            grid_best = grid_best.max(d);
        }
        assert!((best - grid_best).abs() < 1e-9);
        assert_eq!(pooled_dice_at(&subjects, t_star, &cfg), best);

        let mut coarse_best = f64::NEG_INFINITY;
        for k in 0..=100u32 {
            coarse_best = coarse_best.max(pooled_dice_at(&subjects, k as f64 / 100.0, &cfg));
        }
        assert!(best >= coarse_best);
    }

    #[test]
    fn activation_sweep_reproduces_naive_pruning_at_every_grid_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Scores mix negatives, exact zeros, and values beyond 1 so the
        // sweep's activation filter faces the same edge cases strict
        // binarization does.
        let gen = |rng: &mut ChaCha8Rng| {
            Array3::from_shape_simple_fn((12, 12, 12), || match rng.gen_range(0..10u8) {
                0 => 0.0,
                1 => -rng.gen::<f64>(),
                2 => 1.0 + rng.gen::<f64>(),
                _ => rng.gen::<f64>(),
            })
        };
        let (sa, sb) = (gen(&mut rng), gen(&mut rng));
        let ga = Array3::from_shape_simple_fn((12, 12, 12), || rng.gen_bool(0.12));
        let gb = Array3::from_shape_simple_fn((12, 12, 12), || rng.gen_bool(0.05));

        for connectivity in [Connectivity::Six, Connectivity::TwentySix] {
            for min_component_voxels in [1usize, 5, 8] {
                let cfg = PostprocConfig {
                    min_component_voxels,
                    connectivity,
                    ..PostprocConfig::default()
                };
                let mut kept = vec![(0u64, 0u64); GRID_STEPS + 1];
                sweep_subject(&sa, &ga, &cfg, &mut kept);
                sweep_subject(&sb, &gb, &cfg, &mut kept);
                for k in (0..=GRID_STEPS).step_by(7).chain([GRID_STEPS]) {
                    let t = k as f64 / GRID_STEPS as f64;
                    let (mut pred, mut inter) = (0u64, 0u64);
                    for (scores, gt) in [(&sa, &ga), (&sb, &gb)] {
                        let bin = prune_components(
                            &binarize(scores, t),
                            cfg.min_component_voxels,
                            cfg.connectivity,
                        );
                        for (&p, &g) in bin.iter().zip(gt.iter()) {
                            pred += p as u64;
                            inter += (p && g) as u64;
                        }
                    }
                    assert_eq!(kept[k], (pred, inter), "t={t} {connectivity:?} min={min_component_voxels}");
                }
            }
        }
    }

    #[test]
    fn all_empty_ground_truth_is_degenerate_for_the_search() {
        let scores = Array3::zeros((4, 4, 4));
        let gt = Array3::from_elem((4, 4, 4), false);
        assert!(matches!(
            greedy_best_dice(&[(&scores, &gt)], &no_prune_cfg()),
            Err(MetricsError::DegenerateLabels)
        ));
    }

    #[test]
    fn per_patient_dice_statistics_use_the_population_std() {
        let mut perfect = Array3::zeros((6, 6, 6));
        let mut gt = Array3::from_elem((6, 6, 6), false);
        for i in 0..4 {
            perfect[[i, 2, 2]] = 1.0;
            gt[[i, 2, 2]] = true;
        }
        let cfg = no_prune_cfg();
        let single = dice_at_op(&[(&perfect, &gt)], 0.5, &cfg);
        assert_eq!(single.mean, 1.0);
        assert_eq!(single.std, 0.0);

        // Patient two detects nothing where something exists: DICE 0.
        let blank = Array3::zeros((6, 6, 6));
        let both = dice_at_op(&[(&perfect, &gt), (&blank, &gt)], 0.5, &cfg);
        assert!((both.mean - 0.5).abs() < 1e-12);
        assert!((both.std - 0.5).abs() < 1e-12);
    }

    #[test]
    fn the_validation_operating_point_replays_to_the_validation_best_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores = Array3::from_shape_simple_fn((12, 12, 12), || rng.gen::<f64>());
        let gt = Array3::from_shape_simple_fn((12, 12, 12), || rng.gen_bool(0.15));
        let cfg = no_prune_cfg();
        let subjects = [(&scores, &gt)];
        let (best, t_star) = greedy_best_dice(&subjects, &cfg).unwrap();
        assert_eq!(pooled_dice_at(&subjects, t_star, &cfg), best);
    }

    #[test]
    fn residual_statistics_split_exactly_by_ground_truth() {
        let uniform = Array3::from_elem((6, 6, 6), 0.3);
        let mask = Array3::from_elem((6, 6, 6), true);
        let mut gt = Array3::from_elem((6, 6, 6), false);
        gt[[1, 1, 1]] = true;
        let (re_n, re_a) = residual_stats(&[(&uniform, &gt, &mask)]);
        assert!((re_n.mean - 0.3).abs() < 1e-12 && re_n.std < 1e-12);
        let re_a = re_a.unwrap();
        assert!((re_a.mean - 0.3).abs() < 1e-12 && re_a.std < 1e-12);

        // Residual equal to the ground-truth indicator.
        let indicator = gt.mapv(|b| if b { 1.0 } else { 0.0 });
        let (re_n, re_a) = residual_stats(&[(&indicator, &gt, &mask)]);
        assert_eq!(re_n.mean, 0.0);
        assert_eq!(re_a.unwrap().mean, 1.0);

        // No anomalous voxels anywhere: the anomalous side is undefined.
        let healthy = Array3::from_elem((6, 6, 6), false);
        let (_, re_a) = residual_stats(&[(&uniform, &healthy, &mask)]);
        assert!(re_a.is_none());
    }

    #[test]
    fn residual_statistics_match_a_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores = Array3::from_shape_simple_fn((10, 10, 10), || rng.gen::<f64>());
        let gt = Array3::from_shape_simple_fn((10, 10, 10), || rng.gen_bool(0.2));
        let mask = Array3::from_shape_simple_fn((10, 10, 10), || rng.gen_bool(0.8));
        let (re_n, re_a) = residual_stats(&[(&scores, &gt, &mask)]);

        for (want, side) in [(re_n, false), (re_a.unwrap(), true)] {
            let vals: Vec<f64> = scores
                .iter()
                .zip(gt.iter())
                .zip(mask.iter())
                .filter(|((_, &g), &m)| m && g == side)
                .map(|((&s, _), _)| s)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((want.mean - mean).abs() < 1e-7);
            assert!((want.std - var.sqrt()).abs() < 1e-7);
        }
    }

    #[test]
    fn histograms_normalize_and_exclude_zero_and_out_of_range_residuals() {
        let mut scores = Array3::zeros((4, 4, 4));
        scores[[0, 0, 0]] = 0.005; // bin 0
        scores[[1, 0, 0]] = 0.5; // bin 49
        scores[[2, 0, 0]] = 1.0; // top bin, inclusive
        scores[[3, 0, 0]] = 1.5; // out of range: dropped
        let gt = Array3::from_elem((4, 4, 4), false);
        let mask = Array3::from_elem((4, 4, 4), true);
        let h = residual_histograms(&[(&scores, &gt, &mask)], 100);
        assert!((h.normal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h.normal[0], 1.0 / 3.0);
        assert_eq!(h.normal[49], 1.0 / 3.0);
        assert_eq!(h.normal[99], 1.0 / 3.0);
        // All-zero anomalous side stays all-zero (no lesion voxels).
        assert!(h.anom.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chi_square_distance_is_zero_on_identity_one_on_disjoint_and_symmetric() {
        let p = vec![0.5, 0.5, 0.0];
        let q = vec![0.0, 0.0, 1.0];
        assert_eq!(chi_square(&p, &p).unwrap(), 0.0);
        assert!((chi_square(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(chi_square(&p, &q).unwrap(), chi_square(&q, &p).unwrap());
        assert!(matches!(
            chi_square(&p, &[0.1]),
            Err(MetricsError::BinMismatch { .. })
        ));
    }

    fn report(approach: &str, auprc: f64, best: f64, re_n: f64, re_a: f64, chi: f64) -> EvalReport {
        EvalReport {
            approach: approach.into(),
            auroc: 0.5,
            auprc,
            best_dice: best,
            best_dice_threshold: 0.5,
            dice: MeanStd { mean: best, std: 0.0 },
            re_normal: MeanStd { mean: re_n, std: 0.0 },
            re_anom: Some(MeanStd { mean: re_a, std: 0.0 }),
            chi_sq: chi,
        }
    }

    #[test]
    fn correlation_matrix_matches_the_covariance_definition() {
        let reports: Vec<EvalReport> = (0..5)
            .map(|i| {
                let x = i as f64;
                // AUPRC rises, ⌈DICE⌉ falls linearly (exact anti-correlation),
                // the rest vary nonlinearly.
                report(&format!("m{i}"), 0.1 * x, 1.0 - 0.1 * x, x * x, 3.0 - x, (x - 2.0).abs())
            })
            .collect();
        let m = correlation_matrix(&reports).unwrap();
        for i in 0..5 {
            assert!((m[[i, i]] - 1.0).abs() < 1e-12);
        }
        assert!((m[[0, 1]] + 1.0).abs() < 1e-12, "exact anti-correlation");

        // Independent Pearson oracle for one off-diagonal pair.
        let x: Vec<f64> = reports.iter().map(|r| r.auprc).collect();
        let y: Vec<f64> = reports.iter().map(|r| r.re_normal.mean).collect();
        let n = 5.0;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n).sqrt();
        assert!((m[[0, 2]] - cov / (sx * sy)).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_columns_yield_nan_and_few_models_error() {
        let reports: Vec<EvalReport> =
            (0..4).map(|i| report(&format!("m{i}"), 0.4, 0.5, i as f64, 1.0, 2.0)).collect();
        let m = correlation_matrix(&reports).unwrap();
        assert!(m[[0, 2]].is_nan(), "constant AUPRC column must be NaN");
        assert!(matches!(
            correlation_matrix(&reports[..2]),
            Err(MetricsError::TooFewModels(2))
        ));
    }

    #[test]
    fn the_result_table_has_the_fixed_schema_and_formatting() {
        let r = report("VAE (dense)", 0.25, 0.5, 0.0123456789, 0.9, 0.75);
        let csv = reports_to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "Approach,AUROC,AUPRC,⌈DICE⌉,DICE,ℓ1-RE_N,ℓ1-RE_A,χ²");
        assert_eq!(
            lines.next().unwrap(),
            "VAE (dense),0.500000,0.250000,0.500000,0.500000±0.000000,0.012346±0.000000,0.900000±0.000000,0.750000"
        );

        let mut undef = report("AE", 0.25, 0.5, 0.1, 0.9, 0.75);
        undef.re_anom = None;
        assert!(undef.csv_row().contains(",undefined,"));
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(bits in proptest::collection::vec(0u8..4, 64)) {
            let a = Array3::from_shape_vec((4, 4, 4), bits.iter().map(|&b| b & 1 == 1).collect()).unwrap();
            let b = Array3::from_shape_vec((4, 4, 4), bits.iter().map(|&b| b & 2 == 2).collect()).unwrap();
            let d = dice(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a));
        }

        #[test]
        fn auroc_is_invariant_under_random_affine_maps(
            seed in 0u64..1000,
            slope in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..40).map(|_| (rng.gen::<f64>() * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.5)).collect();
            prop_assume!(labels.iter().any(|&b| b) && !labels.iter().all(|&b| b));
            let mapped: Vec<f64> = scores.iter().map(|&v| slope * v + shift).collect();
            prop_assert_eq!(
                auroc(&scores, &labels).unwrap(),
                auroc(&mapped, &labels).unwrap()
            );
        }
    }
}

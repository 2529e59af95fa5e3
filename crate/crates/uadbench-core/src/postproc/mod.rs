//! The fixed residual post-processing chain every method's output passes
//! through before evaluation: brain-mask erosion and multiplication,
//! positive-residual filtering, 3D median filtering, and — once a
//! threshold is chosen — binarization with small-component pruning.
//!
//! The stage order is part of the API contract and not configurable.

use crate::scoring::ScoreVolume;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("{context}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid post-processing config: {0}")]
    InvalidConfig(String),
}

/// A binary segmentation at the source volume's shape; always a subset of
/// the brain mask.
pub type BinaryVolume = Array3<bool>;

/// Voxel neighborhood used for connected components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets of this connectivity.
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => l1 == 1,
                        Connectivity::Eighteen => (1..=2).contains(&l1),
                        Connectivity::TwentySix => l1 >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    /// Brain-mask erosion radius in voxels (L1 ball).
    pub erosion_radius: usize,
    /// Keep only positive signed residuals (hyper-intense lesion datasets).
    pub keep_positive_only: bool,
    /// Median kernel; the pipeline is defined for exactly 5×5×5.
    pub median_kernel: [usize; 3],
    /// Connected components below this voxel count are discarded.
    pub min_component_voxels: usize,
    pub connectivity: Connectivity,
    /// Binarization threshold in [0, 1]; `None` leaves the output
    /// continuous (threshold-free metrics).
    pub threshold: Option<f64>,
}

impl Default for PostprocConfig {
    fn default() -> PostprocConfig {
        PostprocConfig {
            erosion_radius: 3,
            keep_positive_only: true,
            median_kernel: [5, 5, 5],
            min_component_voxels: 8,
            connectivity: Connectivity::TwentySix,
            threshold: None,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<(), PostprocError> {
        if self.median_kernel != [5, 5, 5] {
            return Err(PostprocError::InvalidConfig(format!(
                "median kernel must be 5x5x5, got {:?}",
                self.median_kernel
            )));
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(PostprocError::InvalidConfig(format!(
                    "threshold {t} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Morphological erosion by an L1 ball of `radius` (radius-fold erosion by
/// the 6-neighborhood cross); voxels outside the array count as false.
pub fn erode_mask(mask: &Array3<bool>, radius: usize) -> Array3<bool> {
    let mut out = mask.clone();
    let (nx, ny, nz) = out.dim();
    for _ in 0..radius {
        let prev = out.clone();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !prev[[x, y, z]] {
                        continue;
                    }
                    let interior = x > 0
                        && x + 1 < nx
                        && y > 0
                        && y + 1 < ny
                        && z > 0
                        && z + 1 < nz
                        && prev[[x - 1, y, z]]
                        && prev[[x + 1, y, z]]
                        && prev[[x, y - 1, z]]
                        && prev[[x, y + 1, z]]
                        && prev[[x, y, z - 1]]
                        && prev[[x, y, z + 1]];
                    out[[x, y, z]] = interior;
                }
            }
        }
    }
    out
}

/// Positive-residual filter: with the flag set, `max(signed, 0)`;
/// otherwise the plain magnitude `|signed|`.
pub fn signed_to_scored(residual_signed: &Array3<f64>, keep_positive_only: bool) -> Array3<f64> {
    if keep_positive_only {
        residual_signed.mapv(|v| v.max(0.0))
    } else {
        residual_signed.mapv(f64::abs)
    }
}

/// 5×5×5 median filter with replicate padding at the edges.
pub fn median_filter_3d(scores: &Array3<f64>) -> Array3<f64> {
    let (nx, ny, nz) = scores.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    let mut window = [0.0f64; 125];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut k = 0;
                for dx in -2..=2isize {
                    for dy in -2..=2isize {
                        for dz in -2..=2isize {
                            window[k] = scores[[
                                clamp(x as isize + dx, nx),
                                clamp(y as isize + dy, ny),
                                clamp(z as isize + dz, nz),
                            ]];
                            k += 1;
                        }
                    }
                }
                let (_, median, _) =
                    window.select_nth_unstable_by(62, |a, b| a.partial_cmp(b).unwrap());
                out[[x, y, z]] = *median;
            }
        }
    }
    out
}

/// Voxel true iff its score strictly exceeds `t`.
pub fn binarize(scores: &Array3<f64>, t: f64) -> BinaryVolume {
    scores.mapv(|v| v > t)
}

/// Remove connected components smaller than `min_voxels`.
pub fn prune_components(
    b: &BinaryVolume,
    min_voxels: usize,
    connectivity: Connectivity,
) -> BinaryVolume {
    let mut out = b.clone();
    let offsets = connectivity.offsets();
    let (nx, ny, nz) = b.dim();
    let mut seen = Array3::from_elem((nx, ny, nz), false);
    let mut component = Vec::new();
    let mut stack = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !b[[x, y, z]] || seen[[x, y, z]] {
                    continue;
                }
                component.clear();
                stack.push([x, y, z]);
                seen[[x, y, z]] = true;
                while let Some(v) = stack.pop() {
                    component.push(v);
                    for o in &offsets {
                        let n = [
                            v[0] as isize + o[0],
                            v[1] as isize + o[1],
                            v[2] as isize + o[2],
                        ];
                        if n.iter().any(|&c| c < 0)
                            || n[0] as usize >= nx
                            || n[1] as usize >= ny
                            || n[2] as usize >= nz
                        {
                            continue;
                        }
                        let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                        if b[n] && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
                if component.len() < min_voxels {
                    for &v in &component {
                        out[v] = false;
                    }
                }
            }
        }
    }
    out
}

/// The full fixed-order chain: erode → mask-multiply → positive-filter →
/// median → re-mask, then binarize + prune when a threshold is set. The
/// continuous output is retained for threshold-free metrics.
pub fn run_pipeline(
    score: &ScoreVolume,
    brain_mask: &Array3<bool>,
    cfg: &PostprocConfig,
) -> Result<(ScoreVolume, Option<BinaryVolume>), PostprocError> {
    cfg.validate()?;
    if score.scores.shape() != brain_mask.shape() {
        return Err(PostprocError::ShapeMismatch {
            context: "pipeline",
            left: score.scores.shape().to_vec(),
            right: brain_mask.shape().to_vec(),
        });
    }

    let eroded = erode_mask(brain_mask, cfg.erosion_radius);
    // The positive filter interprets the signed capture; without the flag
    // the method's own magnitude map is the score.
    let mut scores = if cfg.keep_positive_only {
        signed_to_scored(&score.signed, true)
    } else {
        score.scores.clone()
    };
    ndarray::Zip::from(&mut scores).and(&eroded).for_each(|s, &m| {
        if !m {
            *s = 0.0;
        }
    });
    let mut scores = median_filter_3d(&scores);
    // The median's replicate padding can smear nonzero values across the
    // mask boundary; the contract keeps everything outside it at zero.
    ndarray::Zip::from(&mut scores).and(&eroded).for_each(|s, &m| {
        if !m {
            *s = 0.0;
        }
    });

    let binary = cfg.threshold.map(|t| {
        prune_components(
            &binarize(&scores, t),
            cfg.min_component_voxels,
            cfg.connectivity,
        )
    });

    let mut signed = score.signed.clone();
    ndarray::Zip::from(&mut signed).and(&eroded).for_each(|s, &m| {
        if !m {
            *s = 0.0;
        }
    });
    Ok((
        ScoreVolume {
            scores,
            signed,
            source_subject: score.source_subject.clone(),
            method: score.method,
            n_samples: score.n_samples,
            n_iters: score.n_iters,
        },
        binary,
    ))
}

//! The volumetric sample type and intensity normalization.

use super::DataError;
use ndarray::Array3;

/// One skull-stripped, single-channel scan with its brain mask and an
/// optional ground-truth anomaly mask. Axes are (x, y, z); axial slices are
/// planes of constant z.
#[derive(Clone, Debug)]
pub struct Volume {
    /// Non-negative intensities; arbitrary physical units before
    /// normalization, dimensionless in [0, 1] after.
    pub intensities: Array3<f64>,
    pub brain_mask: Array3<bool>,
    /// Anomalous voxels. `Some` with all-false means "known healthy";
    /// `None` means no annotation exists.
    pub gt_mask: Option<Array3<bool>>,
    pub subject_id: String,
    pub dataset_id: String,
    pub normalized: bool,
}

impl Volume {
    /// Construct and validate. All invariant violations are reported as
    /// [`DataError::InvalidVolume`].
    pub fn new(
        intensities: Array3<f64>,
        brain_mask: Array3<bool>,
        gt_mask: Option<Array3<bool>>,
        subject_id: impl Into<String>,
        dataset_id: impl Into<String>,
        normalized: bool,
    ) -> Result<Self, DataError> {
        let v = Volume {
            intensities,
            brain_mask,
            gt_mask,
            subject_id: subject_id.into(),
            dataset_id: dataset_id.into(),
            normalized,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.intensities.shape();
        if self.brain_mask.shape() != shape {
            return Err(DataError::InvalidVolume(format!(
                "brain_mask shape {:?} != intensity shape {:?} (subject {})",
                self.brain_mask.shape(),
                shape,
                self.subject_id
            )));
        }
        if let Some(gt) = &self.gt_mask {
            if gt.shape() != shape {
                return Err(DataError::InvalidVolume(format!(
                    "gt_mask shape {:?} != intensity shape {:?} (subject {})",
                    gt.shape(),
                    shape,
                    self.subject_id
                )));
            }
            for (&g, &b) in gt.iter().zip(self.brain_mask.iter()) {
                if g && !b {
                    return Err(DataError::InvalidVolume(format!(
                        "gt voxel outside brain mask (subject {})",
                        self.subject_id
                    )));
                }
            }
        }
        for &x in self.intensities.iter() {
            if !x.is_finite() || x < 0.0 {
                return Err(DataError::InvalidVolume(format!(
                    "non-finite or negative intensity {x} (subject {})",
                    self.subject_id
                )));
            }
            if self.normalized && x > 1.0 {
                return Err(DataError::InvalidVolume(format!(
                    "normalized volume has intensity {x} > 1 (subject {})",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.intensities.shape();
        (s[0], s[1], s[2])
    }

    pub fn brain_voxel_count(&self) -> usize {
        self.brain_mask.iter().filter(|&&b| b).count()
    }

    pub fn gt_voxel_count(&self) -> usize {
        self.gt_mask
            .as_ref()
            .map_or(0, |gt| gt.iter().filter(|&&g| g).count())
    }
}

/// Which voxels the normalization percentile is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PercentileScope {
    /// Brain voxels only (default): background zeros would otherwise drag
    /// the percentile down on loosely cropped scans.
    InMask,
    /// Every voxel of the grid.
    WholeVolume,
}

/// Divide by the in-mask 98th-percentile intensity and clip to [0, 1].
pub fn normalize_volume(v: &Volume) -> Result<Volume, DataError> {
    normalize_volume_scoped(v, PercentileScope::InMask)
}

/// [`normalize_volume`] with an explicit percentile scope.
pub fn normalize_volume_scoped(v: &Volume, scope: PercentileScope) -> Result<Volume, DataError> {
    if v.normalized {
        return Err(DataError::AlreadyNormalized {
            subject_id: v.subject_id.clone(),
        });
    }
    let mut values: Vec<f64> = match scope {
        PercentileScope::InMask => v
            .intensities
            .iter()
            .zip(v.brain_mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .collect(),
        PercentileScope::WholeVolume => v.intensities.iter().copied().collect(),
    };
    let p98 = percentile_linear(&mut values, 98.0);
    if !(p98 > 0.0) {
        return Err(DataError::ZeroPercentile {
            subject_id: v.subject_id.clone(),
        });
    }
    let intensities = v.intensities.mapv(|x| (x / p98).min(1.0));
    Volume::new(
        intensities,
        v.brain_mask.clone(),
        v.gt_mask.clone(),
        v.subject_id.clone(),
        v.dataset_id.clone(),
        true,
    )
}

/// Linear-interpolation percentile (the numpy default): rank q/100·(n−1)
/// between order statistics. Empty input yields 0.
pub(crate) fn percentile_linear(values: &mut [f64], q: f64) -> f64 {
    assert!((0.0..=100.0).contains(&q));
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 == values.len() {
        values[lo]
    } else {
        values[lo] + frac * (values[lo + 1] - values[lo])
    }
}

//! Patient-wise dataset splitting and nested training subsampling.

use super::DataError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Subject-level partition; slices of one subject never straddle splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Fraction of the full training cohort currently kept (1.0 before any
    /// subsampling).
    pub fraction: f64,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(DataError::InvalidConfig(format!(
                "split fraction {} outside (0,1]",
                self.fraction
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
        {
            if !seen.insert(id) {
                return Err(DataError::InvalidConfig(format!(
                    "subject {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Shuffle subjects with a seeded permutation, then cut off
/// `round(train_frac·n)` for training and `round(val_frac·n)` for
/// validation; the remainder is the test set.
pub fn make_split(
    subjects: &[String],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if subjects.is_empty() {
        return Err(DataError::EmptyTrain);
    }
    if !(train_frac > 0.0) || val_frac < 0.0 || train_frac + val_frac > 1.0 {
        return Err(DataError::InvalidConfig(format!(
            "fractions train={train_frac}, val={val_frac} must be positive and sum to at most 1"
        )));
    }
    let mut order: Vec<String> = subjects.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::subseed(seed, "subject-split", 0));
    order.shuffle(&mut rng);

    let n = order.len();
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n);
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let split = DatasetSplit {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
        fraction: 1.0,
    };
    split.validate()?;
    Ok(split)
}

/// Keep the first `⌈fraction·|train|⌉` training subjects. Because this is a
/// prefix of the already-shuffled list, subsamples nest:
/// `subsample(0.1) ⊆ subsample(0.5) ⊆ full`.
pub fn subsample_training(split: &DatasetSplit, fraction: f64) -> Result<DatasetSplit, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "subsample fraction {fraction} outside (0,1]"
        )));
    }
    let keep = (fraction * split.train.len() as f64).ceil() as usize;
    if keep == 0 {
        return Err(DataError::EmptyTrain);
    }
    Ok(DatasetSplit {
        train: split.train[..keep].to_vec(),
        validation: split.validation.clone(),
        test: split.test.clone(),
        fraction,
    })
}

/// Write `train.txt` / `validation.txt` / `test.txt`, one subject per line.
pub fn write_split_manifests(dir: &Path, split: &DatasetSplit) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::UnreadableFile {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    for (name, list) in [
        ("train.txt", &split.train),
        ("validation.txt", &split.validation),
        ("test.txt", &split.test),
    ] {
        let path = dir.join(name);
        let body = list
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let body = if body.is_empty() { body } else { body + "\n" };
        std::fs::write(&path, body).map_err(|e| DataError::UnreadableFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Inverse of [`write_split_manifests`]; the stored fraction is not part of
/// the manifest and is restored as 1.0 relative to what was written.
pub fn read_split_manifests(dir: &Path) -> Result<DatasetSplit, DataError> {
    let read_list = |name: &str| -> Result<Vec<String>, DataError> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::UnreadableFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    };
    let split = DatasetSplit {
        train: read_list("train.txt")?,
        validation: read_list("validation.txt")?,
        test: read_list("test.txt")?,
        fraction: 1.0,
    };
    split.validate()?;
    Ok(split)
}

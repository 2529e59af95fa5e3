//! Volumes, preprocessing, synthetic phantoms, splits, and on-disk layout.
//!
//! The unit of data is a skull-stripped single-channel [`Volume`] with a
//! brain mask and (optionally) a ground-truth anomaly mask. Volumes are
//! normalized by their 98th-percentile intensity, cut into axial slices for
//! the models, and reassembled to volumes for evaluation. A deterministic
//! phantom generator stands in for clinical scans.

mod nifti;
mod phantom;
mod slices;
mod split;
mod volume;

pub use nifti::{load_dataset, load_volume, write_dataset, write_volume};
pub use phantom::{generate_phantoms, LesionMode, PhantomConfig};
pub use slices::{extract_slices, extract_slices_sized, reassemble_slices, SliceBatch};
pub use split::{make_split, read_split_manifests, subsample_training, write_split_manifests, DatasetSplit};
pub use volume::{normalize_volume, normalize_volume_scoped, PercentileScope, Volume};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    /// 98th percentile of the normalization region is not positive — an
    /// empty or constant-zero scan.
    #[error("98th percentile is not positive for subject {subject_id}")]
    ZeroPercentile { subject_id: String },

    /// Normalizing twice is a pipeline bug, not a no-op.
    #[error("volume for subject {subject_id} is already normalized")]
    AlreadyNormalized { subject_id: String },

    /// No axial slice contains any brain voxel.
    #[error("no brain-carrying axial slice in subject {subject_id}")]
    EmptyBrain { subject_id: String },

    /// Subsampling or splitting produced an empty training set.
    #[error("training split would be empty")]
    EmptyTrain,

    /// Companion files of one subject disagree on voxel grid shape.
    #[error("shape mismatch at {path}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Missing, truncated, or structurally invalid file.
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),
}

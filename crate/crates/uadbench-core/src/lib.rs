//! Core library for unsupervised anomaly segmentation benchmarks on
//! volumetric image data.
//!
//! The crate trains a zoo of autoencoder-based models of healthy anatomy
//! under one unified encoder/decoder architecture, scores anomalies with
//! reconstruction, Monte-Carlo, gradient and restoration methods, and
//! evaluates the resulting score volumes with a fixed post-processing and
//! pixel-wise metric pipeline. Everything runs on the CPU in f64 on top of
//! a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod net;
pub mod postproc;
pub mod scoring;
pub mod seeding;
pub mod zoo;

pub use autodiff::{Adam, ConvGeom, Tape, Var};
pub use metrics::{
    auroc, chi_square, correlation_matrix, dice, dice_at_op, greedy_best_dice, pooled_dice_at,
    prc_and_auprc, reports_to_csv, residual_histograms, residual_stats, EvalReport, MeanStd,
    MetricsError, ResidualHistograms, CORR_COLUMNS, CSV_HEADER,
};
pub use data::{
    extract_slices, generate_phantoms, load_volume, make_split, normalize_volume,
    subsample_training, write_volume, DataError, DatasetSplit, LesionMode, PhantomConfig,
    SliceBatch, Volume,
};
pub use net::{
    build_network, load_checkpoint, reparameterize, save_checkpoint, BottleneckKind,
    BottleneckSpec, Codes, CriticKind, CriticOut, NetError, NetGraph, NetSpec, ParamVars,
};
pub use postproc::{
    binarize, erode_mask, median_filter_3d, prune_components, run_pipeline, signed_to_scored,
    BinaryVolume, Connectivity, PostprocConfig, PostprocError,
};
pub use scoring::{
    gradient_saliency, mc_maps, mc_residual, raw_saliency, reconstruction_residual, restore,
    score_volume, signed_reconstruction, write_score_volume, Restoration, ScoreError,
    ScoreMethod, ScoreParams, ScoreVolume,
};
pub use zoo::{train, EpochRecord, MethodTag, TrainConfig, TrainedModel, ZooError};

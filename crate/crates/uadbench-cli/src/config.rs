//! Experiment configuration: a strict, versioned TOML schema and the
//! derived per-cell settings (phantom datasets, network specs, training
//! and scoring parameters, cache keys).

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use uadbench_core::data::{LesionMode, PhantomConfig};
use uadbench_core::net::NetSpec;
use uadbench_core::scoring::{ScoreMethod, ScoreParams};
use uadbench_core::seeding::subseed;
use uadbench_core::zoo::{MethodTag, TrainConfig, TrainedModel};
use uadbench_core::PostprocConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// One trainable entry of the experiment matrix: a model tag plus the
/// scorers evaluated on it.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub tag: MethodTag,
    pub scorers: Vec<ScoreMethod>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Phantom voxel grid (nx, ny, nz).
    pub volume_shape: [usize; 3],
    /// Square network input resolution; slices are resampled to it.
    pub input_size: usize,
    /// Healthy training subjects.
    pub n_train: usize,
    /// Healthy validation subjects.
    pub n_val: usize,
    pub n_test_healthy: usize,
    pub n_test_anomalous: usize,
    pub lesion_mode: LesionMode,
}

/// Optional overrides on the per-method default architecture.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub widths: Option<[usize; 4]>,
    pub dense_dim: Option<usize>,
    pub kernel: Option<usize>,
}

macro_rules! override_section {
    ($name:ident over $target:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        /// Optional overrides; unset fields keep the library defaults.
        #[derive(Clone, Debug, Default, Deserialize, Serialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $(pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn apply(&self, base: &mut $target) {
                $(if let Some(v) = &self.$field { base.$field = v.clone(); })*
            }
        }
    };
}

override_section!(TrainSection over TrainConfig {
    learning_rate: f64,
    lambda_kl: f64,
    dropout_rate: f64,
    batch_size: usize,
    patience: usize,
    epsilon_improve: f64,
    max_epochs: usize,
    lambda_constraint: f64,
    lambda_adv: f64,
    lambda_gp: f64,
    critic_steps: usize,
    kappa: f64,
    corrupt_patches: [usize; 2],
    corrupt_sides: [usize; 2],
});

override_section!(PostprocSection over PostprocConfig {
    erosion_radius: usize,
    keep_positive_only: bool,
    min_component_voxels: usize,
});

override_section!(ScoringSection over ScoreParams {
    n_samples: usize,
    n_iters: usize,
    step_size: f64,
    fidelity_to_input: bool,
});

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_fractions")]
    pub subsample_fractions: Vec<f64>,
    pub data: DataSection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub postproc: PostprocSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    pub methods: Vec<MethodEntry>,
}

fn default_fractions() -> Vec<f64> {
    vec![1.0]
}

/// One matrix cell: a method trained on one training-set fraction. All
/// of the method's scorers are evaluated inside the cell so the trained
/// model is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub method_idx: usize,
    pub fraction_idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPart {
    Train,
    Val,
    Test,
}

impl DatasetPart {
    pub fn name(self) -> &'static str {
        match self {
            DatasetPart::Train => "train",
            DatasetPart::Val => "val",
            DatasetPart::Test => "test",
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML file, apply command-line overrides, and validate.
    pub fn load(
        path: &Path,
        seed_override: Option<u64>,
        out_override: Option<&Path>,
    ) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        if let Some(out) = out_override {
            cfg.output_dir = out.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not the supported version {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.methods.is_empty() {
            return bad("at least one [[methods]] entry is required".into());
        }
        for m in &self.methods {
            if m.scorers.is_empty() {
                return bad(format!("method {} lists no scorers", m.tag));
            }
            for s in &m.scorers {
                if s.needs_kl() && !m.tag.is_variational() {
                    return bad(format!(
                        "scorer {s} needs a distribution term; {} is deterministic \
                         (inadmissible pair)",
                        m.tag
                    ));
                }
            }
        }
        if self.subsample_fractions.is_empty() {
            return bad("subsample_fractions must not be empty".into());
        }
        for &f in &self.subsample_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("subsample fraction {f} outside (0, 1]"));
            }
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 {
            return bad("n_train and n_val must be positive".into());
        }
        if d.n_test_anomalous == 0 {
            return bad("n_test_anomalous must be positive (metrics need lesions)".into());
        }
        if d.input_size == 0 || d.input_size % 16 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 16", d.input_size));
        }
        if d.volume_shape.iter().any(|&n| n == 0) {
            return bad(format!("volume_shape {:?} has a zero axis", d.volume_shape));
        }
        Ok(())
    }

    /// Phantom generator settings for one dataset part; each part draws
    /// from its own seed stream.
    pub fn phantoms(&self, part: DatasetPart) -> PhantomConfig {
        let (n_subjects, anomaly_rate) = match part {
            DatasetPart::Train => (self.data.n_train, 0.0),
            DatasetPart::Val => (self.data.n_val, 0.0),
            DatasetPart::Test => {
                let total = self.data.n_test_healthy + self.data.n_test_anomalous;
                (total, self.data.n_test_anomalous as f64 / total as f64)
            }
        };
        PhantomConfig {
            n_subjects,
            anomaly_rate,
            lesion_intensity_mode: self.data.lesion_mode,
            seed: subseed(self.seed, "phantoms", part as u64),
            volume_shape: self.data.volume_shape,
        }
    }

    pub fn net_spec(&self, tag: MethodTag) -> NetSpec {
        let mut spec = tag.default_spec(self.data.input_size);
        if let Some(w) = self.net.widths {
            spec.widths = w;
        }
        if let Some(d) = self.net.dense_dim {
            spec.bottleneck.dense_dim = d;
        }
        if let Some(k) = self.net.kernel {
            spec.kernel = k;
        }
        spec
    }

    pub fn train_config(&self, cell: Cell) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        self.train.apply(&mut cfg);
        let tag = self.methods[cell.method_idx].tag;
        cfg.seed = subseed(
            self.seed,
            &format!("train-{}", tag.name()),
            cell.fraction_idx as u64,
        );
        cfg
    }

    pub fn postproc_config(&self) -> PostprocConfig {
        let mut cfg = PostprocConfig::default();
        self.postproc.apply(&mut cfg);
        cfg
    }

    pub fn score_params(&self, model: &TrainedModel, cell: Cell, scorer: ScoreMethod) -> ScoreParams {
        let mut p = ScoreParams::for_model(model);
        self.scoring.apply(&mut p);
        let tag = self.methods[cell.method_idx].tag;
        p.seed = subseed(
            self.seed,
            &format!("score-{}-{}", tag.name(), scorer),
            cell.fraction_idx as u64,
        );
        p
    }

    /// Canonical cell order: methods outer, fractions inner. Reports and
    /// worker scheduling both follow it.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for method_idx in 0..self.methods.len() {
            for fraction_idx in 0..self.subsample_fractions.len() {
                cells.push(Cell {
                    method_idx,
                    fraction_idx,
                });
            }
        }
        cells
    }

    pub fn cell_id(&self, cell: Cell) -> String {
        format!(
            "{}_f{:.3}",
            self.methods[cell.method_idx].tag.name(),
            self.subsample_fractions[cell.fraction_idx]
        )
    }

    /// Human-readable row label for one (cell, scorer) result.
    pub fn approach(&self, cell: Cell, scorer: ScoreMethod) -> String {
        let tag = self.methods[cell.method_idx].tag;
        let fraction = self.subsample_fractions[cell.fraction_idx];
        if fraction == 1.0 {
            format!("{tag} ({scorer})")
        } else {
            format!("{tag} ({scorer}, {:.1}% train)", fraction * 100.0)
        }
    }

    /// Content hash over everything that influences a trained model:
    /// architecture, training settings (including the derived seed), both
    /// phantom dataset recipes, the slice resolution, and the training-set
    /// fraction.
    pub fn cache_key(&self, cell: Cell) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            tag: &'a str,
            spec: NetSpec,
            train: TrainConfig,
            train_phantoms: PhantomConfig,
            val_phantoms: PhantomConfig,
            input_size: usize,
            fraction: f64,
        }
        let tag = self.methods[cell.method_idx].tag;
        let material = KeyMaterial {
            tag: tag.name(),
            spec: self.net_spec(tag),
            train: self.train_config(cell),
            train_phantoms: self.phantoms(DatasetPart::Train),
            val_phantoms: self.phantoms(DatasetPart::Val),
            input_size: self.data.input_size,
            fraction: self.subsample_fractions[cell.fraction_idx],
        };
        let bytes = serde_json::to_vec(&material).expect("config serialization");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.output_dir.join("phantoms")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("cache")
    }

    pub fn cells_dir(&self) -> PathBuf {
        self.output_dir.join("cells")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }
}

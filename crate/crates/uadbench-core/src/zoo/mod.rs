//! The model zoo: loss assembly, adversarial games, and the training loop
//! shared by all eleven variants.
//!
//! Every variant reuses the same encoder/decoder topology; they differ only
//! in bottleneck parameterization, extra loss terms, and whether a critic
//! joins the game. Training is plain minibatch descent with per-parameter
//! adaptive steps and a uniform early-stopping criterion on the validation
//! reconstruction error, so stopped models are comparable across the zoo.

mod corrupt;
mod losses;
mod stopper;
mod train;

pub use corrupt::{context_corrupt, context_corrupt_with};
pub use losses::{
    aae_adversarial_step, ae_loss, anovaegan_losses, constrained_loss_term, gmvae_loss,
    gmvae_loss_parts, kl_to_standard_normal, vae_loss, wgan_losses, AnoVaeGanLosses,
    GmvaeLossParts, MixtureParams, WganLosses,
};
pub use stopper::{replay_stop_epoch, EarlyStopper, StopDecision};
pub(crate) use losses::scalar;
pub use train::{fanogan_train, train, FanoGan};

use crate::net::{BottleneckKind, BottleneckSpec, CriticKind, NetError, NetGraph, NetSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("mixture component weight underflowed to zero (component {component})")]
    DegenerateMixture { component: usize },

    #[error("encoder phase requested before the generator phase converged")]
    PhaseOrderViolation,

    #[error("loss became non-finite at epoch {epoch}, batch {batch} ({context})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        context: &'static str,
    },

    #[error("invalid training setup: {0}")]
    InvalidConfig(String),

    #[error("{tag} cannot train on this architecture: {detail}")]
    IncompatibleSpec { tag: MethodTag, detail: String },

    #[error(transparent)]
    Net(#[from] NetError),
}

/// One model variant. The tag fixes the bottleneck parameterization, the
/// loss assembly, and which scoring methods are admissible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum MethodTag {
    #[serde(rename = "AE_dense")]
    AeDense,
    #[serde(rename = "AE_spatial")]
    AeSpatial,
    #[serde(rename = "ContextAE")]
    ContextAe,
    #[serde(rename = "ConstrainedAE")]
    ConstrainedAe,
    #[serde(rename = "VAE")]
    Vae,
    #[serde(rename = "ContextVAE")]
    ContextVae,
    #[serde(rename = "ConstrainedAAE")]
    ConstrainedAae,
    #[serde(rename = "GMVAE_dense")]
    GmvaeDense,
    #[serde(rename = "GMVAE_spatial")]
    GmvaeSpatial,
    #[serde(rename = "AnoVAEGAN")]
    AnoVaeGan,
    #[serde(rename = "fAnoGAN")]
    FAnoGan,
}

impl MethodTag {
    pub const ALL: [MethodTag; 11] = [
        MethodTag::AeDense,
        MethodTag::AeSpatial,
        MethodTag::ContextAe,
        MethodTag::ConstrainedAe,
        MethodTag::Vae,
        MethodTag::ContextVae,
        MethodTag::ConstrainedAae,
        MethodTag::GmvaeDense,
        MethodTag::GmvaeSpatial,
        MethodTag::AnoVaeGan,
        MethodTag::FAnoGan,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodTag::AeDense => "AE_dense",
            MethodTag::AeSpatial => "AE_spatial",
            MethodTag::ContextAe => "ContextAE",
            MethodTag::ConstrainedAe => "ConstrainedAE",
            MethodTag::Vae => "VAE",
            MethodTag::ContextVae => "ContextVAE",
            MethodTag::ConstrainedAae => "ConstrainedAAE",
            MethodTag::GmvaeDense => "GMVAE_dense",
            MethodTag::GmvaeSpatial => "GMVAE_spatial",
            MethodTag::AnoVaeGan => "AnoVAEGAN",
            MethodTag::FAnoGan => "fAnoGAN",
        }
    }

    /// Whether the encoder carries a log-variance head (and therefore a KL
    /// term in its objective).
    pub fn is_variational(&self) -> bool {
        matches!(
            self,
            MethodTag::Vae
                | MethodTag::ContextVae
                | MethodTag::GmvaeDense
                | MethodTag::GmvaeSpatial
                | MethodTag::AnoVaeGan
        )
    }

    /// Whether training corrupts the inputs (targets stay uncorrupted).
    pub fn corrupts_input(&self) -> bool {
        matches!(self, MethodTag::ContextAe | MethodTag::ContextVae)
    }

    /// Whether the objective carries the code-consistency term between the
    /// code of the input and the code of its reconstruction.
    pub fn is_constrained(&self) -> bool {
        matches!(self, MethodTag::ConstrainedAe | MethodTag::ConstrainedAae)
    }

    pub fn bottleneck(&self) -> BottleneckSpec {
        let mut b = match self {
            MethodTag::AeSpatial | MethodTag::GmvaeSpatial => {
                BottleneckSpec::spatial(self.is_variational())
            }
            _ => BottleneckSpec::dense(self.is_variational()),
        };
        if matches!(self, MethodTag::GmvaeDense | MethodTag::GmvaeSpatial) {
            b.mixture_components = 6;
        }
        b
    }

    pub fn critic(&self) -> CriticKind {
        match self {
            MethodTag::ConstrainedAae => CriticKind::Latent,
            MethodTag::AnoVaeGan | MethodTag::FAnoGan => CriticKind::Image,
            _ => CriticKind::None,
        }
    }

    /// Architecture for this variant at a given input resolution, with the
    /// full-scale channel widths.
    pub fn default_spec(&self, input_size: usize) -> NetSpec {
        let mut spec = NetSpec::with_bottleneck(self.bottleneck());
        spec.input_size = input_size;
        spec.critic = self.critic();
        spec
    }

    /// Check that an externally supplied architecture matches what this
    /// variant requires (kind, heads, critic, mixture).
    pub fn compatible(&self, spec: &NetSpec) -> Result<(), ZooError> {
        let want = self.bottleneck();
        let err = |detail: String| ZooError::IncompatibleSpec { tag: *self, detail };
        if spec.bottleneck.kind != want.kind {
            return Err(err(format!(
                "needs a {:?} bottleneck, got {:?}",
                want.kind, spec.bottleneck.kind
            )));
        }
        if spec.bottleneck.variational != want.variational {
            return Err(err(format!(
                "variational must be {}",
                want.variational
            )));
        }
        if (want.mixture_components > 1) != (spec.bottleneck.mixture_components > 1) {
            return Err(err(format!(
                "mixture components {} incompatible",
                spec.bottleneck.mixture_components
            )));
        }
        if spec.critic != self.critic() {
            return Err(err(format!(
                "needs critic {:?}, got {:?}",
                self.critic(),
                spec.critic
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodTag {
    type Err = ZooError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodTag::ALL
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| {
                ZooError::InvalidConfig(format!(
                    "unknown model tag {s:?}; expected one of {}",
                    MethodTag::ALL.map(|t| t.name()).join(", ")
                ))
            })
    }
}

/// Training hyperparameters. Defaults are the benchmark's fixed settings;
/// weights the reference setup leaves unstated get conventional values and
/// stay configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the distribution-matching term in variational objectives.
    pub lambda_kl: f64,
    /// Latent dropout rate used by Monte-Carlo scoring of deterministic
    /// models (inference-time only; training never drops units).
    pub dropout_rate: f64,
    pub batch_size: usize,
    /// Consecutive non-improving validation epochs tolerated before stop.
    pub patience: usize,
    /// A validation loss must beat the best seen by more than this to count
    /// as an improvement.
    pub epsilon_improve: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Weight of the code-consistency term of the Constrained variants.
    pub lambda_constraint: f64,
    /// Weight of the generator's adversarial term (image critics).
    pub lambda_adv: f64,
    /// Gradient-penalty weight of Wasserstein critics.
    pub lambda_gp: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Feature-matching weight of the two-phase encoder objective.
    pub kappa: f64,
    /// Patch count range for context corruption.
    pub corrupt_patches: [usize; 2],
    /// Patch side-length range (pixels) for context corruption.
    pub corrupt_sides: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0001,
            lambda_kl: 1.0,
            dropout_rate: 0.2,
            batch_size: 64,
            patience: 5,
            epsilon_improve: 1e-9,
            max_epochs: 100,
            seed: 0,
            lambda_constraint: 1.0,
            lambda_adv: 1e-2,
            lambda_gp: 10.0,
            critic_steps: 5,
            kappa: 1.0,
            corrupt_patches: [1, 3],
            corrupt_sides: [16, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ZooError> {
        let bad = |msg: String| Err(ZooError::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        // Zero is allowed: a zero learning rate is the idiomatic way to
        // freeze a model and observe a flat validation trajectory.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.epsilon_improve >= 0.0) {
            return bad("epsilon_improve must be non-negative".into());
        }
        if self.corrupt_patches[0] > self.corrupt_patches[1]
            || self.corrupt_sides[0] > self.corrupt_sides[1]
            || self.corrupt_sides[0] == 0
        {
            return bad("corruption ranges must be non-empty and ordered".into());
        }
        Ok(())
    }
}

/// One epoch of recorded losses. `components` holds named epoch means of
/// the objective's parts (reconstruction, KL, critic, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default)]
    pub components: BTreeMap<String, f64>,
}

/// A converged model plus everything needed to audit how it got there.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Weights at the best validation epoch observed during training.
    pub graph: NetGraph,
    pub tag: MethodTag,
    pub train_config: TrainConfig,
    /// Per-epoch records of the main phase (the encoder phase for the
    /// two-phase adversarial variant).
    pub history: Vec<EpochRecord>,
    /// Records of the generator pre-training phase; empty for single-phase
    /// variants.
    pub pretrain_history: Vec<EpochRecord>,
    /// 1-based epoch at which training stopped.
    pub stopped_epoch: usize,
}

impl TrainedModel {
    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map(|r| r.val_loss).unwrap_or(f64::NAN)
    }

    pub fn best_val_loss(&self) -> f64 {
        self.history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min)
    }

    /// Persist weights (with the architecture embedded) and a line-delimited
    /// history sidecar at `<path>.history.jsonl`.
    pub fn save(&self, path: &Path) -> Result<(), ZooError> {
        let extra = serde_json::json!({
            "tag": self.tag,
            "train_config": self.train_config,
            "stopped_epoch": self.stopped_epoch,
            "history": self.history,
            "pretrain_history": self.pretrain_history,
        });
        crate::net::save_checkpoint(path, &self.graph, &extra)?;
        let mut sidecar = String::new();
        for rec in self.pretrain_history.iter().chain(&self.history) {
            sidecar.push_str(&serde_json::to_string(rec).expect("record serializes"));
            sidecar.push('\n');
        }
        std::fs::write(Self::history_path(path), sidecar).map_err(|e| {
            ZooError::InvalidConfig(format!("cannot write history sidecar: {e}"))
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedModel, ZooError> {
        let (graph, extra) = crate::net::load_checkpoint(path, None)?;
        let field = |name: &str| {
            extra.get(name).cloned().ok_or_else(|| {
                ZooError::InvalidConfig(format!("checkpoint metadata missing {name:?}"))
            })
        };
        fn parse<T: serde::de::DeserializeOwned>(
            v: serde_json::Value,
            what: &str,
        ) -> Result<T, ZooError> {
            serde_json::from_value(v).map_err(|e| {
                ZooError::InvalidConfig(format!("checkpoint metadata: bad {what}: {e}"))
            })
        }
        Ok(TrainedModel {
            graph,
            tag: parse(field("tag")?, "tag")?,
            train_config: parse(field("train_config")?, "train_config")?,
            history: parse(field("history")?, "history")?,
            pretrain_history: parse(field("pretrain_history")?, "pretrain_history")?,
            stopped_epoch: parse(field("stopped_epoch")?, "stopped_epoch")?,
        })
    }

    pub fn history_path(model_path: &Path) -> std::path::PathBuf {
        let mut os = model_path.as_os_str().to_owned();
        os.push(".history.jsonl");
        std::path::PathBuf::from(os)
    }
}

/// The bottleneck kind a tag's code lives in (handy for scorers that treat
/// dense and spatial codes differently).
pub fn code_kind(tag: MethodTag) -> BottleneckKind {
    tag.bottleneck().kind
}

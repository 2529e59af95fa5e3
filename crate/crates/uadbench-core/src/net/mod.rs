//! The shared encoder–decoder architecture every model variant builds on.
//!
//! One topology serves the whole zoo: four stride-2 convolution stages down
//! to a 16×-reduced grid, a dense or spatial bottleneck, and a mirrored
//! stack of four transposed-convolution stages back to the input, ending in
//! a sigmoid. Variational variants add a second bottleneck head for the
//! log-variance; adversarial variants add a critic that replicates the
//! encoder topology with a scalar head (or a small MLP on codes for the
//! latent-space game). Keeping capacity identical across variants is what
//! makes their comparison fair.

mod checkpoint;
mod graph;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Codes, CriticOut, NetGraph, ParamVars};

use crate::autodiff::{Tape, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("sigma must be strictly positive for reparameterization")]
    NonPositiveSigma,

    #[error("checkpoint at {path} was written for a different architecture: {detail}")]
    CheckpointMismatch { path: String, detail: String },

    #[error("cannot read checkpoint {path}: {reason}")]
    UnreadableCheckpoint { path: String, reason: String },
}

/// Shape and parameterization of the innermost representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    /// Flatten → fully-connected code vector → fully-connected + reshape.
    Dense,
    /// A single 1×1 convolution keeps the code spatial.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub kind: BottleneckKind,
    /// Code dimensionality for the dense kind (ignored by spatial).
    pub dense_dim: usize,
    /// Adds a log-variance head next to the code head.
    pub variational: bool,
    /// Number of prior mixture components (1 = plain Gaussian prior).
    pub mixture_components: usize,
}

impl BottleneckSpec {
    pub fn dense(variational: bool) -> Self {
        BottleneckSpec {
            kind: BottleneckKind::Dense,
            dense_dim: 128,
            variational,
            mixture_components: 1,
        }
    }

    pub fn spatial(variational: bool) -> Self {
        BottleneckSpec {
            kind: BottleneckKind::Spatial,
            dense_dim: 128,
            variational,
            mixture_components: 1,
        }
    }
}

/// Which critic, if any, a graph carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    None,
    /// Encoder replica on images with a scalar head.
    Image,
    /// Small fully-connected net on dense codes.
    Latent,
}

/// Complete architecture description; embedded into checkpoints so a file
/// can refuse to load into the wrong topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Square input resolution; must be divisible by 16 (four halvings).
    pub input_size: usize,
    /// Channel widths of the four encoder stages.
    pub widths: [usize; 4],
    /// Square convolution kernel size (odd).
    pub kernel: usize,
    /// Negative-side slope of the leaky rectifier.
    pub leaky_slope: f64,
    pub bottleneck: BottleneckSpec,
    pub critic: CriticKind,
}

impl NetSpec {
    /// Paper-scale defaults: 128-px slices, widths (32, 64, 128, 128),
    /// 5×5 kernels.
    pub fn with_bottleneck(bottleneck: BottleneckSpec) -> Self {
        NetSpec {
            input_size: 128,
            widths: [32, 64, 128, 128],
            kernel: 5,
            leaky_slope: 0.2,
            bottleneck,
            critic: CriticKind::None,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(NetError::InvalidSpec(format!(
                "input_size {} is not a multiple of 16 (four stride-2 stages)",
                self.input_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidSpec("zero channel width".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(NetError::InvalidSpec(format!(
                "kernel {} must be odd",
                self.kernel
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(NetError::InvalidSpec(format!(
                "leaky slope {} outside [0,1)",
                self.leaky_slope
            )));
        }
        if self.bottleneck.kind == BottleneckKind::Dense && self.bottleneck.dense_dim == 0 {
            return Err(NetError::InvalidSpec("dense_dim must be positive".into()));
        }
        if self.bottleneck.mixture_components == 0 {
            return Err(NetError::InvalidSpec(
                "mixture_components must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Side length of the innermost feature grid.
    pub fn bottleneck_grid(&self) -> usize {
        self.input_size / 16
    }

    /// (height, width, channels) of the spatial code.
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        (self.bottleneck_grid(), self.bottleneck_grid(), self.widths[3])
    }

    /// Flattened size of the innermost feature grid.
    pub fn flat_len(&self) -> usize {
        let g = self.bottleneck_grid();
        g * g * self.widths[3]
    }
}

/// Build a freshly initialized graph. Initialization is He-scaled normal
/// with per-tensor seed streams, so adding or reordering tensors never
/// reshuffles the others.
pub fn build_network(spec: &NetSpec, seed: u64) -> Result<NetGraph, NetError> {
    spec.validate()?;
    Ok(NetGraph::initialize(spec.clone(), seed))
}

/// `code = μ + σ·ε` with ε drawn i.i.d. standard normal from `seed`.
/// The array-level entry point; training uses the in-graph variant so
/// gradients flow to μ and σ.
pub fn reparameterize(
    mu: &ArrayD<f64>,
    sigma: &ArrayD<f64>,
    seed: u64,
) -> Result<ArrayD<f64>, NetError> {
    if mu.shape() != sigma.shape() {
        return Err(NetError::InvalidSpec(format!(
            "mu shape {:?} != sigma shape {:?}",
            mu.shape(),
            sigma.shape()
        )));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(NetError::NonPositiveSigma);
    }
    let eps = standard_normal_like(mu, seed);
    Ok(mu + &(sigma * &eps))
}

/// In-graph reparameterization from the log-variance head:
/// `code = μ + exp(0.5·logvar)·ε` with `ε` entering as a constant.
pub fn reparameterize_var<'t>(
    tape: &'t Tape,
    mu: Var<'t>,
    logvar: Var<'t>,
    eps: &ArrayD<f64>,
) -> Var<'t> {
    let eps = tape.constant(eps.clone());
    mu + logvar.mul_scalar(0.5).exp() * eps
}

/// Deterministic standard-normal tensor shaped like `like` (Box–Muller over
/// a ChaCha stream).
pub fn standard_normal_like(like: &ArrayD<f64>, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(like.raw_dim(), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    })
}

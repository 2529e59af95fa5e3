//! Per-voxel anomaly scoring: turn a trained model and a normalized volume
//! into a continuous score map.
//!
//! Four method families share one contract — identical output shapes,
//! non-negative finite scores:
//!
//! * **reconstruction** — the one-shot residual `|x − Dec(Enc(x))|`, with
//!   the posterior mean as the code for variational models;
//! * **mc** — the mean residual over `N` stochastic forward passes
//!   (posterior samples for variational models, latent dropout for
//!   deterministic ones);
//! * **gradient** — the absolute input gradient of the variational
//!   objective from a single backward pass;
//! * **restoration** — iteratively move the input towards the model's
//!   healthy manifold and score the total change.

use crate::autodiff::{Adam, Tape, Var};
use crate::data::{extract_slices_sized, write_volume, DataError, SliceBatch, Volume};
use crate::net::{reparameterize_var, standard_normal_like, NetGraph, ParamVars};
use crate::seeding::subseed;
use crate::zoo::{
    ae_loss, gmvae_loss_parts, kl_to_standard_normal, scalar, MixtureParams, TrainedModel,
    ZooError,
};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("{context}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("sample count N must be at least 1")]
    InvalidN,
    #[error("{tag} has no distribution term: gradient and restoration scoring need a variational model")]
    NoKLTerm { tag: String },
    #[error("restoration objective became non-finite at iteration {iter}")]
    DivergedRestoration { iter: usize },
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The four scoring families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Reconstruction,
    Mc,
    Gradient,
    Restoration,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 4] = [
        ScoreMethod::Reconstruction,
        ScoreMethod::Mc,
        ScoreMethod::Gradient,
        ScoreMethod::Restoration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Reconstruction => "reconstruction",
            ScoreMethod::Mc => "mc",
            ScoreMethod::Gradient => "gradient",
            ScoreMethod::Restoration => "restoration",
        }
    }

    /// Whether the method needs a distribution term (a variational model).
    pub fn needs_kl(self) -> bool {
        matches!(self, ScoreMethod::Gradient | ScoreMethod::Restoration)
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<ScoreMethod, String> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown scoring method {s:?}"))
    }
}

/// A per-voxel continuous anomaly map for one subject.
#[derive(Clone, Debug)]
pub struct ScoreVolume {
    /// Non-negative scores at the source volume's shape; values outside
    /// the brain mask are undefined until post-processing masks them.
    pub scores: Array3<f64>,
    /// The signed map captured before any absolute value: `x − x̂` for the
    /// residual methods, `x − mean(x̂_n)` for Monte-Carlo, the raw input
    /// gradient for saliency, `x − y` for restoration. Post-processing's
    /// positive-residual filter consumes this.
    pub signed: Array3<f64>,
    pub source_subject: String,
    pub method: ScoreMethod,
    pub n_samples: Option<usize>,
    pub n_iters: Option<usize>,
}

/// Tuning knobs of the scorers; the defaults mirror the benchmark desk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreParams {
    /// Monte-Carlo sample count.
    pub n_samples: usize,
    /// Latent dropout rate for Monte-Carlo scoring of deterministic models.
    pub dropout_rate: f64,
    /// Restoration iteration budget.
    pub n_iters: usize,
    /// Restoration step size.
    pub step_size: f64,
    /// Weight of the distribution term in gradient and restoration scoring.
    pub lambda_kl: f64,
    pub seed: u64,
    /// When set, the restoration data term anchors the reconstruction to
    /// the *original* input instead of the current restoration iterate.
    pub fidelity_to_input: bool,
}

impl Default for ScoreParams {
    fn default() -> ScoreParams {
        ScoreParams {
            n_samples: 100,
            dropout_rate: 0.2,
            n_iters: 500,
            step_size: 5e-3,
            lambda_kl: 1.0,
            seed: 0,
            fidelity_to_input: false,
        }
    }
}

impl ScoreParams {
    /// Defaults with the model's own training-time rates filled in.
    pub fn for_model(model: &TrainedModel) -> ScoreParams {
        ScoreParams {
            dropout_rate: model.train_config.dropout_rate,
            lambda_kl: model.train_config.lambda_kl,
            ..ScoreParams::default()
        }
    }
}

/// The result of iterative restoration on a slice batch.
#[derive(Clone, Debug)]
pub struct Restoration {
    /// The inputs after `n_iters` restoration steps, clipped to [0, 1].
    pub restored: Array4<f64>,
    /// `|x − restored|` elementwise.
    pub residuals: Array4<f64>,
    /// Objective values; entry 0 is the starting objective, entry
    /// `n_iters` the final one.
    pub trajectory: Vec<f64>,
}

/// Elementwise absolute difference — the residual map both reconstruction
/// scorers reduce to.
pub fn residual_arrays(x: &Array4<f64>, xhat: &Array4<f64>) -> Result<Array4<f64>, ScoreError> {
    if x.shape() != xhat.shape() {
        return Err(ScoreError::ShapeMismatch {
            context: "residual",
            left: x.shape().to_vec(),
            right: xhat.shape().to_vec(),
        });
    }
    let mut r = x - xhat;
    r.mapv_inplace(f64::abs);
    Ok(r)
}

/// One-shot reconstruction residual `|x − Dec(Enc(x))|`; variational
/// models decode the posterior mean (no sampling).
pub fn reconstruction_residual(
    model: &TrainedModel,
    batch: &SliceBatch,
) -> Result<Array4<f64>, ScoreError> {
    let mut signed = signed_reconstruction(model, batch)?;
    signed.mapv_inplace(f64::abs);
    Ok(signed)
}

/// The signed residual `x − Dec(Enc(x))` before any absolute value — what
/// the post-processing positive filter consumes.
pub fn signed_reconstruction(
    model: &TrainedModel,
    batch: &SliceBatch,
) -> Result<Array4<f64>, ScoreError> {
    let tape = Tape::new();
    let pv = model.graph.constant_params(&tape);
    let x = tape.constant(batch.pixels.clone().into_dyn());
    let code = model.graph.encode(&pv, x).mu;
    let xhat = to4(model.graph.decode(&pv, code).value());
    if batch.pixels.shape() != xhat.shape() {
        return Err(ScoreError::ShapeMismatch {
            context: "residual",
            left: batch.pixels.shape().to_vec(),
            right: xhat.shape().to_vec(),
        });
    }
    Ok(&batch.pixels - &xhat)
}

/// Mean residual over `n` stochastic reconstructions: posterior samples
/// for variational models, latent dropout at rate `p_r` (inverted scaling)
/// for deterministic ones.
pub fn mc_residual(
    model: &TrainedModel,
    batch: &SliceBatch,
    n: usize,
    p_r: f64,
    seed: u64,
) -> Result<Array4<f64>, ScoreError> {
    Ok(mc_maps(model, batch, n, p_r, seed)?.1)
}

/// Monte-Carlo maps as a (signed mean, mean magnitude) pair: the signed
/// map averages `x − x̂_n`, the magnitude map averages `|x − x̂_n|`.
pub fn mc_maps(
    model: &TrainedModel,
    batch: &SliceBatch,
    n: usize,
    p_r: f64,
    seed: u64,
) -> Result<(Array4<f64>, Array4<f64>), ScoreError> {
    if n == 0 {
        return Err(ScoreError::InvalidN);
    }
    let variational = model.graph.spec.bottleneck.variational;
    let mut signed = Array4::zeros(batch.pixels.raw_dim());
    let mut magnitude = Array4::zeros(batch.pixels.raw_dim());
    for s in 0..n {
        let tape = Tape::new();
        let pv = model.graph.constant_params(&tape);
        let x = tape.constant(batch.pixels.clone().into_dyn());
        let codes = model.graph.encode(&pv, x);
        let code = if variational {
            let eps = standard_normal_like(&codes.mu.value(), subseed(seed, "mc-eps", s as u64));
            reparameterize_var(&tape, codes.mu, codes.logvar.unwrap(), &eps)
        } else {
            let mask = dropout_mask(
                codes.mu.shape(),
                p_r,
                subseed(seed, "mc-dropout", s as u64),
            );
            codes.mu * tape.constant(mask)
        };
        let xhat = to4(model.graph.decode(&pv, code).value());
        let r = residual_arrays(&batch.pixels, &xhat)?;
        signed = signed + (&batch.pixels - &xhat);
        magnitude = magnitude + r;
    }
    Ok((signed / n as f64, magnitude / n as f64))
}

/// Absolute input gradient of `ℓ1(x, x̂) + λ_KL·D(q(z|x) ‖ p(z))` from a
/// single backward pass. Requires a variational model.
pub fn gradient_saliency(
    model: &TrainedModel,
    batch: &SliceBatch,
    lambda_kl: f64,
) -> Result<Array4<f64>, ScoreError> {
    let mut g = raw_saliency(model, batch, lambda_kl)?;
    g.mapv_inplace(f64::abs);
    Ok(g)
}

/// The raw (signed) input gradient of the variational objective.
pub fn raw_saliency(
    model: &TrainedModel,
    batch: &SliceBatch,
    lambda_kl: f64,
) -> Result<Array4<f64>, ScoreError> {
    require_kl(model)?;
    let tape = Tape::new();
    let pv = model.graph.constant_params(&tape);
    let x = tape.leaf(batch.pixels.clone().into_dyn());
    let obj = variational_objective(&model.graph, &pv, x, x, lambda_kl)?;
    Ok(to4(tape.grad(obj, &[x])[0].value()))
}

/// Gradient-descend each slice towards the model's healthy manifold and
/// score the total change `|x − y|` after `params.n_iters` steps.
pub fn restore(
    model: &TrainedModel,
    batch: &SliceBatch,
    params: &ScoreParams,
) -> Result<Restoration, ScoreError> {
    require_kl(model)?;
    let x0 = batch.pixels.clone().into_dyn();
    let mut y = x0.clone();
    let mut adam = Adam::new(params.step_size);
    let mut trajectory = Vec::with_capacity(params.n_iters + 1);

    for t in 0..=params.n_iters {
        let tape = Tape::new();
        let pv = model.graph.constant_params(&tape);
        let y_var = tape.leaf(y.clone());
        let target = if params.fidelity_to_input {
            tape.constant(x0.clone())
        } else {
            y_var
        };
        let obj = variational_objective(&model.graph, &pv, y_var, target, params.lambda_kl)?;
        let val = scalar(obj);
        if !val.is_finite() {
            return Err(ScoreError::DivergedRestoration { iter: t });
        }
        trajectory.push(val);
        if t == params.n_iters {
            break;
        }
        let grad = tape.grad(obj, &[y_var])[0].value();
        let mut arrays = [y];
        adam.step(&mut arrays, &[grad]);
        [y] = arrays;
        y.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    let restored = to4(y);
    let residuals = residual_arrays(&batch.pixels, &restored)?;
    Ok(Restoration {
        restored,
        residuals,
        trajectory,
    })
}

/// Score one normalized volume with `method`, reassembling per-slice maps
/// into the source volume's shape.
pub fn score_volume(
    model: &TrainedModel,
    volume: &Volume,
    method: ScoreMethod,
    params: &ScoreParams,
) -> Result<ScoreVolume, ScoreError> {
    let batch = extract_slices_sized(volume, model.graph.spec.input_size)?;
    let (signed4, scores4, n_samples, n_iters) = match method {
        ScoreMethod::Reconstruction => {
            let signed = signed_reconstruction(model, &batch)?;
            let scores = signed.mapv(f64::abs);
            (signed, scores, None, None)
        }
        ScoreMethod::Mc => {
            let (signed, scores) = mc_maps(
                model,
                &batch,
                params.n_samples,
                params.dropout_rate,
                params.seed,
            )?;
            (signed, scores, Some(params.n_samples), None)
        }
        ScoreMethod::Gradient => {
            let signed = raw_saliency(model, &batch, params.lambda_kl)?;
            let scores = signed.mapv(f64::abs);
            (signed, scores, None, None)
        }
        ScoreMethod::Restoration => {
            let r = restore(model, &batch, params)?;
            let signed = &batch.pixels - &r.restored;
            (signed, r.residuals, None, Some(params.n_iters))
        }
    };
    let reassemble = |planes4: Array4<f64>| {
        crate::data::reassemble_slices(
            &planes4.index_axis_move(ndarray::Axis(3), 0),
            &batch.provenance,
            &volume.subject_id,
            volume.shape(),
        )
    };
    Ok(ScoreVolume {
        scores: reassemble(scores4),
        signed: reassemble(signed4),
        source_subject: volume.subject_id.clone(),
        method,
        n_samples,
        n_iters,
    })
}

/// Serialize a score map alongside its source volume: a sibling subject
/// directory suffix-tagged by method, in the same volumetric format.
pub fn write_score_volume(
    root: &Path,
    sv: &ScoreVolume,
    source: &Volume,
) -> Result<PathBuf, ScoreError> {
    let v = Volume {
        intensities: sv.scores.clone(),
        brain_mask: source.brain_mask.clone(),
        gt_mask: None,
        subject_id: format!("{}_{}", sv.source_subject, sv.method),
        dataset_id: source.dataset_id.clone(),
        normalized: true,
    };
    let dir = root.join(&v.subject_id);
    write_volume(&dir, &v)?;
    Ok(dir)
}

// ---------------------------------------------------------------------
// Internals
// ---------------------------------------------------------------------

fn require_kl(model: &TrainedModel) -> Result<(), ScoreError> {
    if model.graph.spec.bottleneck.variational {
        Ok(())
    } else {
        Err(ScoreError::NoKLTerm {
            tag: model.tag.to_string(),
        })
    }
}

/// `ℓ1(target, Dec(μ(x))) + λ·D(q(z|x) ‖ prior)` — the quantity gradient
/// saliency differentiates and restoration descends. The distribution term
/// is the analytic KL for a standard-normal prior and the mixture bound
/// for a mixture prior.
fn variational_objective<'t>(
    graph: &NetGraph,
    pv: &ParamVars<'t>,
    x: Var<'t>,
    target: Var<'t>,
    lambda_kl: f64,
) -> Result<Var<'t>, ScoreError> {
    let codes = graph.encode(pv, x);
    let (mu, logvar) = (codes.mu, codes.logvar.expect("variational model"));
    let xhat = graph.decode(pv, mu);
    let data_term = ae_loss(target, xhat)?;
    let dist_term = if graph.spec.bottleneck.mixture_components > 1 {
        let prior = MixtureParams {
            mu: pv["prior.mu"],
            logvar: pv["prior.logvar"],
            log_pi: pv["prior.log_pi"],
        };
        // The batch-level uniformity regularizer is a training device, not
        // part of a single input's objective.
        gmvae_loss_parts(target, xhat, mu, logvar, &prior, 1.0)?.kl_bound
    } else {
        kl_to_standard_normal(mu, logvar)?
    };
    Ok(data_term + dist_term.mul_scalar(lambda_kl))
}

/// Inverted-dropout mask: zeros with probability `p_r`, survivors scaled
/// by `1/(1−p_r)` so the expected code is unchanged.
fn dropout_mask(shape: Vec<usize>, p_r: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - p_r;
    ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

fn to4(a: ArrayD<f64>) -> Array4<f64> {
    a.into_dimensionality().expect("slice maps are rank 4")
}

//! Loss terms, built as tape expressions so every training step can take
//! exact gradients — including gradients of gradient norms for the
//! Wasserstein penalty.

use super::ZooError;
use crate::autodiff::Var;
use crate::seeding::subseed;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOG_TAU: f64 = 1.837_877_066_409_345_6; // ln(2π)

fn check_shapes(
    context: &'static str,
    a: &Var<'_>,
    b: &Var<'_>,
) -> Result<(), ZooError> {
    if a.shape() != b.shape() {
        return Err(ZooError::ShapeMismatch {
            context,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Mean absolute deviation between a batch and its reconstruction, reduced
/// over every element (pixels and batch alike).
pub fn ae_loss<'t>(x: Var<'t>, xhat: Var<'t>) -> Result<Var<'t>, ZooError> {
    check_shapes("reconstruction loss", &x, &xhat)?;
    Ok((x - xhat).abs().mean_all())
}

/// KL divergence of a diagonal-Gaussian posterior from the standard normal:
/// `0.5·Σ_dims(μ² + σ² − 1 − log σ²)`, averaged over the batch axis.
pub fn kl_to_standard_normal<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>, ZooError> {
    check_shapes("KL term", &mu, &logvar)?;
    let n = mu.shape()[0] as f64;
    Ok((mu.square() + logvar.exp() - logvar)
        .add_scalar(-1.0)
        .sum_all()
        .mul_scalar(0.5 / n))
}

/// Variational objective: reconstruction plus weighted KL.
pub fn vae_loss<'t>(
    x: Var<'t>,
    xhat: Var<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    lambda_kl: f64,
) -> Result<Var<'t>, ZooError> {
    Ok(ae_loss(x, xhat)? + kl_to_standard_normal(mu, logvar)?.mul_scalar(lambda_kl))
}

/// Code-consistency term: mean squared deviation between the code of the
/// input and the code of its reconstruction.
pub fn constrained_loss_term<'t>(z: Var<'t>, z_of_xhat: Var<'t>) -> Result<Var<'t>, ZooError> {
    check_shapes("code-consistency term", &z, &z_of_xhat)?;
    Ok((z - z_of_xhat).square().mean_all())
}

/// Learnable Gaussian-mixture prior over codes, as tape variables.
/// `mu`/`logvar` are (K, d); `log_pi` is (K,) unnormalized log-weights.
pub struct MixtureParams<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
    pub log_pi: Var<'t>,
}

/// The pieces of the mixture-prior objective, exposed for inspection.
pub struct GmvaeLossParts<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    /// Variational bound on KL(posterior ‖ mixture prior), per batch item.
    pub kl_bound: Var<'t>,
    /// KL of the batch-mean component usage from the uniform categorical.
    pub uniformity: Var<'t>,
    /// Per-sample component responsibilities, rows summing to one.
    pub responsibilities: Var<'t>,
}

/// Reconstruction plus a responsibility-weighted variational bound on the
/// KL against a learnable Gaussian-mixture prior, with a regularizer that
/// discourages the mixture from collapsing onto few components.
///
/// With one standard-normal component and uniform weights this reduces
/// exactly to the mono-modal variational objective.
pub fn gmvae_loss<'t>(
    x: Var<'t>,
    xhat: Var<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    prior: &MixtureParams<'t>,
    lambda_kl: f64,
) -> Result<Var<'t>, ZooError> {
    Ok(gmvae_loss_parts(x, xhat, mu, logvar, prior, lambda_kl)?.total)
}

pub fn gmvae_loss_parts<'t>(
    x: Var<'t>,
    xhat: Var<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    prior: &MixtureParams<'t>,
    lambda_kl: f64,
) -> Result<GmvaeLossParts<'t>, ZooError> {
    check_shapes("posterior heads", &mu, &logvar)?;
    let tape = x.tape();
    let kc = prior.log_pi.shape()[0];
    let d = prior.mu.shape()[1];

    // Reject priors whose normalized component weights underflow: such a
    // component can never regain responsibility mass.
    let pi_vals = prior.log_pi.value();
    let max_lp = pi_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = pi_vals.iter().map(|&l| (l - max_lp).exp()).sum();
    for (k, &l) in pi_vals.iter().enumerate() {
        if (l - max_lp).exp() / norm == 0.0 {
            return Err(ZooError::DegenerateMixture { component: k });
        }
    }

    // Flatten spatial codes to one row per location; the per-sample KL is a
    // sum over locations either way, so dividing by the true batch size at
    // the end keeps dense and spatial reductions consistent.
    let n = mu.shape()[0] as f64;
    let code_shape = mu.shape();
    let m: usize = code_shape[..code_shape.len() - 1].iter().product();
    if *code_shape.last().unwrap() != d {
        return Err(ZooError::ShapeMismatch {
            context: "mixture prior dimensionality",
            left: code_shape,
            right: prior.mu.shape(),
        });
    }
    let mu2 = mu.reshape(&[m, d]);
    let lv2 = logvar.reshape(&[m, d]);

    // Per-component columns assembled into (m, K) matrices via one-hot
    // outer products (the tape has no concatenation primitive).
    let mut log_density = None; // log N(μ_x; m_k, s_k²) per row and component
    let mut kl_per_component = None; // KL(q ‖ N_k) per row and component
    let mut logits = None; // log π_k + log density
    for k in 0..kc {
        let mut hot = ArrayD::zeros(IxDyn(&[1, kc]));
        hot[[0, k]] = 1.0;
        let e_k = tape.constant(hot);
        let m_k = e_k.matmul(prior.mu).broadcast_to(&[m, d]);
        let lv_k = e_k.matmul(prior.logvar).broadcast_to(&[m, d]);
        let lp_k = e_k
            .matmul(prior.log_pi.reshape(&[kc, 1]))
            .broadcast_to(&[m, 1]);

        let diff = mu2 - m_k;
        let inv_var = (-lv_k).exp();
        let logn = (lv_k + diff.square() * inv_var)
            .add_scalar(LOG_TAU)
            .sum_axis(1)
            .mul_scalar(-0.5);
        let kl_k = ((lv2 - lv_k).exp() + diff.square() * inv_var - lv2 + lv_k)
            .add_scalar(-1.0)
            .sum_axis(1)
            .mul_scalar(0.5);

        let place = |col: Var<'t>| col.matmul(e_k);
        let acc = |slot: &mut Option<Var<'t>>, v: Var<'t>| {
            *slot = Some(match *slot {
                Some(s) => s + v,
                None => v,
            })
        };
        acc(&mut log_density, place(logn));
        acc(&mut kl_per_component, place(kl_k));
        acc(&mut logits, place(logn + lp_k));
    }
    let log_density = log_density.unwrap();
    let kl_per_component = kl_per_component.unwrap();
    let logits = logits.unwrap();

    // log π weights must be normalized inside the bound.
    let log_z = prior.log_pi.reshape(&[1, kc]).logsumexp(1); // (1,1)
    let logits = logits - log_z.broadcast_to(&[m, kc]);
    let lse = logits.logsumexp(1); // (m,1)
    let resp = logits.softmax(1); // (m,K)

    // Variational bound: Σ_k r_k (KL_k + log r_k − log π_k), where
    // log r_k − log π_k = log N_k − logsumexp. Exact at K = 1.
    let inner = resp * (kl_per_component + log_density - lse.broadcast_to(&[m, kc]));
    let kl_bound = inner.sum_all().mul_scalar(1.0 / n);

    // Uniformity regularizer: KL(mean responsibilities ‖ uniform).
    let mean_resp = resp.sum_axis(0).mul_scalar(1.0 / m as f64); // (1,K)
    let uniformity = (mean_resp * mean_resp.add_scalar(1e-300).ln())
        .sum_all()
        .add_scalar(libm::log(kc as f64));

    let recon = ae_loss(x, xhat)?;
    let total = recon + (kl_bound + uniformity).mul_scalar(lambda_kl);
    Ok(GmvaeLossParts {
        total,
        recon,
        kl_bound,
        uniformity,
        responsibilities: resp,
    })
}

/// Both sides of a Wasserstein game with gradient penalty.
pub struct WganLosses<'t> {
    /// mean c(fake) − mean c(real) + λ_gp·penalty; the critic descends this.
    pub critic_loss: Var<'t>,
    /// −mean c(fake); the generator descends this.
    pub generator_loss: Var<'t>,
    /// One-sided penalty on interpolates: mean(max(0, ‖∇c‖ − 1)²). Zero for
    /// any critic whose gradients stay inside the unit ball (in particular
    /// a constant critic).
    pub penalty: Var<'t>,
}

/// Assemble the critic and generator objectives. `critic` maps a batch to
/// per-sample scores of shape (n, 1); `real` and `fake` must agree in
/// shape. The interpolation draw is deterministic under `seed`.
pub fn wgan_losses<'t>(
    critic: impl Fn(Var<'t>) -> Var<'t>,
    real: Var<'t>,
    fake: Var<'t>,
    lambda_gp: f64,
    seed: u64,
) -> Result<WganLosses<'t>, ZooError> {
    check_shapes("critic inputs", &real, &fake)?;
    let tape = real.tape();
    let shape = real.shape();
    let n = shape[0];

    let mean_fake = critic(fake).mean_all();
    let mean_real = critic(real).mean_all();

    // Per-sample mixing coefficients, broadcast over all non-batch axes.
    // The interpolate enters as a fresh differentiable leaf: the penalty is
    // a function of the critic's gradient field at that point, and only the
    // critic's parameters are meant to feel it.
    let mut u_shape = vec![1usize; shape.len()];
    u_shape[0] = n;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "wgan-interp", 0));
    let u = ArrayD::from_shape_fn(IxDyn(&u_shape), |_| rng.gen_range(0.0..1.0));
    let u = u.broadcast(IxDyn(&shape)).expect("mixing broadcast").to_owned();
    let interp_value = &u * &real.value() + (1.0 - &u) * &fake.value();
    let interp = tape.leaf(interp_value);

    let score_sum = critic(interp).sum_all();
    let grad = tape.grad(score_sum, &[interp])[0];
    let flat: usize = shape[1..].iter().product();
    let norm = grad
        .square()
        .reshape(&[n, flat])
        .sum_axis(1)
        .add_scalar(1e-24)
        .sqrt();
    let penalty = norm.add_scalar(-1.0).leaky_relu(0.0).square().mean_all();

    Ok(WganLosses {
        critic_loss: mean_fake - mean_real + penalty.mul_scalar(lambda_gp),
        generator_loss: -mean_fake,
        penalty,
    })
}

/// Latent-space adversarial step: a Wasserstein game on codes, with prior
/// draws as the real side. Returns (critic loss, encoder regularizer); the
/// regularizer replaces the KL term of the variant that uses it.
pub fn aae_adversarial_step<'t>(
    critic: impl Fn(Var<'t>) -> Var<'t>,
    codes_real_prior: Var<'t>,
    codes_from_encoder: Var<'t>,
    lambda_gp: f64,
    seed: u64,
) -> Result<(Var<'t>, Var<'t>), ZooError> {
    let w = wgan_losses(critic, codes_real_prior, codes_from_encoder, lambda_gp, seed)?;
    Ok((w.critic_loss, w.generator_loss))
}

/// Component losses of the adversarially trained variational model.
pub struct AnoVaeGanLosses<'t> {
    /// vae + λ_adv·(−mean c(x̂)); encoder and decoder descend this.
    pub generator_loss: Var<'t>,
    pub vae_loss: Var<'t>,
    /// Wasserstein critic loss with the reconstruction as the fake side.
    pub critic_loss: Var<'t>,
}

#[allow(clippy::too_many_arguments)]
pub fn anovaegan_losses<'t>(
    critic: impl Fn(Var<'t>) -> Var<'t>,
    x: Var<'t>,
    xhat: Var<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    lambda_kl: f64,
    lambda_adv: f64,
    lambda_gp: f64,
    seed: u64,
) -> Result<AnoVaeGanLosses<'t>, ZooError> {
    let vae = vae_loss(x, xhat, mu, logvar, lambda_kl)?;
    let w = wgan_losses(critic, x, xhat, lambda_gp, seed)?;
    Ok(AnoVaeGanLosses {
        generator_loss: vae + w.generator_loss.mul_scalar(lambda_adv),
        vae_loss: vae,
        critic_loss: w.critic_loss,
    })
}

/// Pull a scalar out of a reduced tape variable.
pub(crate) fn scalar(v: Var<'_>) -> f64 {
    let val = v.value();
    debug_assert_eq!(val.len(), 1, "expected a scalar, got {:?}", val.shape());
    *val.iter().next().unwrap()
}

//! The training loop: minibatch descent with per-parameter adaptive steps,
//! per-tag loss assembly, Wasserstein critic scheduling, and early stopping
//! on the validation reconstruction error.

use super::losses::{
    aae_adversarial_step, ae_loss, constrained_loss_term, gmvae_loss_parts,
    kl_to_standard_normal, scalar, wgan_losses, MixtureParams,
};
use super::{
    context_corrupt_with, EarlyStopper, EpochRecord, MethodTag, StopDecision, TrainConfig,
    TrainedModel, ZooError,
};
use crate::autodiff::{Adam, Tape, Var};
use crate::data::SliceBatch;
use crate::net::{
    build_network, reparameterize_var, standard_normal_like, NetGraph, NetSpec, ParamVars,
};
use crate::seeding::subseed;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Train one variant until the early-stopping criterion fires (or
/// `max_epochs` runs out) and return the weights of the best validation
/// epoch together with the full loss history.
pub fn train(
    tag: MethodTag,
    spec: &NetSpec,
    train_data: &SliceBatch,
    val_data: &SliceBatch,
    cfg: &TrainConfig,
) -> Result<TrainedModel, ZooError> {
    cfg.validate()?;
    tag.compatible(spec)?;
    spec.validate()?;
    check_data(spec, train_data, val_data)?;
    if tag == MethodTag::FAnoGan {
        return fanogan_train(spec, train_data, val_data, cfg);
    }

    let mut graph = build_network(spec, subseed(cfg.seed, "init", 0))?;
    let mut gen = ParamGroup::new(&graph, cfg.learning_rate, |n| !is_critic_param(n));
    let mut crit = ParamGroup::new(&graph, cfg.learning_rate, is_critic_param);

    let mut stopper = EarlyStopper::new(cfg.patience, cfg.epsilon_improve);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = graph.params().clone();
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train_data.len(), cfg.seed, "epoch-order", epoch);
        let mut sums = WeightedSums::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = step_seed(cfg.seed, "step", epoch, b);
            if crit.has_params() {
                for k in 0..cfg.critic_steps {
                    let c_loss =
                        critic_update(tag, &mut graph, &mut crit, train_data, chunk, cfg, step_seed, k)?;
                    if !c_loss.is_finite() {
                        return Err(ZooError::NonFiniteLoss {
                            epoch,
                            batch: b,
                            context: "critic update",
                        });
                    }
                    sums.add_component("critic", c_loss, chunk.len());
                }
            }
            let outcome =
                generator_step(tag, &mut graph, &mut gen, train_data, chunk, cfg, step_seed)?;
            if !outcome.total.is_finite() {
                return Err(ZooError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    context: "training",
                });
            }
            sums.add_total(outcome.total, chunk.len());
            for (name, v) in outcome.components {
                sums.add_component(name, v, chunk.len());
            }
        }

        let val = validation_recon(&graph, val_data, cfg.batch_size)?;
        if !val.is_finite() {
            return Err(ZooError::NonFiniteLoss {
                epoch,
                batch: 0,
                context: "validation",
            });
        }
        history.push(sums.into_record(epoch, val));

        if val < best_val {
            best_val = val;
            best_params = graph.params().clone();
        }
        stopped_epoch = epoch;
        if stopper.observe(val) == StopDecision::Stop {
            break;
        }
    }

    *graph.params_mut() = best_params;
    Ok(TrainedModel {
        graph,
        tag,
        train_config: cfg.clone(),
        history,
        pretrain_history: Vec::new(),
        stopped_epoch,
    })
}

/// Two-phase adversarial training driven to completion: generator phase,
/// then encoder phase against the frozen generator and critic.
pub fn fanogan_train(
    spec: &NetSpec,
    train_data: &SliceBatch,
    val_data: &SliceBatch,
    cfg: &TrainConfig,
) -> Result<TrainedModel, ZooError> {
    let mut stages = FanoGan::new(spec, cfg)?;
    stages.train_generator(train_data, val_data)?;
    stages.train_encoder(train_data, val_data)
}

/// The two-phase variant with its phases exposed: the encoder phase
/// refuses to run until the generator phase has converged.
pub struct FanoGan {
    spec: NetSpec,
    cfg: TrainConfig,
    graph: NetGraph,
    phase1: Option<Vec<EpochRecord>>,
}

impl FanoGan {
    pub fn new(spec: &NetSpec, cfg: &TrainConfig) -> Result<FanoGan, ZooError> {
        cfg.validate()?;
        MethodTag::FAnoGan.compatible(spec)?;
        let graph = build_network(spec, subseed(cfg.seed, "init", 0))?;
        Ok(FanoGan {
            spec: spec.clone(),
            cfg: cfg.clone(),
            graph,
            phase1: None,
        })
    }

    /// Phase 1: decoder-as-generator against the image critic, codes drawn
    /// from the prior. Early stopping watches the validation Wasserstein
    /// estimate (critic mean on real minus on generated).
    pub fn train_generator(
        &mut self,
        train_data: &SliceBatch,
        val_data: &SliceBatch,
    ) -> Result<(), ZooError> {
        check_data(&self.spec, train_data, val_data)?;
        let cfg = self.cfg.clone();
        let code_dim = self.spec.bottleneck.dense_dim;
        let mut gen = ParamGroup::new(&self.graph, cfg.learning_rate, |n| n.starts_with("dec."));
        let mut crit = ParamGroup::new(&self.graph, cfg.learning_rate, is_critic_param);

        let mut stopper = EarlyStopper::new(cfg.patience, cfg.epsilon_improve);
        let mut history = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_params = self.graph.params().clone();

        for epoch in 1..=cfg.max_epochs {
            let order = epoch_order(train_data.len(), cfg.seed, "p1-order", epoch);
            let mut sums = WeightedSums::default();
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let seed = step_seed(cfg.seed, "p1-step", epoch, b);
                let n = chunk.len();
                for k in 0..cfg.critic_steps {
                    let tape = Tape::new();
                    let pv = mixed_params(&self.graph, &tape, is_critic_param);
                    let x = tape.constant(batch_pixels(train_data, chunk));
                    let z = prior_codes(&tape, n, code_dim, subseed(seed, "prior", k as u64));
                    let fake = self.graph.decode(&pv, z);
                    let w = wgan_losses(
                        |v| self.graph.critic_forward(&pv, v).score,
                        x,
                        fake,
                        cfg.lambda_gp,
                        subseed(seed, "gp", k as u64),
                    )?;
                    let c_loss = scalar(w.critic_loss);
                    if !c_loss.is_finite() {
                        return Err(ZooError::NonFiniteLoss {
                            epoch,
                            batch: b,
                            context: "generator-phase critic",
                        });
                    }
                    crit.step(&mut self.graph, &tape, &pv, w.critic_loss);
                    sums.add_component("critic", c_loss, n);
                }

                let tape = Tape::new();
                let pv = mixed_params(&self.graph, &tape, |name| name.starts_with("dec."));
                let z = prior_codes(&tape, n, code_dim, subseed(seed, "gen-prior", 0));
                let fake = self.graph.decode(&pv, z);
                let g_loss = -self.graph.critic_forward(&pv, fake).score.mean_all();
                let g_val = scalar(g_loss);
                if !g_val.is_finite() {
                    return Err(ZooError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        context: "generator-phase generator",
                    });
                }
                gen.step(&mut self.graph, &tape, &pv, g_loss);
                sums.add_total(g_val, n);
            }

            let w_est = self.validation_wasserstein(val_data, epoch)?;
            if !w_est.is_finite() {
                return Err(ZooError::NonFiniteLoss {
                    epoch,
                    batch: 0,
                    context: "generator-phase validation",
                });
            }
            let mut rec = sums.into_record(epoch, w_est);
            rec.components.insert("wasserstein".into(), w_est);
            history.push(rec);

            if w_est < best {
                best = w_est;
                best_params = self.graph.params().clone();
            }
            if stopper.observe(w_est) == StopDecision::Stop {
                break;
            }
        }

        *self.graph.params_mut() = best_params;
        self.phase1 = Some(history);
        Ok(())
    }

    /// Phase 2: train the encoder against the frozen generator and critic
    /// with the reconstruction-plus-feature-matching objective.
    pub fn train_encoder(
        &mut self,
        train_data: &SliceBatch,
        val_data: &SliceBatch,
    ) -> Result<TrainedModel, ZooError> {
        let phase1 = self.phase1.take().ok_or(ZooError::PhaseOrderViolation)?;
        check_data(&self.spec, train_data, val_data)?;
        let cfg = self.cfg.clone();
        let mut enc = ParamGroup::new(&self.graph, cfg.learning_rate, |n| n.starts_with("enc."));

        let mut stopper = EarlyStopper::new(cfg.patience, cfg.epsilon_improve);
        let mut history = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_params = self.graph.params().clone();
        let mut stopped_epoch = 0;

        for epoch in 1..=cfg.max_epochs {
            let order = epoch_order(train_data.len(), cfg.seed, "p2-order", epoch);
            let mut sums = WeightedSums::default();
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let tape = Tape::new();
                let pv = mixed_params(&self.graph, &tape, |name| name.starts_with("enc."));
                let x = tape.constant(batch_pixels(train_data, chunk));
                let code = self.graph.encode(&pv, x).mu;
                let xhat = self.graph.decode(&pv, code);
                let recon = ae_loss(x, xhat)?;
                let feat_x = self.graph.critic_forward(&pv, x).features;
                let feat_xhat = self.graph.critic_forward(&pv, xhat).features;
                let matching = constrained_loss_term(feat_x, feat_xhat)?;
                let loss = recon + matching.mul_scalar(cfg.kappa);

                let total = scalar(loss);
                if !total.is_finite() {
                    return Err(ZooError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        context: "encoder-phase training",
                    });
                }
                enc.step(&mut self.graph, &tape, &pv, loss);
                sums.add_total(total, chunk.len());
                sums.add_component("recon", scalar(recon), chunk.len());
                sums.add_component("feature_matching", scalar(matching), chunk.len());
            }

            let val = validation_recon(&self.graph, val_data, cfg.batch_size)?;
            if !val.is_finite() {
                return Err(ZooError::NonFiniteLoss {
                    epoch,
                    batch: 0,
                    context: "encoder-phase validation",
                });
            }
            history.push(sums.into_record(epoch, val));
            if val < best_val {
                best_val = val;
                best_params = self.graph.params().clone();
            }
            stopped_epoch = epoch;
            if stopper.observe(val) == StopDecision::Stop {
                break;
            }
        }

        *self.graph.params_mut() = best_params;
        Ok(TrainedModel {
            graph: self.graph.clone(),
            tag: MethodTag::FAnoGan,
            train_config: cfg,
            history,
            pretrain_history: phase1,
            stopped_epoch,
        })
    }

    fn validation_wasserstein(&self, val_data: &SliceBatch, epoch: usize) -> Result<f64, ZooError> {
        let code_dim = self.spec.bottleneck.dense_dim;
        let mut num = 0.0;
        let mut den = 0.0;
        let all: Vec<usize> = (0..val_data.len()).collect();
        for chunk in all.chunks(self.cfg.batch_size) {
            let tape = Tape::new();
            let pv = self.graph.constant_params(&tape);
            let x = tape.constant(batch_pixels(val_data, chunk));
            let z = prior_codes(
                &tape,
                chunk.len(),
                code_dim,
                subseed(self.cfg.seed, "p1-val-prior", epoch as u64),
            );
            let fake = self.graph.decode(&pv, z);
            let w = self.graph.critic_forward(&pv, x).score.mean_all()
                - self.graph.critic_forward(&pv, fake).score.mean_all();
            num += scalar(w) * chunk.len() as f64;
            den += chunk.len() as f64;
        }
        Ok(num / den)
    }
}

/// Deterministic validation reconstruction error: posterior means, no
/// corruption, no sampling — the quantity early stopping watches for every
/// variant.
pub fn validation_recon(
    graph: &NetGraph,
    val_data: &SliceBatch,
    batch_size: usize,
) -> Result<f64, ZooError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let all: Vec<usize> = (0..val_data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let tape = Tape::new();
        let pv = graph.constant_params(&tape);
        let x = tape.constant(batch_pixels(val_data, chunk));
        let code = graph.encode(&pv, x).mu;
        let xhat = graph.decode(&pv, code);
        num += scalar(ae_loss(x, xhat)?) * chunk.len() as f64;
        den += chunk.len() as f64;
    }
    Ok(num / den)
}

// ---------------------------------------------------------------------
// Internals
// ---------------------------------------------------------------------

fn is_critic_param(name: &str) -> bool {
    name.starts_with("crit.")
}

fn check_data(
    spec: &NetSpec,
    train_data: &SliceBatch,
    val_data: &SliceBatch,
) -> Result<(), ZooError> {
    if train_data.len() == 0 {
        return Err(ZooError::InvalidConfig("empty training set".into()));
    }
    if val_data.len() == 0 {
        return Err(ZooError::InvalidConfig("empty validation set".into()));
    }
    for (name, d) in [("training", train_data), ("validation", val_data)] {
        if d.slice_size() != spec.input_size {
            return Err(ZooError::InvalidConfig(format!(
                "{name} slices are {} px but the network expects {}",
                d.slice_size(),
                spec.input_size
            )));
        }
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, label, epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn step_seed(seed: u64, label: &str, epoch: usize, batch: usize) -> u64 {
    subseed(seed, label, ((epoch as u64) << 24) | batch as u64)
}

fn batch_pixels(data: &SliceBatch, chunk: &[usize]) -> ArrayD<f64> {
    data.select(chunk).pixels.into_dyn()
}

fn prior_codes<'t>(tape: &'t Tape, n: usize, dim: usize, seed: u64) -> Var<'t> {
    let like = ArrayD::zeros(ndarray::IxDyn(&[n, dim]));
    tape.constant(standard_normal_like(&like, seed))
}

/// Leaf the parameters selected by `trainable`; everything else enters as a
/// constant so the backward pass skips it.
fn mixed_params<'t>(
    graph: &NetGraph,
    tape: &'t Tape,
    trainable: impl Fn(&str) -> bool,
) -> ParamVars<'t> {
    graph
        .params()
        .iter()
        .map(|(k, v)| {
            let var = if trainable(k) {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            };
            (k.clone(), var)
        })
        .collect()
}

/// An optimizer bound to a fixed, named subset of the graph's parameters.
struct ParamGroup {
    names: Vec<String>,
    adam: Adam,
}

impl ParamGroup {
    fn new(graph: &NetGraph, lr: f64, pred: impl Fn(&str) -> bool) -> ParamGroup {
        ParamGroup {
            names: graph
                .params()
                .keys()
                .filter(|n| pred(n))
                .cloned()
                .collect(),
            adam: Adam::new(lr),
        }
    }

    fn has_params(&self) -> bool {
        !self.names.is_empty()
    }

    /// Backprop `loss` into this group and apply one update.
    fn step<'t>(&mut self, graph: &mut NetGraph, tape: &'t Tape, pv: &ParamVars<'t>, loss: Var<'t>) {
        let vars: Vec<Var<'t>> = self.names.iter().map(|n| pv[n.as_str()]).collect();
        let grads: Vec<ArrayD<f64>> = tape
            .grad(loss, &vars)
            .iter()
            .map(|g| g.value())
            .collect();
        let mut arrays: Vec<ArrayD<f64>> = self
            .names
            .iter()
            .map(|n| graph.param(n).clone())
            .collect();
        self.adam.step(&mut arrays, &grads);
        for (n, a) in self.names.iter().zip(arrays) {
            graph.params_mut().insert(n.clone(), a);
        }
    }
}

struct StepOutcome {
    total: f64,
    components: BTreeMap<String, f64>,
}

/// One critic update for the adversarial variants; generator-side
/// parameters enter as constants so only the critic moves.
#[allow(clippy::too_many_arguments)]
fn critic_update(
    tag: MethodTag,
    graph: &mut NetGraph,
    crit: &mut ParamGroup,
    data: &SliceBatch,
    chunk: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    k: usize,
) -> Result<f64, ZooError> {
    let tape = Tape::new();
    let pv = mixed_params(graph, &tape, is_critic_param);
    let x = tape.constant(batch_pixels(data, chunk));
    let gp_seed = subseed(seed, "gp", k as u64);

    let critic_loss = match tag {
        MethodTag::ConstrainedAae => {
            let codes = graph.encode(&pv, x).mu;
            let prior = prior_codes(
                &tape,
                chunk.len(),
                codes.shape()[1],
                subseed(seed, "prior", k as u64),
            );
            let (c_loss, _) = aae_adversarial_step(
                |v| graph.latent_critic_forward(&pv, v),
                prior,
                codes,
                cfg.lambda_gp,
                gp_seed,
            )?;
            c_loss
        }
        MethodTag::AnoVaeGan => {
            let codes = graph.encode(&pv, x);
            let eps = standard_normal_like(&codes.mu.value(), subseed(seed, "critic-eps", k as u64));
            let code = reparameterize_var(&tape, codes.mu, codes.logvar.unwrap(), &eps);
            let xhat = graph.decode(&pv, code);
            wgan_losses(
                |v| graph.critic_forward(&pv, v).score,
                x,
                xhat,
                cfg.lambda_gp,
                gp_seed,
            )?
            .critic_loss
        }
        _ => unreachable!("critic updates only run for adversarial tags"),
    };
    let value = scalar(critic_loss);
    crit.step(graph, &tape, &pv, critic_loss);
    Ok(value)
}

/// One descent step on the generator-side objective of `tag`.
fn generator_step(
    tag: MethodTag,
    graph: &mut NetGraph,
    gen: &mut ParamGroup,
    data: &SliceBatch,
    chunk: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepOutcome, ZooError> {
    let tape = Tape::new();
    let pv = mixed_params(graph, &tape, |n| !is_critic_param(n));
    let sub = data.select(chunk);
    let x_clean = tape.constant(sub.pixels.clone().into_dyn());
    let x_in = if tag.corrupts_input() {
        let corrupted = context_corrupt_with(
            &sub,
            subseed(seed, "corrupt", 0),
            cfg.corrupt_patches[0]..=cfg.corrupt_patches[1],
            cfg.corrupt_sides[0]..=cfg.corrupt_sides[1],
        );
        tape.constant(corrupted.pixels.into_dyn())
    } else {
        x_clean
    };

    let codes = graph.encode(&pv, x_in);
    let code = if graph.spec.bottleneck.variational {
        let eps = standard_normal_like(&codes.mu.value(), subseed(seed, "reparam", 0));
        reparameterize_var(&tape, codes.mu, codes.logvar.unwrap(), &eps)
    } else {
        codes.mu
    };
    let xhat = graph.decode(&pv, code);
    let recon = ae_loss(x_clean, xhat)?;

    let mut components = BTreeMap::new();
    components.insert("recon".to_string(), scalar(recon));

    let loss = match tag {
        MethodTag::AeDense | MethodTag::AeSpatial | MethodTag::ContextAe => recon,
        MethodTag::Vae | MethodTag::ContextVae => {
            let kl = kl_to_standard_normal(codes.mu, codes.logvar.unwrap())?;
            components.insert("kl".to_string(), scalar(kl));
            recon + kl.mul_scalar(cfg.lambda_kl)
        }
        MethodTag::GmvaeDense | MethodTag::GmvaeSpatial => {
            let prior = MixtureParams {
                mu: pv["prior.mu"],
                logvar: pv["prior.logvar"],
                log_pi: pv["prior.log_pi"],
            };
            let parts = gmvae_loss_parts(
                x_clean,
                xhat,
                codes.mu,
                codes.logvar.unwrap(),
                &prior,
                cfg.lambda_kl,
            )?;
            components.insert("kl_bound".to_string(), scalar(parts.kl_bound));
            components.insert("uniformity".to_string(), scalar(parts.uniformity));
            parts.total
        }
        MethodTag::ConstrainedAe => {
            let z_of_xhat = graph.encode(&pv, xhat).mu;
            let consistency = constrained_loss_term(codes.mu, z_of_xhat)?;
            components.insert("constrained".to_string(), scalar(consistency));
            recon + consistency.mul_scalar(cfg.lambda_constraint)
        }
        MethodTag::ConstrainedAae => {
            let z_of_xhat = graph.encode(&pv, xhat).mu;
            let consistency = constrained_loss_term(codes.mu, z_of_xhat)?;
            // The adversarial pull on codes replaces the KL term, so it
            // inherits the KL weight.
            let reg = -graph.latent_critic_forward(&pv, codes.mu).mean_all();
            components.insert("constrained".to_string(), scalar(consistency));
            components.insert("adversarial".to_string(), scalar(reg));
            recon + consistency.mul_scalar(cfg.lambda_constraint) + reg.mul_scalar(cfg.lambda_kl)
        }
        MethodTag::AnoVaeGan => {
            let kl = kl_to_standard_normal(codes.mu, codes.logvar.unwrap())?;
            let adv = -graph.critic_forward(&pv, xhat).score.mean_all();
            components.insert("kl".to_string(), scalar(kl));
            components.insert("adversarial".to_string(), scalar(adv));
            recon + kl.mul_scalar(cfg.lambda_kl) + adv.mul_scalar(cfg.lambda_adv)
        }
        MethodTag::FAnoGan => unreachable!("two-phase variant routes through fanogan_train"),
    };

    let total = scalar(loss);
    gen.step(graph, &tape, &pv, loss);
    Ok(StepOutcome { total, components })
}

/// Accumulates batch-size-weighted means of the epoch's loss components.
#[derive(Default)]
struct WeightedSums {
    total: f64,
    total_weight: f64,
    components: BTreeMap<String, (f64, f64)>,
}

impl WeightedSums {
    fn add_total(&mut self, v: f64, n: usize) {
        self.total += v * n as f64;
        self.total_weight += n as f64;
    }

    fn add_component(&mut self, name: impl Into<String>, v: f64, n: usize) {
        let e = self.components.entry(name.into()).or_insert((0.0, 0.0));
        e.0 += v * n as f64;
        e.1 += n as f64;
    }

    fn into_record(self, epoch: usize, val_loss: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: self.total / self.total_weight.max(1.0),
            val_loss,
            components: self
                .components
                .into_iter()
                .map(|(k, (s, w))| (k, s / w.max(1.0)))
                .collect(),
        }
    }
}

//! Parameter storage and differentiable forward passes.

use super::{BottleneckKind, CriticKind, NetSpec};
use crate::autodiff::{ConvGeom, Tape, Var};
use crate::seeding::subseed;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Named parameter tensors of one model instance. Parameters live outside
/// any tape; each forward pass leafs them onto the caller's tape.
#[derive(Clone, Debug)]
pub struct NetGraph {
    pub spec: NetSpec,
    params: BTreeMap<String, ArrayD<f64>>,
}

/// Tape handles for every parameter, keyed by name.
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

/// Bottleneck heads produced by the encoder.
pub struct Codes<'t> {
    /// Code head: the deterministic code, or the posterior mean when
    /// variational.
    pub mu: Var<'t>,
    /// Log-variance head (variational specs only).
    pub logvar: Option<Var<'t>>,
}

/// Critic outputs: per-sample scalar plus the flattened features the score
/// is computed from (used for feature matching).
pub struct CriticOut<'t> {
    pub score: Var<'t>,
    pub features: Var<'t>,
}

impl NetGraph {
    pub(super) fn initialize(spec: NetSpec, seed: u64) -> NetGraph {
        let mut g = NetGraph {
            spec,
            params: BTreeMap::new(),
        };
        let k = g.spec.kernel;
        let widths = g.spec.widths;

        let conv_stack = |prefix: &str, g: &mut NetGraph| {
            let mut cin = 1;
            for (i, &cout) in widths.iter().enumerate() {
                g.add_weight(&format!("{prefix}.conv{i}.w"), &[k, k, cin, cout], seed);
                g.add_zeros(&format!("{prefix}.conv{i}.b"), &[cout]);
                cin = cout;
            }
        };
        conv_stack("enc", &mut g);

        let flat = g.spec.flat_len();
        let d = g.spec.dense_dim();
        match g.spec.bottleneck.kind {
            BottleneckKind::Dense => {
                g.add_weight("enc.code_mu.w", &[flat, d], seed);
                g.add_zeros("enc.code_mu.b", &[d]);
                if g.spec.bottleneck.variational {
                    g.add_weight("enc.code_logvar.w", &[flat, d], seed);
                    g.add_zeros("enc.code_logvar.b", &[d]);
                }
                g.add_weight("dec.fc.w", &[d, flat], seed);
                g.add_zeros("dec.fc.b", &[flat]);
            }
            BottleneckKind::Spatial => {
                let c = widths[3];
                g.add_weight("enc.code_mu.w", &[1, 1, c, c], seed);
                g.add_zeros("enc.code_mu.b", &[c]);
                if g.spec.bottleneck.variational {
                    g.add_weight("enc.code_logvar.w", &[1, 1, c, c], seed);
                    g.add_zeros("enc.code_logvar.b", &[c]);
                }
            }
        }

        // Decoder mirror: widths[3] → widths[2] → widths[1] → widths[0] → 1.
        let mut cs = widths[3];
        for (i, &ct) in [widths[2], widths[1], widths[0], 1].iter().enumerate() {
            g.add_weight(&format!("dec.deconv{i}.w"), &[k, k, ct, cs], seed);
            g.add_zeros(&format!("dec.deconv{i}.b"), &[ct]);
            cs = ct;
        }

        match g.spec.critic {
            CriticKind::None => {}
            CriticKind::Image => {
                conv_stack("crit", &mut g);
                g.add_weight("crit.head.w", &[flat, 1], seed);
                g.add_zeros("crit.head.b", &[1]);
            }
            CriticKind::Latent => {
                let h = 64;
                g.add_weight("crit.fc0.w", &[d, h], seed);
                g.add_zeros("crit.fc0.b", &[h]);
                g.add_weight("crit.fc1.w", &[h, h], seed);
                g.add_zeros("crit.fc1.b", &[h]);
                g.add_weight("crit.head.w", &[h, 1], seed);
                g.add_zeros("crit.head.b", &[1]);
            }
        }

        if g.spec.bottleneck.mixture_components > 1 {
            let kc = g.spec.bottleneck.mixture_components;
            let code_dim = match g.spec.bottleneck.kind {
                BottleneckKind::Dense => d,
                BottleneckKind::Spatial => widths[3],
            };
            // Learnable mixture prior: component means spread at init so the
            // mixture starts multi-modal; weights uniform; unit variances.
            g.add_weight("prior.mu", &[kc, code_dim], seed);
            g.add_zeros("prior.logvar", &[kc, code_dim]);
            g.add_zeros("prior.log_pi", &[kc]);
        }
        g
    }

    /// He-scaled normal init; the stream is keyed by tensor name, so the
    /// draw for one tensor never depends on which others exist.
    fn add_weight(&mut self, name: &str, shape: &[usize], seed: u64) {
        let fan_in: usize = match shape.len() {
            2 => shape[0],
            4 => shape[0] * shape[1] * shape[2],
            _ => shape.iter().product::<usize>() / shape[shape.len() - 1],
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, name, 0));
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
        });
        self.params.insert(name.to_string(), value);
    }

    fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.params
            .insert(name.to_string(), ArrayD::zeros(IxDyn(shape)));
    }

    pub fn params(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, ArrayD<f64>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Total elements across parameters whose name starts with any prefix.
    pub fn parameter_count_under(&self, prefixes: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Leaf every parameter onto `tape` as a differentiable input.
    pub fn leaf_params<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Put every parameter on `tape` as a constant: forwards work, but the
    /// backward pass skips all weight-gradient work. Used when only input
    /// gradients are needed (saliency, restoration).
    pub fn constant_params<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Encoder: image batch (n, s, s, 1) → bottleneck heads.
    pub fn encode<'t>(&self, pv: &ParamVars<'t>, x: Var<'t>) -> Codes<'t> {
        let h = self.conv_stack(pv, "enc", x);
        let n = h.shape()[0];
        match self.spec.bottleneck.kind {
            BottleneckKind::Dense => {
                let flat = h.reshape(&[n, self.spec.flat_len()]);
                let mu = dense(pv, "enc.code_mu", flat);
                let logvar = self
                    .spec
                    .bottleneck
                    .variational
                    .then(|| dense(pv, "enc.code_logvar", flat));
                Codes { mu, logvar }
            }
            BottleneckKind::Spatial => {
                let mu = conv1x1(pv, "enc.code_mu", h);
                let logvar = self
                    .spec
                    .bottleneck
                    .variational
                    .then(|| conv1x1(pv, "enc.code_logvar", h));
                Codes { mu, logvar }
            }
        }
    }

    /// Decoder: code → image batch (n, s, s, 1) in (0, 1).
    pub fn decode<'t>(&self, pv: &ParamVars<'t>, code: Var<'t>) -> Var<'t> {
        let g = self.spec.bottleneck_grid();
        let c = self.spec.widths[3];
        let mut h = match self.spec.bottleneck.kind {
            BottleneckKind::Dense => {
                let n = code.shape()[0];
                dense(pv, "dec.fc", code)
                    .leaky_relu(self.spec.leaky_slope)
                    .reshape(&[n, g, g, c])
            }
            BottleneckKind::Spatial => code,
        };
        for i in 0..4 {
            h = self.deconv_stage(pv, &format!("dec.deconv{i}"), h);
            h = if i < 3 {
                h.leaky_relu(self.spec.leaky_slope)
            } else {
                h.sigmoid()
            };
        }
        h
    }

    /// Image critic: encoder-replica conv stack, flatten, scalar head.
    pub fn critic_forward<'t>(&self, pv: &ParamVars<'t>, x: Var<'t>) -> CriticOut<'t> {
        assert_eq!(self.spec.critic, CriticKind::Image, "no image critic built");
        let h = self.conv_stack(pv, "crit", x);
        let n = h.shape()[0];
        let features = h.reshape(&[n, self.spec.flat_len()]);
        let score = dense(pv, "crit.head", features);
        CriticOut { score, features }
    }

    /// Latent critic: small MLP on dense codes → per-sample scalar.
    pub fn latent_critic_forward<'t>(&self, pv: &ParamVars<'t>, z: Var<'t>) -> Var<'t> {
        assert_eq!(self.spec.critic, CriticKind::Latent, "no latent critic built");
        let h0 = dense(pv, "crit.fc0", z).leaky_relu(self.spec.leaky_slope);
        let h1 = dense(pv, "crit.fc1", h0).leaky_relu(self.spec.leaky_slope);
        dense(pv, "crit.head", h1)
    }

    fn conv_stack<'t>(&self, pv: &ParamVars<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for i in 0..4 {
            h = self
                .conv_stage(pv, &format!("{prefix}.conv{i}"), h)
                .leaky_relu(self.spec.leaky_slope);
        }
        h
    }

    /// One stride-2 "same" convolution: unfold → matmul → bias.
    fn conv_stage<'t>(&self, pv: &ParamVars<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        let k = self.spec.kernel;
        let shape = x.shape();
        let (n, h, w, cin) = (shape[0], shape[1], shape[2], shape[3]);
        let wv = pv[&format!("{prefix}.w")];
        let cout = wv.shape()[3];
        let geom = ConvGeom::same(h, w, cin, k, 2);
        let y = x
            .unfold(geom)
            .matmul(wv.reshape(&[k * k * cin, cout]))
            .reshape(&[n, geom.out_h, geom.out_w, cout]);
        y + pv[&format!("{prefix}.b")].broadcast_to(&[n, geom.out_h, geom.out_w, cout])
    }

    /// One stride-2 transposed convolution (the exact adjoint geometry of
    /// [`Self::conv_stage`]): matmul → fold → bias. Doubles the grid.
    fn deconv_stage<'t>(&self, pv: &ParamVars<'t>, prefix: &str, y: Var<'t>) -> Var<'t> {
        let k = self.spec.kernel;
        let shape = y.shape();
        let (n, h, w, cs) = (shape[0], shape[1], shape[2], shape[3]);
        let wv = pv[&format!("{prefix}.w")];
        let ct = wv.shape()[2];
        let geom = ConvGeom::same(2 * h, 2 * w, ct, k, 2);
        let cols = y
            .reshape(&[n * h * w, cs])
            .matmul(wv.reshape(&[k * k * ct, cs]).transpose());
        let x = cols.fold(geom);
        x + pv[&format!("{prefix}.b")].broadcast_to(&[n, 2 * h, 2 * w, ct])
    }
}

impl NetSpec {
    pub(super) fn dense_dim(&self) -> usize {
        self.bottleneck.dense_dim
    }
}

/// Fully-connected layer `x·W + b` for (n, in) inputs.
fn dense<'t>(pv: &ParamVars<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let w = pv[&format!("{prefix}.w")];
    let b = pv[&format!("{prefix}.b")];
    let n = x.shape()[0];
    let out = w.shape()[1];
    x.matmul(w) + b.broadcast_to(&[n, out])
}

/// 1×1 convolution as a per-location dense layer on the channel axis.
fn conv1x1<'t>(pv: &ParamVars<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let w = pv[&format!("{prefix}.w")];
    let b = pv[&format!("{prefix}.b")];
    let shape = x.shape();
    let (n, g0, g1, cin) = (shape[0], shape[1], shape[2], shape[3]);
    let cout = w.shape()[3];
    let y = x
        .reshape(&[n * g0 * g1, cin])
        .matmul(w.reshape(&[cin, cout]))
        .reshape(&[n, g0, g1, cout]);
    y + b.broadcast_to(&[n, g0, g1, cout])
}

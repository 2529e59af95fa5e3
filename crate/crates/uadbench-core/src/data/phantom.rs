//! Deterministic synthetic head phantoms.
//!
//! Each subject is a smooth ellipsoidal "brain" with per-subject anatomy:
//! a bright-core/dark-rim radial profile, paired dark ventricle-like
//! cavities, low-frequency cosine texture, and mild voxel noise, all scaled
//! by a random per-scan gain so that volumes arrive un-normalized like real
//! scanner output. Anomalous subjects additionally receive 1–4 blob lesions
//! with a smooth intensity offset; the ground-truth mask is exactly the
//! region where that offset is non-zero.
//!
//! All transcendentals go through `libm` and all randomness through
//! seed-derived ChaCha streams, so identical configs produce bit-identical
//! volumes on every platform.

use super::{DataError, Volume};
use crate::seeding::subseed;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Polarity of the simulated lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionMode {
    /// All lesions brighter than surrounding tissue (MS-like).
    Hyper,
    /// Each lesion independently brighter or darker (tumor-like mix).
    Mixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    /// Fraction of subjects that carry lesions; the first
    /// `round(rate·n_subjects)` subjects in generation order are the
    /// anomalous ones (splits shuffle subjects afterwards anyway).
    pub anomaly_rate: f64,
    pub lesion_intensity_mode: LesionMode,
    pub seed: u64,
    /// Voxel grid (nx, ny, nz); axial slices are (nx, ny) planes.
    pub volume_shape: [usize; 3],
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_subjects == 0 {
            return Err(DataError::InvalidConfig("n_subjects must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(DataError::InvalidConfig(format!(
                "anomaly_rate {} outside [0,1]",
                self.anomaly_rate
            )));
        }
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(DataError::InvalidConfig(format!(
                "volume_shape {:?} has an axis below 8 voxels",
                self.volume_shape
            )));
        }
        Ok(())
    }
}

/// Subject-level anatomy parameters, drawn once per subject in a fixed
/// order so healthy and lesioned variants share identical anatomy streams.
struct Anatomy {
    semi_axes: [f64; 3],
    center: [f64; 3],
    tissue_base: f64,
    radial_gain: f64,
    rim_drop: f64,
    ventricle_x: f64,
    ventricle_dip: f64,
    texture: Vec<(f64, [f64; 3], f64)>, // (amplitude, wave vector, phase)
    noise_sigma: f64,
    scanner_gain: f64,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng) -> Anatomy {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let semi_axes = [u(0.72, 0.82), u(0.76, 0.86), u(0.68, 0.78)];
        let center = [u(-0.03, 0.03), u(-0.03, 0.03), u(-0.02, 0.02)];
        let tissue_base = u(0.50, 0.58);
        let radial_gain = u(0.20, 0.30);
        let rim_drop = u(0.10, 0.14);
        let ventricle_x = u(0.14, 0.20);
        let ventricle_dip = u(0.22, 0.32);
        let texture = (0..3)
            .map(|_| {
                let amp = u(0.015, 0.04);
                let k = [u(1.5, 4.0), u(1.5, 4.0), u(1.5, 4.0)];
                let phase = u(0.0, core::f64::consts::TAU);
                (amp, k, phase)
            })
            .collect();
        let noise_sigma = 0.008;
        let scanner_gain = u(220.0, 380.0);
        Anatomy {
            semi_axes,
            center,
            tissue_base,
            radial_gain,
            rim_drop,
            ventricle_x,
            ventricle_dip,
            texture,
            noise_sigma,
            scanner_gain,
        }
    }
}

/// One blob lesion: anisotropic ellipsoid with a cosine-wobbled boundary and
/// a linear intensity falloff toward it.
struct Lesion {
    center: [f64; 3],
    radii: [f64; 3],
    wobble_amp: f64,
    wobble_k: [f64; 3],
    wobble_phase: f64,
    /// Signed intensity offset at the lesion core, in tissue units.
    delta: f64,
}

fn draw_lesions(
    rng: &mut ChaCha8Rng,
    anatomy: &Anatomy,
    mode: LesionMode,
    shape: [usize; 3],
) -> Vec<Lesion> {
    let n = rng.gen_range(1..=4usize);
    (0..n)
        .map(|_| {
            // Center inside the 0.4-scaled anatomy ellipsoid: far enough from
            // the boundary that a 3-voxel mask erosion cannot touch lesions.
            let center = loop {
                let c = [
                    rng.gen_range(-0.4..0.4) * anatomy.semi_axes[0],
                    rng.gen_range(-0.4..0.4) * anatomy.semi_axes[1],
                    rng.gen_range(-0.4..0.4) * anatomy.semi_axes[2],
                ];
                let rho2: f64 = (0..3)
                    .map(|a| (c[a] / anatomy.semi_axes[a]).powi(2))
                    .sum();
                if rho2 <= 0.4 * 0.4 {
                    break [
                        c[0] + anatomy.center[0],
                        c[1] + anatomy.center[1],
                        c[2] + anatomy.center[2],
                    ];
                }
            };
            let r_plane = rng.gen_range(2.5..5.5); // voxels
            let r_z = rng.gen_range(1.5..2.5); // voxels, axial extent kept small
            let radii = [
                r_plane * 2.0 / shape[0] as f64,
                r_plane * 2.0 / shape[1] as f64,
                r_z * 2.0 / shape[2] as f64,
            ];
            let wobble_amp = rng.gen_range(0.1..0.3);
            let wobble_k = [
                rng.gen_range(4.0..9.0),
                rng.gen_range(4.0..9.0),
                rng.gen_range(4.0..9.0),
            ];
            let wobble_phase = rng.gen_range(0.0..core::f64::consts::TAU);
            let magnitude = rng.gen_range(0.40..0.65);
            let delta = match mode {
                LesionMode::Hyper => magnitude,
                LesionMode::Mixed => {
                    if rng.gen_bool(0.5) {
                        magnitude
                    } else {
                        -rng.gen_range(0.25..0.40)
                    }
                }
            };
            Lesion {
                center,
                radii,
                wobble_amp,
                wobble_k,
                wobble_phase,
                delta,
            }
        })
        .collect()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generate `cfg.n_subjects` phantoms with dataset id `"phantom"` and
/// subject ids `s000, s001, …` in order. Bit-identical for identical
/// configs.
pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Vec<Volume>, DataError> {
    cfg.validate()?;
    let [nx, ny, nz] = cfg.volume_shape;
    let n_anomalous = (cfg.anomaly_rate * cfg.n_subjects as f64).round() as usize;

    let mut volumes = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "phantom-subject", s as u64));
        let anatomy = Anatomy::draw(&mut rng);
        let lesions = if s < n_anomalous {
            draw_lesions(&mut rng, &anatomy, cfg.lesion_intensity_mode, cfg.volume_shape)
        } else {
            Vec::new()
        };

        let mut intensities = Array3::zeros((nx, ny, nz));
        let mut brain = Array3::from_elem((nx, ny, nz), false);
        let mut gt = Array3::from_elem((nx, ny, nz), false);

        // Lesions are confined to ρ ≤ rho_cap so that an L1 ball of radius 3
        // around any ground-truth voxel stays inside the brain: one voxel
        // step changes ρ by at most 2/(n_axis·semi_axis), hence 3.5 steps of
        // headroom guarantee the margin with slack. Keeps ground truth
        // untouched by the radius-3 mask erosion used at evaluation time.
        let rho_step = (0..3)
            .map(|a| 2.0 / (cfg.volume_shape[a] as f64 * anatomy.semi_axes[a]))
            .fold(0.0f64, f64::max);
        let rho_cap = 1.0 - 3.5 * rho_step;

        for k in 0..nz {
            let w = (2.0 * (k as f64 + 0.5) / nz as f64 - 1.0) - anatomy.center[2];
            for j in 0..ny {
                let v = (2.0 * (j as f64 + 0.5) / ny as f64 - 1.0) - anatomy.center[1];
                for i in 0..nx {
                    let u = (2.0 * (i as f64 + 0.5) / nx as f64 - 1.0) - anatomy.center[0];
                    let rho2 = (u / anatomy.semi_axes[0]) * (u / anatomy.semi_axes[0])
                        + (v / anatomy.semi_axes[1]) * (v / anatomy.semi_axes[1])
                        + (w / anatomy.semi_axes[2]) * (w / anatomy.semi_axes[2]);
                    // Keep the per-voxel noise stream aligned across subjects
                    // regardless of mask membership.
                    let noise: f64 = {
                        let g: f64 = sample_standard_normal(&mut rng);
                        g * anatomy.noise_sigma
                    };
                    if rho2 > 1.0 {
                        continue;
                    }
                    brain[[i, j, k]] = true;
                    let rho = libm::sqrt(rho2);

                    let mut t = anatomy.tissue_base + anatomy.radial_gain * (1.0 - rho);
                    t -= anatomy.rim_drop * smoothstep(0.80, 1.0, rho);
                    for &(amp, kvec, phase) in &anatomy.texture {
                        t += amp * libm::cos(kvec[0] * u + kvec[1] * v + kvec[2] * w + phase);
                    }
                    // Two mirrored ventricle-like cavities near the center.
                    for sx in [-1.0f64, 1.0] {
                        let du = (u - sx * anatomy.ventricle_x) / 0.10;
                        let dv = v / 0.16;
                        let dw = w / 0.26;
                        let d2 = du * du + dv * dv + dw * dw;
                        t -= anatomy.ventricle_dip * libm::exp(-d2);
                    }
                    if rho <= rho_cap {
                        for lesion in &lesions {
                            let du = (u + anatomy.center[0] - lesion.center[0]) / lesion.radii[0];
                            let dv = (v + anatomy.center[1] - lesion.center[1]) / lesion.radii[1];
                            let dw = (w + anatomy.center[2] - lesion.center[2]) / lesion.radii[2];
                            let d2 = du * du + dv * dv + dw * dw;
                            let boundary = 1.0
                                + lesion.wobble_amp
                                    * libm::cos(
                                        lesion.wobble_k[0] * u
                                            + lesion.wobble_k[1] * v
                                            + lesion.wobble_k[2] * w
                                            + lesion.wobble_phase,
                                    );
                            if d2 < boundary {
                                gt[[i, j, k]] = true;
                                t += lesion.delta * (1.0 - d2 / boundary);
                            }
                        }
                    }
                    t = (t + noise).clamp(0.02, 1.6);
                    intensities[[i, j, k]] = t * anatomy.scanner_gain;
                }
            }
        }

        volumes.push(Volume::new(
            intensities,
            brain,
            Some(gt),
            format!("s{s:03}"),
            "phantom",
            false,
        )?);
    }
    Ok(volumes)
}

/// Box–Muller from explicit uniforms: keeps the draw count per voxel fixed
/// and avoids any dependence on `rand_distr` internals.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

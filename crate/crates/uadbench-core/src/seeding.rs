//! Deterministic derivation of independent RNG streams from one master seed.
//!
//! Every stochastic stage (phantom subjects, weight init, batch shuffling,
//! sampling at score time) gets its own stream keyed by a label, so adding
//! draws to one stage never perturbs another.

/// splitmix64 finalizer; good avalanche, trivially portable.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the sub-seed for (`seed`, `stream`, `index`). Distinct inputs give
/// statistically independent ChaCha streams.
pub fn subseed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for &b in stream.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index)
}

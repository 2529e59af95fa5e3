//! Input corruption for the context-recovering variants: rectangular
//! patches are zeroed out of each slice while the loss target stays the
//! uncorrupted original.

use crate::data::SliceBatch;
use crate::seeding::subseed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::RangeInclusive;

/// Default corruption: 1–3 patches per slice, 16–32 px per side.
pub fn context_corrupt(batch: &SliceBatch, seed: u64) -> SliceBatch {
    context_corrupt_with(batch, seed, 1..=3, 16..=32)
}

/// Corrupt with explicit patch-count and side-length ranges. Patch sides
/// are clamped to the slice size; placement prefers patches whose center
/// lands on brain, falling back to an arbitrary position after a few
/// rejected draws. Each slice consumes its own seed stream, so the result
/// is independent of batch composition order upstream.
pub fn context_corrupt_with(
    batch: &SliceBatch,
    seed: u64,
    patches: RangeInclusive<usize>,
    sides: RangeInclusive<usize>,
) -> SliceBatch {
    let s = batch.slice_size();
    let mut out = batch.clone();
    for i in 0..batch.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "context-corrupt", i as u64));
        let n_patches = rng.gen_range(patches.clone());
        for _ in 0..n_patches {
            let ph = rng.gen_range(sides.clone()).min(s);
            let pw = rng.gen_range(sides.clone()).min(s);
            let mut top = 0;
            let mut left = 0;
            for attempt in 0..10 {
                top = rng.gen_range(0..=s - ph);
                left = rng.gen_range(0..=s - pw);
                if attempt == 9 || batch.masks[[i, top + ph / 2, left + pw / 2, 0]] {
                    break;
                }
            }
            for r in top..top + ph {
                for c in left..left + pw {
                    out.pixels[[i, r, c, 0]] = 0.0;
                }
            }
        }
    }
    out
}

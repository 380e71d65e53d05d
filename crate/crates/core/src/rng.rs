//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter, slot)`, so a
//! vehicle's dice at a given step do not depend on iteration order or on how
//! many other vehicles exist. Particle and scenario runs therefore differ
//! only through their seed and parameters.

use serde::{Deserialize, Serialize};

/// Purpose tags keep the draws of different rules independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Slot {
    Anticipation = 1,
    SlowToStart = 2,
    RandomBrake = 3,
    LaneChange = 4,
    Arrival = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRng {
    seed: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed: mix64(seed ^ 0x9e37_79b9_7f4a_7c15) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit draw for `(stream, counter, slot)`.
    #[inline]
    pub fn bits(&self, stream: u64, counter: u64, slot: Slot) -> u64 {
        let a = mix64(self.seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let b = mix64(a ^ counter.wrapping_mul(0xd1b5_4a32_d192_ed03));
        mix64(b.wrapping_add((slot as u64).wrapping_mul(0x8cb9_2ba7_2f3d_8dd7)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&self, stream: u64, counter: u64, slot: Slot) -> f64 {
        (self.bits(stream, counter, slot) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli trial. `p <= 0` never fires, `p >= 1` always does.
    #[inline]
    pub fn chance(&self, p: f64, stream: u64, counter: u64, slot: Slot) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform(stream, counter, slot) < p
        }
    }

    /// Derive an independent generator, e.g. one per particle or per seed.
    pub fn derive(&self, tag: u64) -> Self {
        Self { seed: mix64(self.seed ^ mix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))) }
    }
}

/// Seed mixing helper for composing seeds from several indices.
pub fn combine_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3u64, |acc, &p| mix64(acc ^ mix64(p.wrapping_add(acc))))
}

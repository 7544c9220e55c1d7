//! SplitMix64 random stream.
//!
//! The generator is addressed by `(seed, position)`: the n-th output is the
//! SplitMix64 finalizer applied to `seed + n * GAMMA`, so a stream can be
//! replayed or forked from any position on any platform.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First output of a SplitMix64 stream seeded with `seed`.
pub fn splitmix64(seed: u64) -> u64 {
    mix64(seed.wrapping_add(GAMMA))
}

/// Seed for the `index`-th item of a batch derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` exactly when `lo == hi`.
    /// Always advances the stream by one step.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        let u = self.next_f64();
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * u;
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// Uniform integer in `[0, n)` by 128-bit multiply-shift. `n == 0` yields 0.
    pub fn next_below(&mut self, n: u64) -> u64 {
        let r = self.next_u64();
        ((r as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box–Muller, cosine branch; consumes two steps).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

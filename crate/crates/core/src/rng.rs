//! Seeded, portable randomness.
//!
//! Dataset assembly and network initialization must reproduce bit-identical
//! results from a recorded seed on any platform or toolchain, so the
//! generator and the shuffle are pinned here instead of borrowing whatever a
//! generic RNG crate currently does. The generator is SplitMix64 (Steele,
//! Lea & Flood's `splitmix64` finalizer) and the shuffle is a plain
//! Fisher-Yates walking indices downward.

/// SplitMix64 generator. 64-bit state, full period 2^64.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..n` by 128-bit multiply-shift. The bias is below
    /// n/2^64, irrelevant at the sizes shuffled here.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Uniform f64 in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [-bound, bound).
    pub fn next_symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * bound
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

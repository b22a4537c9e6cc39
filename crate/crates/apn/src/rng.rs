//! Deterministic, platform-independent random numbers.
//!
//! Everything random in this crate (parameter init, glyph jitter, batch
//! shuffling) flows through [`SplitMix64`], the 64-bit counter-based generator
//! of Steele, Lea & Flood. It is splittable: independent streams are derived
//! by hashing a `(seed, stream)` pair, which is what makes per-sample
//! generation order-independent and therefore reproducible regardless of
//! thread count. No platform RNG is ever consulted.

/// SplitMix64 generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream from a base seed and a stream id.
    ///
    /// The pair is mixed through one scramble round so that nearby ids
    /// (sample 0, 1, 2, ...) land in unrelated regions of the state space.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut s = SplitMix64::new(seed ^ scramble(stream));
        s.next_u64();
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        scramble(self.state)
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[-a, a)`.
    pub fn uniform_symmetric(&mut self, a: f64) -> f64 {
        a * (2.0 * self.next_f64() - 1.0)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free bound; bias is < 2^-64 * n which is
        // irrelevant at the n used here (class counts, pixel offsets).
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// True with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

fn scramble(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Counter-based deterministic RNG for parallel rollouts.
//!
//! Every rollout worker derives its own `StreamRng` from a key such as
//! `(run_seed, iteration, prompt_id, group_member)`. Streams are independent
//! of scheduling order and worker count, so concurrent rollouts reproduce
//! bit-identically.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream: the state advances by a fixed increment, so a stream is
/// fully determined by its derived key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    /// Derive a stream from key components by absorbing each part into the state.
    pub fn from_key(parts: &[u64]) -> Self {
        let mut state = GOLDEN;
        for &p in parts {
            state = mix(state ^ p).wrapping_add(GOLDEN);
        }
        StreamRng { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the small ranges used here.
        self.next_u64() % n
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Draw an index from a categorical distribution given as probabilities.
    /// Zero-probability entries are never drawn.
    pub fn sample_categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.next_f64();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        // Rounding left acc slightly below 1; fall back to the last viable index.
        last_positive
    }
}

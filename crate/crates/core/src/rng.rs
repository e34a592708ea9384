//! Deterministic randomness.
//!
//! Everything that shuffles or samples in this crate draws from [`SplitMix64`]
//! (Steele, Lea & Flood 2014) so corpora and merges rebuild identically on
//! every platform and across dependency upgrades. Seeds for independent
//! streams are derived by hashing a list of byte strings with FNV-1a and
//! finalizing through the SplitMix64 mixer.

/// The SplitMix64 generator: a 64-bit counter stepped by the golden-ratio
/// increment, output through a two-round xor-shift-multiply finalizer.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection sampling, so there is no
    /// modulo bias. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        // Largest multiple of `bound` that fits; values at or above it are rejected.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` in draw order (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Derives a stream seed from a global seed and an ordered list of keys.
///
/// Each key is length-prefixed before hashing so `["ab", "c"]` and
/// `["a", "bc"]` give different seeds.
pub fn derive_seed(global: u64, keys: &[&[u8]]) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    for key in keys {
        feed(&(key.len() as u64).to_le_bytes());
        feed(key);
    }
    feed(&global.to_le_bytes());
    mix(h)
}

/// Seed for the per-instance stream used when rendering `(dataset, id)`.
pub fn instance_seed(global: u64, dataset: &str, id: &str) -> u64 {
    derive_seed(global, &[dataset.as_bytes(), id.as_bytes()])
}

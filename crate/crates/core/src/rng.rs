//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, purpose, stream, position)`. The
//! ChaCha block function is keyed by a hash of `(seed, purpose)`, the
//! stream id selects the path (or bootstrap replicate) and the word
//! position selects the step. Any draw can be regenerated without
//! replaying the others, so results do not depend on scheduling.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent families of draws derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Increments = 1,
    Initial = 2,
    Auxiliary = 3,
    Bootstrap = 4,
    Mollifier = 5,
    Probe = 6,
}

/// Identifier recorded in a `PathBundle` so reports can echo the scheme.
pub const RNG_SCHEME: &str = "chacha8-counter/box-muller";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(seed: u64, purpose: Purpose) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut state = splitmix64(seed ^ ((purpose as u64) << 56));
    for chunk in out.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    out
}

/// A positioned stream: one ChaCha instance per `(seed, purpose, stream)`.
#[derive(Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, purpose: Purpose, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(key(seed, purpose));
        inner.set_stream(stream);
        Stream { inner }
    }

    /// Jump to the block reserved for `index`, where each index owns
    /// `words_per_index` 64-bit words.
    pub fn seek(&mut self, index: u64, words_per_index: u64) {
        self.inner
            .set_word_pos(u128::from(index) * u128::from(words_per_index) * 2);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        loop {
            let x = self.next_u64();
            let m = u128::from(x) * u128::from(n);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fills `out` with standard normals using Box-Muller, consuming
    /// exactly `2 * ceil(out.len() / 2)` words.
    pub fn normals(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for pair in &mut chunks {
            let u1 = self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            pair[0] = r * theta.cos();
            if pair.len() > 1 {
                pair[1] = r * theta.sin();
            }
        }
    }
}

/// Words consumed per step by [`Stream::normals`] for `n` normals.
pub fn normal_words(n: usize) -> u64 {
    (2 * n.div_ceil(2)) as u64
}

//! Seeded randomness with named substreams.
//!
//! Every stochastic pipeline in the crate (weight init, batch shuffling,
//! augmentation, corpus synthesis, noise perturbations) draws from an
//! [`Rng`] derived from one root `u64` seed. Independent pipelines use
//! [`Rng::substream`] with distinct ids instead of sharing one generator,
//! so adding draws to one pipeline never perturbs another. Substream
//! derivation is pure key mixing — no draws are consumed from the parent —
//! which makes the whole tree of generators a function of `(seed, path)`.
//!
//! The base generator is ChaCha8 seeded through the standard SplitMix64
//! expansion. Scalar draws are documented here because reproducibility of
//! downstream artifacts depends on them:
//!
//! * `next_u64` — one 64-bit word from the stream.
//! * `uniform(n)` — multiply-shift range reduction `(x * n) >> 64`.
//! * `unit_f64` — top 53 bits scaled by 2^-53, in `[0, 1)`.
//! * `normal` — Box–Muller; consumes two words, returns the cosine branch.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Well-known substream ids for the crate's pipelines.
///
/// Keeping them in one table documents which pipelines are independent and
/// prevents accidental id collisions between modules.
pub mod streams {
    /// Model parameter initialization.
    pub const INIT: u64 = 1;
    /// Stage-1 training loop (shuffling + augmentation).
    pub const STAGE1: u64 = 2;
    /// Stage-2 training loop (shuffling + augmentation).
    pub const STAGE2: u64 = 3;
    /// Synthetic corpus generation.
    pub const CORPUS: u64 = 4;
    /// Noise injected by evaluation-time perturbations.
    pub const EVAL_NOISE: u64 = 5;
}

/// SplitMix64 finalizer; a 64-bit bijection with good avalanche behavior.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seeded generator with cheap named substreams.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    /// Root generator for a seed.
    pub fn new(seed: u64) -> Self {
        Rng {
            key: seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child generator identified by `id`.
    ///
    /// Children of the same parent with different ids, and children of
    /// different parents, produce unrelated streams. Derivation reads no
    /// state from the parent's stream, so it can be called at any time
    /// without affecting past or future draws.
    pub fn substream(&self, id: u64) -> Rng {
        let child = mix(self.key ^ mix(id ^ 0x9e37_79b9_7f4a_7c15));
        Rng::new(child)
    }

    /// Next raw 64-bit word.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn uniform(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform: empty range");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as u64
    }

    /// Uniform index in `[0, n)`, as `usize`.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.uniform(n as u64) as usize
    }

    /// Uniform `f64` in `[0, 1)` with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform `f64` in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    /// Standard normal deviate via Box–Muller (cosine branch).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

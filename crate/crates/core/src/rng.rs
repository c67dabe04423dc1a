//! Counter-based random number keying.
//!
//! All randomness in the crate is derived from explicit keys: a draw is a
//! pure function of `(seed, stream, counter)`. Matrix entry (i, j) consumes
//! exactly one keyed 64-bit word, so generation order is irrelevant,
//! rows can be produced independently, and two matrices generated with the
//! same seed at different shapes agree on their common (i, j) prefix.
//!
//! The mixer is the SplitMix64 finalizer (xor-shift-multiply avalanche),
//! the same construction `rand` uses to expand u64 seeds. Statistical
//! quality is exercised end to end by the moment and KS tests in
//! `distributions` and `verification`.

use rand::rngs::SmallRng;
use rand::SeedableRng;

/// SplitMix64 finalizer: a bijective avalanche on 64 bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key a 64-bit word by (seed, a).
#[inline]
pub fn key2(seed: u64, a: u64) -> u64 {
    mix64(mix64(seed) ^ a.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Key a 64-bit word by (seed, a, b). Used for matrix entries as (seed, i, j).
#[inline]
pub fn key3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(key2(seed, a) ^ b.wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

/// Map a 64-bit word to a uniform in the open interval (0, 1).
///
/// Uses the top 52 bits offset by half a step, so both endpoints are
/// unreachable even after rounding and quantile transforms stay finite.
#[inline]
pub fn unit_open(u: u64) -> f64 {
    ((u >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
}

/// A cheap sequential stream of keyed words, for multi-draw sampling.
#[derive(Debug, Clone)]
pub struct KeyStream {
    state: u64,
}

impl KeyStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        KeyStream {
            state: key2(seed, stream),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    #[inline]
    pub fn next_unit_open(&mut self) -> f64 {
        unit_open(self.next_u64())
    }
}

/// Full PRNG seeded from a key, for code that wants the `rand` API.
pub fn keyed_rng(seed: u64, stream: u64) -> SmallRng {
    SmallRng::seed_from_u64(key2(seed, stream))
}

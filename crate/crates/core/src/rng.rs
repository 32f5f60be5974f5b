//! Addressable random streams.
//!
//! Every draw in the crate comes from a ChaCha8 generator positioned at
//! `(seed, stream, counter)`: the seed selects the key, the stream selects the
//! ChaCha nonce and the counter selects a disjoint block range inside that
//! stream. Any single sample can therefore be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Words reserved for each counter slot (2^40 32-bit words).
const COUNTER_SHIFT: u32 = 40;

/// Generator positioned at `(seed, stream, counter)`.
pub fn rng_at(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((counter as u128) << COUNTER_SHIFT);
    rng
}

/// Stream identifiers used by the search loop. Distinct purposes never share a
/// stream, so changing e.g. K does not perturb data shuffling.
pub mod streams {
    const TAG_SHIFT: u32 = 56;

    pub const INIT: u64 = 1 << TAG_SHIFT;
    pub const SHUFFLE: u64 = 2 << TAG_SHIFT;
    pub const DATA: u64 = 3 << TAG_SHIFT;
    pub const EVAL: u64 = 4 << TAG_SHIFT;
    pub const STUDY: u64 = 5 << TAG_SHIFT;

    /// Architecture-update samples of iteration `iter`.
    pub fn arch_step(iter: u64) -> u64 {
        (6 << TAG_SHIFT) | (iter << 1)
    }

    /// Weight-update samples of iteration `iter`.
    pub fn weight_step(iter: u64) -> u64 {
        (6 << TAG_SHIFT) | (iter << 1) | 1
    }
}

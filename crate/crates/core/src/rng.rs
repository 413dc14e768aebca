//! Counter-based random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, domain, index)`.
//! The key is derived from `(seed, domain)` and the ChaCha stream id is the
//! index, so path `i` sees the same numbers no matter which thread produces it
//! or how many paths were requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream domains. Distinct domains never share a key for the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Paths = 1,
    Copies = 2,
    Centering = 3,
    Driver = 4,
    Nested = 5,
    KdeExtra = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(parts: &[u64]) -> [u8; 32] {
    let mut state = 0x6A09_E667_F3BC_C908u64;
    for p in parts {
        state ^= *p;
        splitmix64(&mut state);
    }
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

/// Stream `index` under `(seed, domain)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key(&[seed, domain as u64]));
    rng.set_stream(index);
    rng
}

/// Stream keyed by an arbitrary tuple, used for nested sub-simulations
/// keyed by `(sub_seed, path, s_index)`.
pub fn keyed_stream(seed: u64, domain: Domain, path: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key(&[seed, domain as u64, path]));
    rng.set_stream(index);
    rng
}

pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

//! Seed derivation. Every random stream in a run is keyed off the global
//! seed plus structural coordinates (round, client), so results do not depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of words into one well-distributed seed.
pub fn derive(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &w| splitmix(acc ^ splitmix(w)))
}

pub fn round_seed(seed: u64, round: usize) -> u64 {
    derive(&[seed, 0x0052_4F55_4E44, round as u64])
}

pub fn client_seed(seed: u64, round: usize, client: usize) -> u64 {
    derive(&[seed, 0x434C_4945_4E54, round as u64, client as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

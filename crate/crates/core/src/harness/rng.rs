//! Deterministic stream derivation: every (replicate, purpose) pair gets an
//! independent generator from the master seed, so adding replicates or
//! reordering work never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    SceneGen = 0,
    Init = 1,
    Motion = 2,
    Ranging = 3,
    Links = 4,
    Filter = 5,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, replicate: u64, purpose: Purpose) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(replicate)) ^ (purpose as u64))
}

pub fn stream(master: u64, replicate: u64, purpose: Purpose) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, replicate, purpose))
}

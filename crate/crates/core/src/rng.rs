//! Hierarchical seed derivation. Every random stream in the pipeline is a
//! pure function of the root seed and a path of labels/indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

pub type Rng = ChaCha8Rng;

const fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    // FNV-1a over the label, folded through splitmix.
    let mut f: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        f ^= *b as u64;
        f = f.wrapping_mul(0x0100_0000_01b3);
    }
    h = splitmix(h ^ f);
    splitmix(h ^ bytes.len() as u64)
}

/// Child seed for a string label.
pub fn derive(seed: u64, label: &str) -> u64 {
    mix_bytes(seed, label.as_bytes())
}

/// Child seed for an integer index.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Child seed for a path `label/index`.
pub fn derive_path(seed: u64, label: &str, index: u64) -> u64 {
    derive_index(derive(seed, label), index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<F: Real>(rng: &mut Rng) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::c(z)
}

pub fn normal_vec<F: Real>(rng: &mut Rng, n: usize, std: f64) -> Vec<F> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::c(z * std)
        })
        .collect()
}

//! Seed derivation. Every random stream in the crate descends from one
//! user seed through [`derive_seed`], so runs are reproducible per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Child seed for the stream named `label` under `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(label)))
}

/// Child seed for the `index`-th draw of stream `label`.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(seed, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

pub fn rng_indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, label, index))
}

/// Normal(0, std) samples redrawn until they fall within two standard
/// deviations.
pub fn trunc_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

//! Seeded randomness.
//!
//! All randomness flows through [`Rng64`], a PCG-64 (XSL-RR 128/64)
//! generator. Independent streams are derived from a base seed and a tuple of
//! stream coordinates, so results depend only on `(seed, coordinates)` and
//! never on call order elsewhere in the program.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng64 = rand_pcg::Pcg64;

/// SplitMix64 finaliser, used to mix stream coordinates into a seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Generator for the stream identified by `coords` under `seed`.
pub fn stream(seed: u64, coords: &[u64]) -> Rng64 {
    let mut s = mix(seed);
    for &c in coords {
        s = mix(s ^ c);
    }
    Rng64::seed_from_u64(s)
}

pub fn normal_vec(rng: &mut Rng64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

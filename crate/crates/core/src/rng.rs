//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! run seed, with the ChaCha stream id derived from a `(domain, index)` pair.
//! A sample's noise therefore depends only on `(seed, domain, index)` and not
//! on the order in which samples are visited. Gaussian variates use the
//! ziggurat sampler of `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent purposes for random draws. The discriminant is mixed into the
/// stream id, so adding a domain never perturbs existing ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    CleanSignal = 1,
    TrainNoise = 2,
    EvalNoise = 3,
    ClassMeans = 4,
    Init = 5,
    Shuffle = 6,
    Test = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for draw number `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64((domain as u64) << 56 ^ splitmix64(index)));
    rng
}

/// Like [`stream`], with a second key (e.g. the bit pattern of a noise level).
pub fn stream2(seed: u64, domain: Domain, key: u64, index: u64) -> ChaCha8Rng {
    stream(seed, domain, splitmix64(key) ^ index)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

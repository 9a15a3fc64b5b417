//! Counter-based seed derivation.
//!
//! Every random draw in the crate comes from a generator seeded by
//! `derive_seed(run_seed, stream, index)`, so results do not depend on the
//! order in which samples are evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named random streams. Distinct streams never share seeds for the same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    TrainSample = 1,
    EvalReward = 2,
    EvalWinrateA = 3,
    EvalWinrateB = 4,
    PreferencePair = 5,
    HeldOut = 6,
    Schedule = 7,
    Instance = 8,
    MonteCarlo = 9,
    Init = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(run_seed: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(run_seed ^ splitmix64(stream as u64));
    splitmix64(a ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Seed for a two-level index, e.g. (epoch, sample).
pub fn derive_seed2(run_seed: u64, stream: Stream, outer: u64, inner: u64) -> u64 {
    derive_seed(derive_seed(run_seed, stream, outer), stream, inner)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

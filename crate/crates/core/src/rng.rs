//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit RNG. Parallel work derives
//! independent streams from a base seed so results do not depend on thread
//! count or scheduling.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of base seed `seed`.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two-level stream derivation, e.g. (drop index, purpose).
pub fn substream(seed: u64, a: u64, b: u64) -> SimRng {
    // splitmix64 finalizer keeps (a, b) pairs from colliding
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    stream(z, a)
}

#[inline]
pub fn gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = rng.sample(StandardNormal);
    T::lit(x)
}

/// Circularly-symmetric complex Gaussian with unit variance, CN(0, 1).
#[inline]
pub fn complex_gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Complex<T> {
    let h = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    Complex::new(gaussian::<T, R>(rng) * h, gaussian::<T, R>(rng) * h)
}

#[inline]
pub fn uniform_phase<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let u: f64 = rng.random::<f64>();
    crate::scalar::wrap_phase(T::lit(u * std::f64::consts::TAU))
}

pub fn gaussian_vec<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| gaussian(rng)).collect()
}

/// Seed for an independent purpose-specific generator derived from `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    substream(seed, tag, 0x5EED).next_u64()
}

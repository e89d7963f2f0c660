//! Seeded weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw via Box–Muller (keeps the RNG dependency minimal).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He initialization for rectified-linear layers: N(0, 2/fan_in).
pub fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    standard_normal(rng) * (2.0 / fan_in as f64).sqrt()
}

//! Counter-based Gaussian increments. Every draw is a pure function of
//! `(seed, particle_id, counter)`: the ChaCha8 key comes from the seed, the
//! stream id is the particle and the block position is the counter, so the
//! output never depends on scheduling.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter offset reserved for initial-position sampling.
pub const INIT_BASE: u64 = 1 << 60;

/// One ChaCha block holds 16 words; each counter consumes 4 words (two u64).
const WORDS_PER_COUNTER: u128 = 4;

/// Per-particle generator that can jump to any counter.
#[derive(Clone)]
pub struct ParticleRng {
    inner: ChaCha8Rng,
    /// Counter the stream is positioned at, if known.
    next: Option<u64>,
}

impl ParticleRng {
    pub fn new(seed: u64, particle_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(particle_id);
        Self { inner, next: None }
    }

    fn words(&mut self, counter: u64) -> (u64, u64) {
        // sequential counters read on without re-seeking the block buffer
        if self.next != Some(counter) {
            self.inner.set_word_pos(counter as u128 * WORDS_PER_COUNTER);
        }
        self.next = counter.checked_add(1);
        (self.inner.next_u64(), self.inner.next_u64())
    }

    /// Two uniforms in the open interval (0, 1).
    pub fn uniforms(&mut self, counter: u64) -> [f64; 2] {
        let (a, b) = self.words(counter);
        [to_open_unit(a), to_open_unit(b)]
    }

    /// Two independent standard normals (Box–Muller).
    pub fn normals(&mut self, counter: u64) -> [f64; 2] {
        let [u1, u2] = self.uniforms(counter);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        [r * theta.cos(), r * theta.sin()]
    }
}

/// Top 53 bits mapped to the midpoint lattice of (0, 1).
#[inline]
fn to_open_unit(w: u64) -> f64 {
    ((w >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal increment vector for `(seed, particle_id, step)`; unused
/// axes in 1-D are simply ignored.
pub fn rng_stream(seed: u64, particle_id: u64, step: u64) -> [f64; 2] {
    ParticleRng::new(seed, particle_id).normals(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(rng_stream(42, 7, 123), rng_stream(42, 7, 123));
        assert_ne!(rng_stream(42, 7, 123), rng_stream(42, 7, 124));
        assert_ne!(rng_stream(42, 7, 123), rng_stream(42, 8, 123));
        assert_ne!(rng_stream(42, 7, 123), rng_stream(43, 7, 123));
    }

    #[test]
    fn jumping_matches_fresh_generator() {
        let mut r = ParticleRng::new(5, 3);
        let later = r.normals(900);
        let earlier = r.normals(2);
        assert_eq!(later, rng_stream(5, 3, 900));
        assert_eq!(earlier, rng_stream(5, 3, 2));
    }

    #[test]
    fn moments_of_a_million_draws() {
        let n = 1_000_000u64;
        let mut r = ParticleRng::new(42, 0);
        let (mut s, mut s2) = (0.0, 0.0);
        for k in 0..n / 2 {
            for z in r.normals(k) {
                s += z;
                s2 += z * z;
            }
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
    }

    #[test]
    fn distinct_particles_uncorrelated() {
        let n = 200_000u64;
        let (mut a, mut b) = (ParticleRng::new(42, 1), ParticleRng::new(42, 2));
        let (mut sab, mut sa, mut sb, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            let (x, y) = (a.normals(k)[0], b.normals(k)[0]);
            sab += x * y;
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
        }
        let nf = n as f64;
        let cov = sab / nf - sa / nf * sb / nf;
        let rho = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        assert!(rho.abs() <= 4.0 / nf.sqrt(), "rho {rho}");
    }
}

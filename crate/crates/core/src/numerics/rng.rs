//! Counter-keyed random streams.
//!
//! Every stream is identified by `(seed, step, group, purpose)`. The tuple is
//! packed verbatim into the 256-bit ChaCha8 key, so distinct coordinates give
//! distinct keys and the generator's block counter does the rest. Nothing is
//! carried between calls: asking for the same coordinates twice replays the
//! same sequence, independent of the order in which groups or steps are
//! visited.
//!
//! Gaussian variates use the Box–Muller transform on pairs of 53-bit
//! uniforms `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`, emitting `r·cos(2πu2)` then
//! `r·sin(2πu2)`. This choice is part of the reproducibility contract.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Noise = 1,
    Sampling = 2,
    Init = 3,
    Data = 4,
}

/// Immutable descriptor of a random substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    pub seed: u64,
    pub step: u64,
    pub group: u64,
    pub purpose: Purpose,
}

impl RandomStream {
    pub fn new(seed: u64, step: u64, group: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            step,
            group,
            purpose,
        }
    }

    pub fn noise(seed: u64, step: u64, group: u64) -> Self {
        Self::new(seed, step, group, Purpose::Noise)
    }

    pub fn sampling(seed: u64, step: u64) -> Self {
        Self::new(seed, step, 0, Purpose::Sampling)
    }

    pub fn init(seed: u64) -> Self {
        Self::new(seed, 0, 0, Purpose::Init)
    }

    pub fn data(seed: u64) -> Self {
        Self::new(seed, 0, 0, Purpose::Data)
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> StreamRng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..24].copy_from_slice(&self.group.to_le_bytes());
        key[24] = self.purpose as u8;
        StreamRng {
            inner: ChaCha8Rng::from_seed(key),
            spare: None,
        }
    }
}

/// Sequential reader over one [`RandomStream`].
pub struct StreamRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

const TWO_POW_MINUS_53: f64 = 1.0 / (1u64 << 53) as f64;

impl StreamRng {
    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * TWO_POW_MINUS_53
    }

    /// Uniform in `(0, 1]`, safe as a logarithm argument.
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * TWO_POW_MINUS_53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Reject the tail to remove modulo bias.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }
}

/// `dim` independent `N(0, std²)` samples drawn from the start of `stream`.
pub fn gaussian_vector(stream: RandomStream, dim: usize, std: f64) -> Result<Vec<f64>> {
    if !std.is_finite() || std < 0.0 {
        return Err(param(format!(
            "gaussian std must be finite and non-negative, got {std}"
        )));
    }
    if dim == 0 {
        return Err(param("gaussian dimension must be at least 1"));
    }
    let mut rng = stream.generator();
    Ok((0..dim).map(|_| std * rng.standard_normal()).collect())
}

pub fn uniform_vector(stream: RandomStream, dim: usize) -> Vec<f64> {
    let mut rng = stream.generator();
    (0..dim).map(|_| rng.uniform()).collect()
}

/// Independent Bernoulli(`p`) inclusion flags.
pub fn bernoulli_mask(stream: RandomStream, n: usize, p: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(param(format!("probability must lie in [0, 1], got {p}")));
    }
    let mut rng = stream.generator();
    Ok((0..n).map(|_| rng.bernoulli(p)).collect())
}

//! Seeded random streams and the logistic loss.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Result};

/// Stream ids used by the library. Each consumer of randomness owns one, so
/// changing how many draws one consumer makes never perturbs another.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const MASKS: u64 = 2;
    pub const DATA: u64 = 3;
    pub const MONTE_CARLO: u64 = 4;
    pub const HELD_OUT: u64 = 5;
    pub const RANDOM_MASKS: u64 = 6;
}

/// A deterministic random stream addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream parameter gives independent
/// sequences for the same key without any shared state.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives a child stream, e.g. one per Monte Carlo shard. Children of
    /// distinct parents (or with distinct `index`) never share a stream id.
    pub fn child(&self, index: u32) -> RngStream {
        RngStream::new(self.seed, (self.stream_id << 32) | (index as u64 + 1))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn sign(&mut self) -> f64 {
        if self.rng.next_u32() & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `ln(1 + e^{-z})` without overflow. Caller guarantees `z` is finite.
#[inline]
pub fn loss(z: f64) -> f64 {
    if z < 0.0 {
        -z + z.exp().ln_1p()
    } else {
        (-z).exp().ln_1p()
    }
}

/// `-ℓ'(z) = 1 / (1 + e^z)`. Caller guarantees `z` is finite.
#[inline]
pub fn neg_deriv(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Logistic loss `ℓ(z) = ln(1 + e^{-z})`.
pub fn logistic_loss(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return domain(format!("logistic loss of non-finite value {z}"));
    }
    Ok(loss(z))
}

/// Negative derivative of the logistic loss, in (0, 1).
pub fn logistic_neg_deriv(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return domain(format!("logistic derivative of non-finite value {z}"));
    }
    Ok(neg_deriv(z))
}

pub fn sample_gaussian_vector(rng: &mut RngStream, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return domain("gaussian vector of dimension 0");
    }
    Ok((0..d).map(|_| rng.standard_normal()).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(seed, stream_id)`, so a
//! stream can be rebuilt anywhere from its coordinates. Stream ids for
//! simulation roles are derived with [`derive_stream`] from tuples such as
//! `(role, client, round, epoch)`, which keeps parallel clients independent
//! of scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, ParamTensor};

/// Roles used as the first component of derived stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    FrozenWeights = 1,
    AdapterInit = 2,
    Dataset = 3,
    Teacher = 4,
    Partition = 5,
    Validation = 6,
    Shuffle = 7,
    SplitNoise = 8,
    ModalityShift = 9,
    Test = 10,
}

pub struct RandomSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream for a role plus extra coordinates (client, round, ...).
    pub fn for_role(seed: u64, role: StreamRole, coords: &[u64]) -> Self {
        let mut parts = Vec::with_capacity(coords.len() + 1);
        parts.push(role as u64);
        parts.extend_from_slice(coords);
        Self::new(seed, derive_stream(&parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            // 53 random bits; reject the single zero outcome.
            let bits = self.rng.next_u64() >> 11;
            if bits != 0 {
                return bits as f64 * (1.0 / (1u64 << 53) as f64);
            }
        }
    }

    /// Uniform on [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.standard_normal()
    }

    /// Natural log of a Gamma(shape, 1) draw.
    ///
    /// Marsaglia–Tsang squeeze for shape >= 1; shapes below one use the
    /// `G(a) = G(a + 1) · U^(1/a)` boost. Working in log space keeps tiny
    /// shapes (where `U^(1/a)` underflows) usable for Dirichlet draws.
    pub fn ln_gamma_draw(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let u = self.uniform_open();
            return self.ln_gamma_draw(shape + 1.0) + u.ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d.ln() + v.ln();
            }
        }
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        self.ln_gamma_draw(shape).exp()
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Unbiased integer in `[0, bound)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.rng.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}

/// Mixes a tuple of coordinates into one 64-bit stream id (splitmix64 chain).
pub fn derive_stream(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tensor of i.i.d. `N(mean, sigma²)` entries.
pub fn sample_gaussian(
    rs: &mut RandomSource,
    name: impl Into<String>,
    dims: Vec<usize>,
    mean: f64,
    sigma: f64,
) -> Result<ParamTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let numel = checked_numel(&dims).ok_or_else(|| Error::Shape(format!("invalid dims {dims:?}")))?;
    let data = if sigma == 0.0 {
        vec![mean; numel]
    } else {
        (0..numel).map(|_| rs.normal(mean, sigma)).collect()
    };
    ParamTensor::new(name, dims, data)
}

/// One draw from the symmetric Dirichlet(alpha) on `k` categories.
pub fn sample_dirichlet(rs: &mut RandomSource, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("dirichlet needs k >= 1".into()));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let logs: Vec<f64> = (0..k).map(|_| rs.ln_gamma_draw(alpha)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Purpose-labelled, counter-based random streams.
//!
//! Each stream is a ChaCha20 keystream keyed by the 64-bit seed, with the
//! purpose selecting the ChaCha stream id. Draws for one purpose therefore
//! never shift when another purpose consumes more or fewer values.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    DataGen,
    Init,
    CorruptionNoise,
    Shuffle,
    PositionDraw,
    Bootstrap,
}

impl Purpose {
    fn stream_id(self) -> u64 {
        match self {
            Purpose::DataGen => 1,
            Purpose::Init => 2,
            Purpose::CorruptionNoise => 3,
            Purpose::Shuffle => 4,
            Purpose::PositionDraw => 5,
            Purpose::Bootstrap => 6,
        }
    }
}

/// Distribution accepted by [`RngStream::draw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl Distribution {
    /// Parses `uniform` (on `[0, 1)`) or `gaussian` (standard normal).
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "uniform" => Ok(Distribution::Uniform { low: 0.0, high: 1.0 }),
            "gaussian" | "normal" => Ok(Distribution::Gaussian { mean: 0.0, std: 1.0 }),
            other => Err(Error::invalid("distribution", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    purpose: Purpose,
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(purpose: Purpose, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(purpose.stream_id());
        RngStream { purpose, seed, rng }
    }

    /// Independent child stream, e.g. one per sample.
    pub fn derive(purpose: Purpose, seed: u64, index: u64) -> Self {
        Self::new(purpose, splitmix64(splitmix64(seed) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit keystream words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> Option<&'a T> {
        if items.is_empty() {
            None
        } else {
            Some(&items[self.below(items.len())])
        }
    }

    pub fn draw<F: Scalar>(&mut self, shape: &[usize], dist: Distribution) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match dist {
            Distribution::Gaussian { mean, std } => {
                if !(std >= 0.0) {
                    return Err(Error::invalid("gaussian std", format!("{std} (must be >= 0)")));
                }
                (0..n).map(|_| F::lit(mean + std * self.standard_normal())).collect()
            }
            Distribution::Uniform { low, high } => {
                if !(high >= low) {
                    return Err(Error::invalid("uniform bounds", format!("[{low}, {high})")));
                }
                (0..n).map(|_| F::lit(low + (high - low) * self.uniform())).collect()
            }
        };
        Tensor::new(shape.to_vec(), data)
    }

    pub fn gaussian<F: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<F>> {
        self.draw(shape, Distribution::Gaussian { mean, std })
    }
}

/// SplitMix64 finalizer; also used to derive stable ids.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

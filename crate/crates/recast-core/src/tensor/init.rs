//! Seeded parameter initialization.
//!
//! One master seed per run, split deterministically per layer by label, so
//! runs reproduce bit-exactly and adding a layer does not reshuffle the
//! draws of unrelated layers.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, TensorError};

/// Deterministic per-label generator factory.
#[derive(Debug, Clone)]
pub struct RngPool {
    master_seed: u64,
}

impl RngPool {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn seed(&self) -> u64 {
        self.master_seed
    }

    /// Child generator for a named stream.
    pub fn derive(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.master_seed ^ fnv1a(label))
    }
}

/// FNV-1a, fixed here so stream splitting never depends on std hasher
/// internals.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform draw in [lo, hi) from 24 explicit mantissa bits; identical bits
/// on every platform.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T {
    let u = (rng.next_u32() >> 8) as f64 / (1u32 << 24) as f64;
    T::from_f64(lo + (hi - lo) * u)
}

/// Xavier/Glorot uniform fill: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
///
/// Conv filters `[Cout, Cin, kH, kW]` use receptive-field fans
/// (`fan_in = Cin*kH*kW`, `fan_out = Cout*kH*kW`); matrices `[K, D]` use
/// `fan_in = D`, `fan_out = K`.
pub fn xavier_init<T: Scalar>(
    weight: &mut Tensor<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(), TensorError> {
    let shape = weight.shape().to_vec();
    if shape.len() < 2 {
        return Err(TensorError::InitRank { shape });
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in weight.data_mut() {
        *v = uniform(rng, -a, a);
    }
    Ok(())
}

/// Allocate and Xavier-fill a tensor.
pub fn xavier_uniform<T: Scalar>(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, TensorError> {
    let mut t = Tensor::zeros(shape);
    xavier_init(&mut t, rng)?;
    Ok(t)
}

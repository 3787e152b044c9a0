//! Deterministic parameter initialization. All draws go through ChaCha8
//! seeded from the run config; sampling happens in f64 and is cast down, so
//! a given seed produces the same parameter sequence for every element type.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reenact_tensor::element::{elem, Element};

pub fn rng_for(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || elem(normal_f64(rng) * std))
}

/// Fan-in scaled normal init for conv kernels [co, ci, kh, kw].
pub fn kaiming_conv<T: Element>(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> ArrayD<T> {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    normal(rng, &[co, ci, k, k], std)
}

/// Fan-in scaled normal init for linear weights [fin, fout].
pub fn kaiming_fc<T: Element>(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> ArrayD<T> {
    let std = (2.0 / fin as f64).sqrt();
    normal(rng, &[fin, fout], std)
}

pub fn zeros<T: Element>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full<T: Element>(shape: &[usize], value: f64) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), elem(value))
}

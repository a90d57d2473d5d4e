//! Independent oracles shared by the integration tests. Nothing here calls
//! the code under test to compute an expected value.
#![allow(dead_code)]

use capmac::dataset::{sample_batch, CapacitiveSample};
use capmac::device::SensorParams;
use capmac::netlab::{Autoencoder, CnnClassifier, FcClassifier, Trainable, WeightBank};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Charge-sharing output written as a plain dot product.
pub fn mac_oracle(c: &[f64], v: &[f64], c0: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..c.len() {
        acc += c[i] * v[i];
    }
    acc / (c.len() as f64 * c0)
}

/// Two capacitors in series, written as reciprocal sum.
pub fn series_oracle(c_i: f64, c0: f64) -> f64 {
    1.0 / (1.0 / c_i + 1.0 / c0)
}

/// Relative difference with the larger magnitude as the scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst elementwise relative error between the analytic gradient and a
/// five-point central difference of the loss with absolute step `h`.
/// The fourth-order stencil lets `h` stay large enough that rounding in
/// the loss, which is of order 1e4 for the autoencoder, does not swamp
/// small gradient entries.
pub fn gradient_error<M: Trainable>(
    model: &M,
    sample: &CapacitiveSample,
    sensor: &SensorParams,
    h: f64,
) -> f64 {
    let (_, analytic) = model.loss_and_grad(sample, sensor).unwrap();
    let base = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        let mut at = |offset: f64| {
            p[i] = base[i] + offset;
            probe.set_params(&p).unwrap();
            probe.loss(sample, sensor).unwrap()
        };
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        worst = worst.max(rel_err(numeric, analytic[i]));
    }
    worst
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Array weights stay clear of the +-1 limit so that +-h probes remain
/// programmable.
pub const INTERIOR: f64 = 0.9;

pub fn random_fc(rng: &mut ChaCha8Rng) -> FcClassifier {
    FcClassifier::new(WeightBank::new(uniform(4, 9, INTERIOR, rng)), false).unwrap()
}

pub fn random_autoencoder(rng: &mut ChaCha8Rng, sensor: &SensorParams) -> Autoencoder {
    let enc = WeightBank::new(uniform(4, 9, INTERIOR, rng));
    Autoencoder::new(enc, uniform(9, 4, 2.0, rng), sensor).unwrap()
}

pub fn random_cnn(rng: &mut ChaCha8Rng) -> CnnClassifier {
    let kernel = WeightBank::new(uniform(1, 9, INTERIOR, rng));
    CnnClassifier::new(kernel, uniform(4, 9, 2.0, rng)).unwrap()
}

pub fn noisy(resolution: usize, sensor: &SensorParams, rng: &mut ChaCha8Rng) -> CapacitiveSample {
    sample_batch(1, resolution, sensor, rng).unwrap().remove(0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

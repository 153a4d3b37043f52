//! Deterministic fixtures shared by the benchmarks.

use gatekit::{Conv, MaxPool, Network, Shape, Stage};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn input(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..=1.0))
}

/// Dense net with the given widths (input first) and uniform weights.
pub fn dense(widths: &[usize], classes: usize, seed: u64) -> Network {
    Network::random_dense(widths, classes, 1.0, &mut rng(seed)).expect("valid widths")
}

/// conv(3x3) -> gate -> maxpool(2) -> conv(3x3) -> gate -> heads, on a 3-channel image.
pub fn small_cnn(side: usize, channels: usize, classes: usize, seed: u64) -> Network {
    let mut r = rng(seed);
    let mut kernel =
        |o: usize, i: usize| Array4::from_shape_fn((o, i, 3, 3), |_| r.random_range(-0.3..=0.3));
    let k1 = kernel(channels, 3);
    let k2 = kernel(channels, channels);
    let stages = vec![
        Stage::Conv(Conv::new(k1, Array1::zeros(channels), 1, 1)),
        Stage::Gate { layer: 1 },
        Stage::MaxPool(MaxPool {
            kernel: 2,
            stride: 2,
            padding: 0,
        }),
        Stage::Conv(Conv::new(k2, Array1::zeros(channels), 1, 1)),
        Stage::Gate { layer: 2 },
    ];
    let features = channels * (side / 2) * (side / 2);
    let heads = Array2::from_shape_fn((classes, features), |_| r.random_range(-0.1..=0.1));
    Network::new(stages, heads, Shape::new(3, side, side)).expect("consistent shapes")
}

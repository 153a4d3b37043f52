#![allow(dead_code)]

use gatekit::{Conv, MaxPool, Network, Shape, Stage};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..=1.0))
}

/// Dense net with every width drawn from `1..=max` per layer.
pub fn random_dense(rng: &mut impl Rng, max_widths: &[usize], classes: usize) -> Network {
    let widths: Vec<usize> = max_widths
        .iter()
        .map(|m| rng.random_range(1..=*m))
        .collect();
    Network::random_dense(&widths, classes, 1.0, rng).unwrap()
}

/// conv(3x3, pad 1) -> gate -> maxpool(2) -> conv(3x3) -> gate -> heads.
pub fn random_conv(rng: &mut impl Rng, input: Shape, mid: usize, classes: usize) -> Network {
    let k1 = Array4::from_shape_fn((mid, input.channels, 3, 3), |_| {
        rng.random_range(-1.0..=1.0)
    });
    let b1 = Array1::from_shape_fn(mid, |_| rng.random_range(-0.5..=0.5));
    let k2 = Array4::from_shape_fn((2, mid, 3, 3), |_| rng.random_range(-1.0..=1.0));
    let b2 = Array1::from_shape_fn(2, |_| rng.random_range(-0.5..=0.5));
    let mut stages = vec![
        Stage::Conv(Conv::new(k1, b1, 1, 1)),
        Stage::Gate { layer: 1 },
        Stage::MaxPool(MaxPool {
            kernel: 2,
            stride: 2,
            padding: 0,
        }),
        Stage::Conv(Conv::new(k2, b2, 1, 1)),
        Stage::Gate { layer: 2 },
    ];
    let probe = Network {
        stages: stages.clone(),
        heads: Array2::zeros((1, 1)),
        input_shape: input,
        normalization: None,
    };
    let out = probe.shapes().unwrap().last().unwrap().numel();
    let heads = Array2::from_shape_fn((classes, out), |_| rng.random_range(-1.0..=1.0));
    Network::new(std::mem::take(&mut stages), heads, input).unwrap()
}

/// `|a - b| / max(|a|, |b|, 1)`, computed independently of the library.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel(*x, *y))
        .fold(0.0, f64::max)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

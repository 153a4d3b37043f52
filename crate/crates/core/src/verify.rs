//! Randomized cross-checks between the fast backward pass and the path oracle.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gating::GatingSpec;
use crate::network::Network;
use crate::pathspace::{
    enumerate_paths, feature_kernel, path_feature_value, path_kernel, path_pullback, PathTable,
    TensorField,
};
use crate::pullback::{finite_diff_gradient, pullback_head};

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_deviation(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest coordinatewise [`relative_deviation`].
pub fn max_relative_deviation(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| relative_deviation(*x, *y))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub nets: usize,
    pub inputs_per_net: usize,
    pub seed: u64,
    /// Upper bounds on `(d_0, d_1, .., d_L)`; depth is drawn from `1..=L`.
    pub max_widths: Vec<usize>,
    pub max_classes: usize,
    pub temperature: f64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub fd_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            nets: 100,
            inputs_per_net: 10,
            seed: 314,
            max_widths: vec![4, 5, 4],
            max_classes: 3,
            temperature: 0.3,
            tolerance: 1e-9,
            fd_step: 1e-6,
            fd_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub checks: usize,
    /// Draws excluded by a precondition (finite differences near a kink).
    pub skipped: usize,
}

impl IdentityCheck {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation: 0.0,
            tolerance,
            checks: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, dev: f64) {
        self.checks += 1;
        // NaN must fail, so it is not absorbed by max
        if dev.is_nan() || dev > self.max_deviation {
            self.max_deviation = if dev.is_nan() { f64::INFINITY } else { dev };
        }
    }

    pub fn passed(&self) -> bool {
        self.checks > 0 && self.max_deviation <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub nets: usize,
    pub inputs: usize,
    pub identities: Vec<IdentityCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.identities.iter().all(IdentityCheck::passed)
    }
}

/// Dense net with uniform `[-1, 1]` weights, biases and heads; depth and every
/// width drawn below the bounds.
pub fn random_oracle_net<R: Rng + ?Sized>(
    rng: &mut R,
    max_widths: &[usize],
    max_classes: usize,
) -> Result<Network> {
    let depth = rng.random_range(1..max_widths.len());
    let widths: Vec<usize> = max_widths[..=depth]
        .iter()
        .map(|m| rng.random_range(1..=*m))
        .collect();
    let classes = rng.random_range(1..=max_classes);
    Network::random_dense(&widths, classes, 1.0, rng)
}

pub fn random_input<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..=1.0))
}

/// Runs every identity over `cfg.nets` random nets.
pub fn run_oracle_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hard = GatingSpec::hard();
    let soft = GatingSpec::sigmoid(cfg.temperature);
    let mut logit = IdentityCheck::new("forward logit = <phi_G(x), omega>", cfg.tolerance);
    let mut hard_pb = IdentityCheck::new("pullback(hard) = path pullback(G~)", cfg.tolerance);
    let mut soft_pb =
        IdentityCheck::new("pullback(sigmoid) = path pullback(Gamma~)", cfg.tolerance);
    let mut kernel = IdentityCheck::new("product kernel = <phi(x), phi(x')>", cfg.tolerance);
    let mut repr = IdentityCheck::new("<v, x~> = f_Lambda(x)", cfg.tolerance);
    let mut grad = IdentityCheck::new("pullback(hard) = finite differences", cfg.fd_tolerance);
    let mut inputs = 0;

    for _ in 0..cfg.nets {
        let net = random_oracle_net(&mut rng, &cfg.max_widths, cfg.max_classes)?;
        let layout = enumerate_paths(&net)?;
        let tables = (0..net.num_classes())
            .map(|c| PathTable::build(&net, c))
            .collect::<Result<Vec<_>>>()?;
        let d0 = net.input_shape.numel();
        for _ in 0..cfg.inputs_per_net {
            inputs += 1;
            let x = random_input(&mut rng, d0);
            let x2 = random_input(&mut rng, d0);
            let trace = net.forward(x.view())?;
            let tau_g = TensorField::for_input(&net, x.view(), &hard)?;
            let tau_s = TensorField::for_input(&net, x.view(), &soft)?;
            for (c, table) in tables.iter().enumerate() {
                logit.record(relative_deviation(
                    trace.logits[c],
                    path_feature_value(table, x.view(), &tau_g)?,
                ));
                for (spec, tau, check) in
                    [(&hard, &tau_g, &mut hard_pb), (&soft, &tau_s, &mut soft_pb)]
                {
                    let fast = pullback_head(&net, &trace, spec, c)?;
                    let slow = path_pullback(&net, c, tau)?;
                    check.record(max_relative_deviation(
                        fast.augmented().view(),
                        slow.augmented().view(),
                    ));
                    let induced = net.forward_induced(
                        x.view(),
                        &crate::pullback::gate_values(&net, &trace, spec)?,
                    )?;
                    repr.record(relative_deviation(
                        fast.evaluate(x.view()),
                        induced.logits[c],
                    ));
                }
                let fd = finite_diff_gradient(&net, x.view(), c, cfg.fd_step)?;
                if fd.is_generic() {
                    let v = pullback_head(&net, &trace, &hard, c)?.vector;
                    let dev = (&v - &fd.gradient)
                        .iter()
                        .fold(0.0f64, |m, d| m.max(d.abs()));
                    grad.record(dev);
                } else {
                    grad.skipped += 1;
                }
            }
            for (spec, tau) in [(&hard, &tau_g), (&soft, &tau_s)] {
                let tau2 = TensorField::for_input(&net, x2.view(), spec)?;
                kernel.record(relative_deviation(
                    path_kernel(&net, x.view(), x2.view(), spec)?,
                    feature_kernel(&layout, x.view(), tau, x2.view(), &tau2)?,
                ));
            }
        }
    }
    Ok(VerifyReport {
        nets: cfg.nets,
        inputs,
        identities: vec![logit, hard_pb, soft_pb, kernel, repr, grad],
    })
}

//! Projected gradient ascent along pullback directions.
//!
//! Ascent runs in raw pixel space (`[-1, 1]` by default). The model sees the
//! normalized input, so pullbacks are mapped back through the normalization
//! before they are used as directions. Each step moves a fixed L2 distance,
//! projects onto the L2 ball around the starting point, then clamps to the
//! value range.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GatingSpec;
use crate::network::Network;
use crate::pullback::pullback_head;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub steps: usize,
    /// L2 length of every step before projection.
    pub step_norm: f64,
    /// Radius of the L2 ball around the starting point.
    pub radius: f64,
    pub value_range: (f64, f64),
    pub target_class: usize,
    pub gating: GatingSpec,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_norm: 20.0,
            radius: 100.0,
            value_range: (-1.0, 1.0),
            target_class: 0,
            gating: GatingSpec::default(),
        }
    }
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("ascent needs at least one step".into()));
        }
        if !(self.step_norm > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config(format!(
                "step norm and radius must be positive (got {} and {})",
                self.step_norm, self.radius
            )));
        }
        if !(self.value_range.0 < self.value_range.1) {
            return Err(Error::Config(format!(
                "empty value range {:?}",
                self.value_range
            )));
        }
        Ok(())
    }
}

/// Result of one ascent step with the intermediate lengths it went through.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Array1<f64>,
    /// `||x' - x_t||` before projection and clamping; equals the step norm
    /// up to rounding whenever the direction is nonzero.
    pub step_length: f64,
    /// `||x' - x_0||` after projection, before clamping.
    pub projected_distance: f64,
    pub projected: bool,
    pub zero_direction: bool,
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Pullback of the target head at `x` (raw pixel space), mapped back through
/// the model's input normalization.
pub fn pixel_direction(
    net: &Network,
    x: ArrayView1<f64>,
    cfg: &AscentConfig,
) -> Result<(Array1<f64>, f64)> {
    let (input, scale) = match &net.normalization {
        Some(n) => (n.apply(x, net.input_shape), Some(n.scale(net.input_shape))),
        None => (x.to_owned(), None),
    };
    let trace = net.forward(input.view())?;
    let logit = *trace.logits.get(cfg.target_class).ok_or(Error::Index {
        what: "class",
        index: cfg.target_class,
        bound: net.num_classes(),
    })?;
    let pb = pullback_head(net, &trace, &cfg.gating, cfg.target_class)?;
    let dir = match scale {
        Some(s) => pb.vector * &s,
        None => pb.vector,
    };
    Ok((dir, logit))
}

fn target_logit(net: &Network, x: ArrayView1<f64>, class: usize) -> Result<f64> {
    let logits = match &net.normalization {
        Some(n) => net.forward(n.apply(x, net.input_shape).view())?.logits,
        None => net.forward(x)?.logits,
    };
    logits.get(class).copied().ok_or(Error::Index {
        what: "class",
        index: class,
        bound: net.num_classes(),
    })
}

/// One step: move `step_norm` along the pullback, project onto the ball of
/// `radius` around `x0`, clamp to the value range.
pub fn pga_step(
    net: &Network,
    x: ArrayView1<f64>,
    x0: ArrayView1<f64>,
    cfg: &AscentConfig,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if x.len() != x0.len() {
        return Err(Error::Shape {
            what: "ascent iterate".into(),
            expected: x0.len(),
            found: x.len(),
        });
    }
    let (dir, _) = pixel_direction(net, x, cfg)?;
    let len = norm(dir.view());
    if len == 0.0 || !len.is_finite() {
        return Ok(StepOutcome {
            next: x.to_owned(),
            step_length: 0.0,
            projected_distance: norm((&x - &x0).view()),
            projected: false,
            zero_direction: true,
        });
    }
    let cand = &x + &(dir * (cfg.step_norm / len));
    let step_length = norm((&cand - &x).view());
    let delta = &cand - &x0;
    let dist = norm(delta.view());
    let (mut next, projected) = if dist > cfg.radius {
        (&x0 + &(delta * (cfg.radius / dist)), true)
    } else {
        (cand, false)
    };
    let projected_distance = norm((&next - &x0).view());
    let (lo, hi) = cfg.value_range;
    next.mapv_inplace(|v| v.clamp(lo, hi));
    Ok(StepOutcome {
        next,
        step_length,
        projected_distance,
        projected,
        zero_direction: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentTrajectory {
    /// `x_0, x_1, .., x_T`.
    pub inputs: Vec<Array1<f64>>,
    /// Target logit at every entry of `inputs`.
    pub target_logits: Vec<f64>,
    pub steps: Vec<StepOutcome>,
    /// `x_T - x_0`.
    pub difference: Array1<f64>,
}

impl AscentTrajectory {
    pub fn last(&self) -> &Array1<f64> {
        self.inputs.last().unwrap()
    }

    /// Difference image after `k` steps (clamped to the run length).
    pub fn difference_at(&self, k: usize) -> Array1<f64> {
        let k = k.min(self.inputs.len() - 1);
        &self.inputs[k] - &self.inputs[0]
    }
}

pub fn pga_run(net: &Network, x0: ArrayView1<f64>, cfg: &AscentConfig) -> Result<AscentTrajectory> {
    cfg.validate()?;
    let (lo, hi) = cfg.value_range;
    if let Some(v) = x0.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Domain {
            what: "starting image outside the value range".into(),
            value: *v,
        });
    }
    let mut inputs = vec![x0.to_owned()];
    let mut target_logits = vec![target_logit(net, x0, cfg.target_class)?];
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let out = pga_step(net, inputs.last().unwrap().view(), x0, cfg)?;
        target_logits.push(target_logit(net, out.next.view(), cfg.target_class)?);
        inputs.push(out.next.clone());
        steps.push(out);
    }
    let difference = inputs.last().unwrap() - &x0;
    Ok(AscentTrajectory {
        inputs,
        target_logits,
        steps,
        difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Normalization, Shape};
    use ndarray::{arr1, arr2, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dead_network_does_not_move() {
        let net =
            Network::dense(vec![(arr2(&[[1.0, 1.0]]), arr1(&[-10.0]))], arr2(&[[1.0]])).unwrap();
        let cfg = AscentConfig {
            gating: GatingSpec::hard(),
            ..Default::default()
        };
        let x = arr1(&[0.1, 0.2]);
        let out = pga_step(&net, x.view(), x.view(), &cfg).unwrap();
        assert!(out.zero_direction);
        assert_eq!(out.next, x);
    }

    #[test]
    fn first_step_has_step_norm_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::random_dense(&[600, 8, 3], 3, 0.2, &mut rng).unwrap();
        let x0 = Array1::zeros(600);
        let cfg = AscentConfig {
            target_class: 1,
            value_range: (-1e9, 1e9),
            ..Default::default()
        };
        let out = pga_step(&net, x0.view(), x0.view(), &cfg).unwrap();
        assert!(!out.zero_direction);
        assert!((out.step_length - 20.0).abs() < 1e-9);
        assert!((norm((&out.next - &x0).view()) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn steps_must_be_positive() {
        let net = Network::dense(vec![(arr2(&[[1.0]]), arr1(&[0.0]))], arr2(&[[1.0]])).unwrap();
        let cfg = AscentConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(pga_run(&net, arr1(&[0.5]).view(), &cfg).is_err());
        let cfg = AscentConfig {
            steps: 1,
            ..Default::default()
        };
        let t = pga_run(&net, arr1(&[0.5]).view(), &cfg).unwrap();
        assert_eq!(t.inputs.len(), 2);
        assert_eq!(t.target_logits.len(), 2);
    }

    #[test]
    fn normalization_scales_direction() {
        let w = arr2(&[[1.0, 1.0]]);
        let net = Network::dense(vec![(w, arr1(&[1.0]))], arr2(&[[1.0]]))
            .unwrap()
            .with_normalization(Normalization {
                mean: vec![0.0, 0.0],
                std: vec![0.5, 2.0],
            })
            .unwrap();
        assert_eq!(net.input_shape, Shape::flat(2));
        let cfg = AscentConfig {
            gating: GatingSpec::hard(),
            ..Default::default()
        };
        let (d, _) = pixel_direction(&net, arr1(&[0.1, 0.1]).view(), &cfg).unwrap();
        assert_eq!(d, arr1(&[2.0, 0.5]));
    }

    #[test]
    fn projection_keeps_ball() {
        let net = Network::dense(
            vec![(Array2::eye(3), Array1::ones(3))],
            arr2(&[[1.0, 2.0, 3.0]]),
        )
        .unwrap();
        let cfg = AscentConfig {
            radius: 0.5,
            step_norm: 0.3,
            value_range: (-10.0, 10.0),
            gating: GatingSpec::hard(),
            ..Default::default()
        };
        let x0 = arr1(&[0.0, 0.0, 0.0]);
        let t = pga_run(&net, x0.view(), &cfg).unwrap();
        for x in &t.inputs {
            assert!(norm((x - &x0).view()) <= 0.5 + 1e-9);
        }
        assert!(t.steps.iter().any(|s| s.projected));
    }
}

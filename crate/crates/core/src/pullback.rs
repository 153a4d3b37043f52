//! Gating-induced pullbacks computed by a modified backward pass.
//!
//! The forward pass is always hard gated. On the way back, every gate point
//! multiplies the incoming covector by gate values derived from the recorded
//! pre-activations (hard, or sigmoid excitation), and every max-pool routes it
//! either to the recorded argmax or by softmax weights over the window. Gate
//! values are constants of the backward pass; their derivative never appears.

use ndarray::{Array1, ArrayView1};

use crate::conv;
use crate::error::{Error, Result};
use crate::gating::{pool_softmax_weights, GatingSpec, PoolGate};
use crate::network::{ForwardTrace, Network, Stage};

/// What a pullback was pulled back from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PullbackTarget {
    Head(usize),
    /// An arbitrary covector on the network output.
    Covector,
    /// Pre-activation of unit `unit` at gate layer `layer` (1-based).
    Neuron {
        layer: usize,
        unit: usize,
    },
}

/// Input-space vector plus the bias offset carried by the augmented coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackVector {
    pub vector: Array1<f64>,
    pub offset: f64,
    pub target: PullbackTarget,
    /// `None` for pullbacks of an arbitrary path tensor.
    pub gating: Option<GatingSpec>,
}

impl PullbackVector {
    /// `<v, x> + offset`, i.e. `<v~, x~>` for the augmented input.
    pub fn evaluate(&self, x: ArrayView1<f64>) -> f64 {
        self.vector.dot(&x) + self.offset
    }

    /// `[v; offset]`.
    pub fn augmented(&self) -> Array1<f64> {
        let mut a = Array1::zeros(self.vector.len() + 1);
        a.slice_mut(ndarray::s![..self.vector.len()])
            .assign(&self.vector);
        a[self.vector.len()] = self.offset;
        a
    }

    pub fn class_index(&self) -> Option<usize> {
        match self.target {
            PullbackTarget::Head(c) => Some(c),
            _ => None,
        }
    }
}

fn check_trace(net: &Network, trace: &ForwardTrace) -> Result<()> {
    let widths = net.gate_widths()?;
    if trace.preactivations.len() != widths.len() {
        return Err(Error::TraceMismatch(format!(
            "{} recorded gate layers, network has {}",
            trace.preactivations.len(),
            widths.len()
        )));
    }
    for (l, (z, w)) in trace.preactivations.iter().zip(&widths).enumerate() {
        if z.len() != *w {
            return Err(Error::TraceMismatch(format!(
                "layer {} recorded width {}, network width {w}",
                l + 1,
                z.len()
            )));
        }
    }
    let pools = net
        .stages
        .iter()
        .filter(|s| matches!(s, Stage::MaxPool(_)))
        .count();
    if trace.pools.len() != pools {
        return Err(Error::TraceMismatch(format!(
            "{} recorded pools, network has {pools}",
            trace.pools.len()
        )));
    }
    if trace.input.len() != net.input_shape.numel() {
        return Err(Error::TraceMismatch("input length differs".into()));
    }
    Ok(())
}

/// Gate values `lambda_1..lambda_L` that `spec` assigns to a recorded trace.
pub fn gate_values(
    net: &Network,
    trace: &ForwardTrace,
    spec: &GatingSpec,
) -> Result<Vec<Array1<f64>>> {
    check_trace(net, trace)?;
    spec.validate(&net.gate_widths()?)?;
    trace
        .preactivations
        .iter()
        .enumerate()
        .map(|(l, z)| spec.gate_values(l, z.view()))
        .collect()
}

/// Pulls `grad` (a covector on the input of stage `end`) back through stages `0..end`.
fn backward(
    net: &Network,
    trace: &ForwardTrace,
    spec: &GatingSpec,
    gates: &[Array1<f64>],
    end: usize,
    mut grad: Array1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let shapes = net.shapes()?;
    let mut offset = 0.0;
    let mut gate_idx = net.stages[..end]
        .iter()
        .filter(|s| matches!(s, Stage::Gate { .. }))
        .count();
    let mut pool_idx = net.stages[..end]
        .iter()
        .filter(|s| matches!(s, Stage::MaxPool(_)))
        .count();
    for k in (0..end).rev() {
        grad = match &net.stages[k] {
            Stage::Gate { .. } => {
                gate_idx -= 1;
                grad * &gates[gate_idx]
            }
            Stage::Affine(a) => {
                offset += grad.dot(&a.bias);
                a.weight.t().dot(&grad)
            }
            Stage::Conv(c) => {
                let (g, b) =
                    conv::conv_backward(c, grad.as_slice().unwrap(), shapes[k], shapes[k + 1]);
                offset += b;
                g
            }
            Stage::MaxPool(p) => {
                pool_idx -= 1;
                let rec = &trace.pools[pool_idx];
                let mut g = Array1::<f64>::zeros(rec.input_shape.numel());
                match spec.pool {
                    PoolGate::Hard => {
                        for (o, &src) in rec.argmax.iter().enumerate() {
                            g[src] += grad[o];
                        }
                    }
                    PoolGate::Softmax { temperature } => {
                        let out = rec.output_shape;
                        for c in 0..out.channels {
                            for oy in 0..out.height {
                                for ox in 0..out.width {
                                    let o = out.index(c, oy, ox);
                                    let window = conv::pool_window(p, rec.input_shape, c, oy, ox);
                                    let patch: Vec<f64> =
                                        window.iter().map(|&i| rec.input[i]).collect();
                                    let w = pool_softmax_weights(&patch, temperature)?;
                                    for (&i, wi) in window.iter().zip(w) {
                                        g[i] += grad[o] * wi;
                                    }
                                }
                            }
                        }
                    }
                }
                g
            }
        };
    }
    Ok((grad, offset))
}

/// Pullback of an arbitrary output covector `head` under `spec`.
pub fn pullback_covector(
    net: &Network,
    trace: &ForwardTrace,
    spec: &GatingSpec,
    head: ArrayView1<f64>,
) -> Result<PullbackVector> {
    let gates = gate_values(net, trace, spec)?;
    if head.len() != net.heads.ncols() {
        return Err(Error::Shape {
            what: "head covector".into(),
            expected: net.heads.ncols(),
            found: head.len(),
        });
    }
    let (vector, offset) = backward(net, trace, spec, &gates, net.stages.len(), head.to_owned())?;
    Ok(PullbackVector {
        vector,
        offset,
        target: PullbackTarget::Covector,
        gating: Some(spec.clone()),
    })
}

/// Pullback `v_Λ` of head `class` through the gate-substituted network.
pub fn pullback_head(
    net: &Network,
    trace: &ForwardTrace,
    spec: &GatingSpec,
    class: usize,
) -> Result<PullbackVector> {
    if class >= net.num_classes() {
        return Err(Error::Index {
            what: "class",
            index: class,
            bound: net.num_classes(),
        });
    }
    let mut pb = pullback_covector(net, trace, spec, net.heads.row(class))?;
    pb.target = PullbackTarget::Head(class);
    Ok(pb)
}

/// Pullback of the pre-activation `z_layer[unit]` through the sub-network below
/// it; the gate at `(layer, unit)` itself is not applied.
pub fn pullback_neuron(
    net: &Network,
    trace: &ForwardTrace,
    spec: &GatingSpec,
    layer: usize,
    unit: usize,
) -> Result<PullbackVector> {
    let gate_stages = net.gate_stages();
    if layer == 0 || layer > gate_stages.len() {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            bound: gate_stages.len() + 1,
        });
    }
    let gates = gate_values(net, trace, spec)?;
    let width = gates[layer - 1].len();
    if unit >= width {
        return Err(Error::Index {
            what: "unit",
            index: unit,
            bound: width,
        });
    }
    let mut seed = Array1::zeros(width);
    seed[unit] = 1.0;
    let (vector, offset) = backward(net, trace, spec, &gates, gate_stages[layer - 1], seed)?;
    Ok(PullbackVector {
        vector,
        offset,
        target: PullbackTarget::Neuron { layer, unit },
        gating: Some(spec.clone()),
    })
}

/// A gate point whose pre-activation is within finite-difference reach of zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NearBoundary {
    pub layer: usize,
    pub unit: usize,
    pub preactivation: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffGradient {
    pub gradient: Array1<f64>,
    pub near_boundary: Vec<NearBoundary>,
}

impl FiniteDiffGradient {
    pub fn is_generic(&self) -> bool {
        self.near_boundary.is_empty()
    }
}

/// Central-difference estimate of `grad f_class(x)`; flags every gate point
/// with `|z| < 10 h |v|(l,i)|`, where a step could cross the ReLU kink.
pub fn finite_diff_gradient(
    net: &Network,
    x: ArrayView1<f64>,
    class: usize,
    h: f64,
) -> Result<FiniteDiffGradient> {
    if !(h > 0.0) {
        return Err(Error::Domain {
            what: "finite-difference step".into(),
            value: h,
        });
    }
    if class >= net.num_classes() {
        return Err(Error::Index {
            what: "class",
            index: class,
            bound: net.num_classes(),
        });
    }
    let trace = net.forward(x)?;
    let hard = GatingSpec::hard();
    let mut near_boundary = Vec::new();
    for (l, z) in trace.preactivations.iter().enumerate() {
        for (i, zi) in z.iter().enumerate() {
            let sens = pullback_neuron(net, &trace, &hard, l + 1, i)?.vector;
            let threshold = 10.0 * h * sens.dot(&sens).sqrt();
            if zi.abs() < threshold {
                near_boundary.push(NearBoundary {
                    layer: l + 1,
                    unit: i,
                    preactivation: *zi,
                    threshold,
                });
            }
        }
    }
    let mut gradient = Array1::zeros(x.len());
    let mut probe = x.to_owned();
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = net.forward(probe.view())?.logits[class];
        probe[j] = orig - h;
        let down = net.forward(probe.view())?.logits[class];
        probe[j] = orig;
        gradient[j] = (up - down) / (2.0 * h);
    }
    Ok(FiniteDiffGradient {
        gradient,
        near_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::logistic;
    use ndarray::{arr1, arr2, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_neuron() -> Network {
        Network::dense(vec![(arr2(&[[2.0]]), arr1(&[-1.0]))], arr2(&[[3.0]])).unwrap()
    }

    #[test]
    fn one_neuron_hard() {
        let net = one_neuron();
        let x = arr1(&[1.0]);
        let t = net.forward(x.view()).unwrap();
        let pb = pullback_head(&net, &t, &GatingSpec::hard(), 0).unwrap();
        assert_eq!(pb.vector, arr1(&[6.0]));
        assert_eq!(pb.offset, -3.0);
        assert_eq!(pb.evaluate(x.view()), 3.0);
        assert_eq!(pb.class_index(), Some(0));
    }

    #[test]
    fn one_neuron_sigmoid() {
        let net = one_neuron();
        let t = net.forward(arr1(&[1.0]).view()).unwrap();
        let pb = pullback_head(&net, &t, &GatingSpec::sigmoid(0.3), 0).unwrap();
        let s = logistic(1.0 / 0.3);
        assert!((pb.vector[0] - 6.0 * s).abs() < 1e-14);
        assert!((pb.offset + 3.0 * s).abs() < 1e-14);
        assert!((pb.vector[0] - 5.7933).abs() < 1e-4);
        assert!((pb.offset + 2.8967).abs() < 1e-4);
    }

    #[test]
    fn first_layer_neuron_is_weight_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::random_dense(&[3, 4, 2], 2, 1.0, &mut rng).unwrap();
        let t = net.forward(arr1(&[0.2, -0.4, 0.9]).view()).unwrap();
        let a = net.affine_layers()[0];
        for spec in [GatingSpec::hard(), GatingSpec::sigmoid(0.3)] {
            for i in 0..4 {
                let pb = pullback_neuron(&net, &t, &spec, 1, i).unwrap();
                assert_eq!(pb.vector, a.weight.row(i));
                assert_eq!(pb.offset, a.bias[i]);
            }
        }
    }

    #[test]
    fn dead_layer_below_leaves_only_bias() {
        // layer-1 weights and biases are negative for positive input, so every first-layer gate is off
        let net = Network::dense(
            vec![
                (arr2(&[[-1.0, -1.0], [-2.0, -0.5]]), arr1(&[-0.1, -0.2])),
                (arr2(&[[1.0, 2.0], [0.5, -1.0]]), arr1(&[0.7, -0.3])),
            ],
            arr2(&[[1.0, 1.0]]),
        )
        .unwrap();
        let t = net.forward(arr1(&[0.5, 0.5]).view()).unwrap();
        assert_eq!(t.hard_gates[0], arr1(&[0.0, 0.0]));
        let pb = pullback_neuron(&net, &t, &GatingSpec::hard(), 2, 1).unwrap();
        assert_eq!(pb.vector, arr1(&[0.0, 0.0]));
        assert_eq!(pb.offset, -0.3);
    }

    #[test]
    fn neuron_index_errors() {
        let net = one_neuron();
        let t = net.forward(arr1(&[1.0]).view()).unwrap();
        assert!(matches!(
            pullback_neuron(&net, &t, &GatingSpec::hard(), 2, 0),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            pullback_neuron(&net, &t, &GatingSpec::hard(), 1, 1),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            pullback_head(&net, &t, &GatingSpec::hard(), 1),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn foreign_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = Network::random_dense(&[1, 3], 1, 1.0, &mut rng).unwrap();
        let t = big.forward(arr1(&[0.3]).view()).unwrap();
        assert!(matches!(
            pullback_head(&one_neuron(), &t, &GatingSpec::hard(), 0),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn finite_differences_on_one_neuron() {
        let fd = finite_diff_gradient(&one_neuron(), arr1(&[1.0]).view(), 0, 1e-6).unwrap();
        assert!((fd.gradient[0] - 6.0).abs() < 1e-6);
        assert!(fd.is_generic());
        let fd = finite_diff_gradient(&one_neuron(), arr1(&[0.5 + 1e-7]).view(), 0, 1e-6).unwrap();
        assert_eq!(fd.near_boundary.len(), 1);
        assert_eq!(
            (fd.near_boundary[0].layer, fd.near_boundary[0].unit),
            (1, 0)
        );
    }

    #[test]
    fn finite_differences_on_linear_net() {
        // positive weights, biases and inputs keep every gate on
        let w1 = arr2(&[[0.5, 0.2], [0.1, 0.9], [0.3, 0.3]]);
        let w2 = arr2(&[[0.4, 0.6, 0.2]]);
        let net = Network::dense(
            vec![
                (w1.clone(), arr1(&[0.1, 0.1, 0.1])),
                (w2.clone(), arr1(&[0.2])),
            ],
            arr2(&[[2.0]]),
        )
        .unwrap();
        let fd = finite_diff_gradient(&net, arr1(&[0.3, 0.8]).view(), 0, 1e-6).unwrap();
        let exact: Array2<f64> = arr2(&[[2.0]]).dot(&w2).dot(&w1);
        for j in 0..2 {
            assert!((fd.gradient[j] - exact[[0, j]]).abs() < 1e-8);
        }
    }
}

//! Gate values for every gating regime: hard ReLU gates, sigmoid excitation
//! gates and softmax weights for the pooling surrogate.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature used for both the ReLU and the pooling surrogate by default.
pub const DEFAULT_TEMPERATURE: f64 = 0.3;

/// Temperatures that are known to give well-behaved excitation pullbacks.
pub const WORKING_TEMPERATURES: std::ops::RangeInclusive<f64> = 0.15..=0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateKind {
    Hard,
    GlobalSigmoid { temperature: f64 },
    PerLayerSigmoid { temperatures: Vec<f64> },
    PerNeuronSigmoid { temperatures: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolGate {
    Hard,
    Softmax { temperature: f64 },
}

/// Which gate values the backward pass substitutes for the ReLU derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingSpec {
    pub kind: GateKind,
    pub pool: PoolGate,
}

impl Default for GatingSpec {
    fn default() -> Self {
        Self {
            kind: GateKind::GlobalSigmoid {
                temperature: DEFAULT_TEMPERATURE,
            },
            pool: PoolGate::Softmax {
                temperature: DEFAULT_TEMPERATURE,
            },
        }
    }
}

impl GatingSpec {
    /// Plain gradient: hard ReLU gates and argmax pooling.
    pub fn hard() -> Self {
        Self {
            kind: GateKind::Hard,
            pool: PoolGate::Hard,
        }
    }

    /// Global `sigmoid(z / temperature)` gates with argmax pooling.
    pub fn sigmoid(temperature: f64) -> Self {
        Self {
            kind: GateKind::GlobalSigmoid { temperature },
            pool: PoolGate::Hard,
        }
    }

    pub fn with_softmax_pool(mut self, temperature: f64) -> Self {
        self.pool = PoolGate::Softmax { temperature };
        self
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.kind, GateKind::Hard)
    }

    /// Checks temperatures and, for per-layer and per-neuron variants, the
    /// shapes against the given gate widths.
    pub fn validate(&self, widths: &[usize]) -> Result<()> {
        let positive = |t: f64, what: &str| {
            if t > 0.0 && t.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidGating(format!(
                    "{what} temperature must be positive, got {t}"
                )))
            }
        };
        match &self.kind {
            GateKind::Hard => {}
            GateKind::GlobalSigmoid { temperature } => positive(*temperature, "global")?,
            GateKind::PerLayerSigmoid { temperatures } => {
                if temperatures.len() != widths.len() {
                    return Err(Error::InvalidGating(format!(
                        "{} per-layer temperatures for {} gate layers",
                        temperatures.len(),
                        widths.len()
                    )));
                }
                for t in temperatures {
                    positive(*t, "per-layer")?;
                }
            }
            GateKind::PerNeuronSigmoid { temperatures } => {
                if temperatures.len() != widths.len() {
                    return Err(Error::InvalidGating(format!(
                        "{} per-neuron temperature layers for {} gate layers",
                        temperatures.len(),
                        widths.len()
                    )));
                }
                for (l, (ts, w)) in temperatures.iter().zip(widths).enumerate() {
                    if ts.len() != *w {
                        return Err(Error::InvalidGating(format!(
                            "layer {} has {} temperatures for width {w}",
                            l + 1,
                            ts.len()
                        )));
                    }
                    for t in ts {
                        positive(*t, "per-neuron")?;
                    }
                }
            }
        }
        if let PoolGate::Softmax { temperature } = self.pool {
            positive(temperature, "pool")?;
        }
        Ok(())
    }

    /// Gate values `lambda_l` for gate layer `layer` (0-based) from its pre-activations.
    pub fn gate_values(&self, layer: usize, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.kind {
            GateKind::Hard => Ok(hard_gate(z)),
            GateKind::GlobalSigmoid { temperature } => excitation_gate(z, *temperature),
            GateKind::PerLayerSigmoid { temperatures } => {
                let t = temperatures.get(layer).ok_or(Error::Index {
                    what: "per-layer temperature",
                    index: layer,
                    bound: temperatures.len(),
                })?;
                excitation_gate(z, *t)
            }
            GateKind::PerNeuronSigmoid { temperatures } => {
                let ts = temperatures.get(layer).ok_or(Error::Index {
                    what: "per-neuron temperature layer",
                    index: layer,
                    bound: temperatures.len(),
                })?;
                if ts.len() != z.len() {
                    return Err(Error::Shape {
                        what: format!("per-neuron temperatures of layer {}", layer + 1),
                        expected: z.len(),
                        found: ts.len(),
                    });
                }
                check_finite(z)?;
                Ok(Array1::from_iter(
                    z.iter().zip(ts).map(|(v, t)| logistic(v / t)),
                ))
            }
        }
    }
}

/// `1` where `z > 0`, else `0` (so `z = 0` is off).
pub fn hard_gate(z: ArrayView1<f64>) -> Array1<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(z: ArrayView1<f64>) -> Result<()> {
    match z.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Domain {
            what: "pre-activation".into(),
            value: *v,
        }),
        None => Ok(()),
    }
}

/// Excitation gate `sigmoid(z / temperature)` elementwise.
pub fn excitation_gate(z: ArrayView1<f64>, temperature: f64) -> Result<Array1<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidGating(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_finite(z)?;
    Ok(z.mapv(|v| logistic(v / temperature)))
}

/// Softmax of `patch / temperature`; the backward routing weights of the
/// pooling surrogate.
pub fn pool_softmax_weights(patch: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if patch.is_empty() {
        return Err(Error::Config("empty pooling patch".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidGating(format!(
            "pool temperature must be positive, got {temperature}"
        )));
    }
    let max = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = patch
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    Ok(w)
}

//! Feedforward ReLU networks and recorded forward passes.
//!
//! A [`Network`] is a flat list of [`Stage`]s applied to a CHW-flattened input.
//! Every ReLU is an explicit [`Stage::Gate`] so the same stage list can run with
//! hard gates ([`Network::forward`]) or with externally supplied gate values
//! ([`Network::forward_induced`]). Biases are stored separately from weights;
//! the augmented `[x; 1]` form is only built where an identity needs it.

use std::fmt;

use ndarray::{Array1, Array2, Array4, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::gating::hard_gate;

/// Channel-major tensor shape. Dense vectors use `(d, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(dim: usize) -> Self {
        Self::new(dim, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub(crate) fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out x in` weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// No gate follows this stage.
    pub linear_output: bool,
    /// Spatial layout of the output (flat when `None`), so a densified conv
    /// can still feed a pool.
    pub output_shape: Option<Shape>,
}

impl Affine {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self {
            weight,
            bias,
            linear_output: false,
            output_shape: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[out_channels, in_channels, kh, kw]`.
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub linear_output: bool,
}

impl Conv {
    pub fn new(kernel: Array4<f64>, bias: Array1<f64>, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            bias,
            stride,
            padding,
            linear_output: false,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// The equivalent dense stage for inputs of `shape`.
    pub fn to_affine(&self, shape: Shape) -> Result<Affine> {
        let out = conv_output_shape(self, shape).map_err(|v| Error::InvalidNetwork(vec![v]))?;
        let (weight, bias) = conv::conv_matrix(self, shape, out);
        Ok(Affine {
            weight,
            bias,
            linear_output: self.linear_output,
            output_shape: Some(out),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Affine(Affine),
    Conv(Conv),
    MaxPool(MaxPool),
    /// ReLU location with its 1-based layer index.
    Gate {
        layer: usize,
    },
}

impl Stage {
    fn is_linear(&self) -> bool {
        matches!(self, Stage::Affine(_) | Stage::Conv(_))
    }

    fn linear_output(&self) -> bool {
        match self {
            Stage::Affine(a) => a.linear_output,
            Stage::Conv(c) => c.linear_output,
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Affine(_) => "affine",
            Stage::Conv(_) => "conv",
            Stage::MaxPool(_) => "maxpool",
            Stage::Gate { .. } => "gate",
        }
    }
}

/// Per-channel input standardization applied before the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, x: ArrayView1<f64>, shape: Shape) -> Array1<f64> {
        let plane = shape.height * shape.width;
        Array1::from_iter(x.iter().enumerate().map(|(i, v)| {
            let c = i / plane;
            (v - self.mean[c]) / self.std[c]
        }))
    }

    /// Chain-rule factor `d normalized / d raw` per element.
    pub fn scale(&self, shape: Shape) -> Array1<f64> {
        let plane = shape.height * shape.width;
        Array1::from_shape_fn(shape.numel(), |i| 1.0 / self.std[i / plane])
    }
}

/// A structural rule broken by a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ShapeMismatch {
        stage: usize,
        detail: String,
    },
    MissingGate {
        stage: usize,
    },
    DuplicateGate {
        stage: usize,
    },
    OrphanGate {
        stage: usize,
    },
    GateIndex {
        stage: usize,
        expected: usize,
        found: usize,
    },
    BadHyperparameter {
        stage: usize,
        detail: String,
    },
    Heads {
        detail: String,
    },
    Normalization {
        detail: String,
    },
}

impl Violation {
    pub fn stage(&self) -> Option<usize> {
        match self {
            Violation::ShapeMismatch { stage, .. }
            | Violation::MissingGate { stage }
            | Violation::DuplicateGate { stage }
            | Violation::OrphanGate { stage }
            | Violation::GateIndex { stage, .. }
            | Violation::BadHyperparameter { stage, .. } => Some(*stage),
            Violation::Heads { .. } | Violation::Normalization { .. } => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch { stage, detail } => {
                write!(f, "stage {stage}: shape mismatch ({detail})")
            }
            Violation::MissingGate { stage } => {
                write!(f, "stage {stage}: linear stage is not followed by a gate")
            }
            Violation::DuplicateGate { stage } => write!(f, "stage {stage}: duplicate gate"),
            Violation::OrphanGate { stage } => {
                write!(
                    f,
                    "stage {stage}: gate does not follow a gated linear stage"
                )
            }
            Violation::GateIndex {
                stage,
                expected,
                found,
            } => {
                write!(
                    f,
                    "stage {stage}: gate layer index {found}, expected {expected}"
                )
            }
            Violation::BadHyperparameter { stage, detail } => write!(f, "stage {stage}: {detail}"),
            Violation::Heads { detail } => write!(f, "heads: {detail}"),
            Violation::Normalization { detail } => write!(f, "normalization: {detail}"),
        }
    }
}

fn conv_output_shape(c: &Conv, shape: Shape) -> std::result::Result<Shape, Violation> {
    let bad = |detail: String| Violation::ShapeMismatch { stage: 0, detail };
    if c.in_channels() != shape.channels {
        return Err(bad(format!(
            "conv expects {} input channels, got {}",
            c.in_channels(),
            shape.channels
        )));
    }
    if c.bias.len() != c.out_channels() {
        return Err(bad(format!(
            "conv bias has {} entries for {} output channels",
            c.bias.len(),
            c.out_channels()
        )));
    }
    let (kh, kw) = (c.kernel.shape()[2], c.kernel.shape()[3]);
    match (
        conv::window_count(shape.height, kh, c.stride, c.padding),
        conv::window_count(shape.width, kw, c.stride, c.padding),
    ) {
        (Some(h), Some(w)) => Ok(Shape::new(c.out_channels(), h, w)),
        _ => Err(bad(format!(
            "conv kernel {kh}x{kw} does not fit input {shape}"
        ))),
    }
}

fn stage_output_shape(stage: &Stage, shape: Shape) -> std::result::Result<Shape, Violation> {
    match stage {
        Stage::Affine(a) => {
            if a.in_dim() != shape.numel() {
                return Err(Violation::ShapeMismatch {
                    stage: 0,
                    detail: format!(
                        "affine expects {} inputs, previous stage yields {}",
                        a.in_dim(),
                        shape.numel()
                    ),
                });
            }
            if a.bias.len() != a.out_dim() {
                return Err(Violation::ShapeMismatch {
                    stage: 0,
                    detail: format!(
                        "affine bias has {} entries for {} outputs",
                        a.bias.len(),
                        a.out_dim()
                    ),
                });
            }
            match a.output_shape {
                Some(s) if s.numel() != a.out_dim() => Err(Violation::ShapeMismatch {
                    stage: 0,
                    detail: format!(
                        "affine output shape {s} does not hold {} outputs",
                        a.out_dim()
                    ),
                }),
                Some(s) => Ok(s),
                None => Ok(Shape::flat(a.out_dim())),
            }
        }
        Stage::Conv(c) => {
            if c.stride == 0 {
                return Err(Violation::BadHyperparameter {
                    stage: 0,
                    detail: "conv stride must be positive".into(),
                });
            }
            conv_output_shape(c, shape)
        }
        Stage::MaxPool(p) => {
            if p.stride == 0 || p.kernel == 0 || 2 * p.padding > p.kernel {
                return Err(Violation::BadHyperparameter {
                    stage: 0,
                    detail: format!(
                        "pool needs kernel>0, stride>0, padding<=kernel/2 (got k={}, s={}, p={})",
                        p.kernel, p.stride, p.padding
                    ),
                });
            }
            match (
                conv::window_count(shape.height, p.kernel, p.stride, p.padding),
                conv::window_count(shape.width, p.kernel, p.stride, p.padding),
            ) {
                (Some(h), Some(w)) => Ok(Shape::new(shape.channels, h, w)),
                _ => Err(Violation::ShapeMismatch {
                    stage: 0,
                    detail: format!("pool kernel {} does not fit input {shape}", p.kernel),
                }),
            }
        }
        Stage::Gate { .. } => Ok(shape),
    }
}

fn with_stage(v: Violation, k: usize) -> Violation {
    match v {
        Violation::ShapeMismatch { detail, .. } => Violation::ShapeMismatch { stage: k, detail },
        Violation::BadHyperparameter { detail, .. } => {
            Violation::BadHyperparameter { stage: k, detail }
        }
        other => other,
    }
}

/// A feedforward ReLU network with linear heads acting on the last stage output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stages: Vec<Stage>,
    /// One head vector `y_c` per row.
    pub heads: Array2<f64>,
    pub input_shape: Shape,
    pub normalization: Option<Normalization>,
}

/// Record of one max-pool stage during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub stage: usize,
    pub input_shape: Shape,
    pub output_shape: Shape,
    /// Values entering the pool (used by soft pooling backward weights).
    pub input: Array1<f64>,
    /// Winning flat input index per output position.
    pub argmax: Vec<usize>,
}

/// Everything a backward pass needs about one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array1<f64>,
    pub preactivations: Vec<Array1<f64>>,
    pub activations: Vec<Array1<f64>>,
    pub hard_gates: Vec<Array1<f64>>,
    pub pools: Vec<PoolRecord>,
    pub output: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn pool_argmax(&self) -> impl Iterator<Item = &[usize]> {
        self.pools.iter().map(|p| p.argmax.as_slice())
    }

    /// Smallest `|z|` over every gate point.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.preactivations
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Output of a gate-substituted forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedForward {
    pub output: Array1<f64>,
    pub logits: Array1<f64>,
}

enum Gates<'a> {
    Hard,
    Given(&'a [Array1<f64>]),
}

impl Network {
    /// Builds and validates a network.
    pub fn new(stages: Vec<Stage>, heads: Array2<f64>, input_shape: Shape) -> Result<Self> {
        let net = Self {
            stages,
            heads,
            input_shape,
            normalization: None,
        };
        net.ensure_valid()?;
        Ok(net)
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        self.normalization = Some(norm);
        self.ensure_valid()?;
        Ok(self)
    }

    /// Dense net `widths[0] -> widths[1] -> ... -> widths[L]` with a gate after
    /// every affine stage and `heads` rows acting on the last layer.
    pub fn dense(layers: Vec<(Array2<f64>, Array1<f64>)>, heads: Array2<f64>) -> Result<Self> {
        let input = layers
            .first()
            .map(|(w, _)| w.ncols())
            .ok_or_else(|| Error::Config("dense network needs at least one layer".into()))?;
        let mut stages = Vec::with_capacity(2 * layers.len());
        for (i, (w, b)) in layers.into_iter().enumerate() {
            stages.push(Stage::Affine(Affine::new(w, b)));
            stages.push(Stage::Gate { layer: i + 1 });
        }
        Self::new(stages, heads, Shape::flat(input))
    }

    /// Dense net with weights, biases and heads drawn uniformly from `[-scale, scale]`.
    pub fn random_dense<R: Rng + ?Sized>(
        widths: &[usize],
        classes: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "need at least input and one layer width".into(),
            ));
        }
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..=scale))
        };
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let w = draw(pair[1], pair[0]);
            let b = draw(pair[1], 1).column(0).to_owned();
            layers.push((w, b));
        }
        let heads = draw(classes, *widths.last().unwrap());
        Self::dense(layers, heads)
    }

    pub fn num_classes(&self) -> usize {
        self.heads.nrows()
    }

    /// Number of gate points `L`.
    pub fn depth(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Gate { .. }))
            .count()
    }

    /// Stage indices of the gate points, in layer order.
    pub fn gate_stages(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(k, s)| matches!(s, Stage::Gate { .. }).then_some(k))
            .collect()
    }

    /// Input shape of every stage followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.stages.len() + 1);
        let mut s = self.input_shape;
        shapes.push(s);
        for (k, stage) in self.stages.iter().enumerate() {
            s = stage_output_shape(stage, s)
                .map_err(|v| Error::InvalidNetwork(vec![with_stage(v, k)]))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Widths `d_1..d_L` of the gate points.
    pub fn gate_widths(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        Ok(self
            .gate_stages()
            .into_iter()
            .map(|k| shapes[k].numel())
            .collect())
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().numel())
    }

    /// All structural violations; empty iff the network is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut shape = Some(self.input_shape);
        let mut next_layer = 1;
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(s) = shape {
                shape = match stage_output_shape(stage, s) {
                    Ok(next) => Some(next),
                    Err(v) => {
                        out.push(with_stage(v, k));
                        None
                    }
                };
            }
            let prev = k.checked_sub(1).map(|p| &self.stages[p]);
            if let Stage::Gate { layer } = stage {
                match prev {
                    Some(Stage::Gate { .. }) => out.push(Violation::DuplicateGate { stage: k }),
                    Some(p) if p.is_linear() && !p.linear_output() => {}
                    _ => out.push(Violation::OrphanGate { stage: k }),
                }
                if *layer != next_layer {
                    out.push(Violation::GateIndex {
                        stage: k,
                        expected: next_layer,
                        found: *layer,
                    });
                }
                next_layer += 1;
            }
            if stage.is_linear()
                && !stage.linear_output()
                && !matches!(self.stages.get(k + 1), Some(Stage::Gate { .. }))
            {
                out.push(Violation::MissingGate { stage: k });
            }
        }
        if self.heads.nrows() == 0 {
            out.push(Violation::Heads {
                detail: "no head vectors".into(),
            });
        }
        if let Some(s) = shape {
            if self.heads.ncols() != s.numel() {
                out.push(Violation::Heads {
                    detail: format!(
                        "head dim {} but network output dim {}",
                        self.heads.ncols(),
                        s.numel()
                    ),
                });
            }
        }
        if let Some(n) = &self.normalization {
            let c = self.input_shape.channels;
            if n.mean.len() != c || n.std.len() != c {
                out.push(Violation::Normalization {
                    detail: format!("expected {c} channels of mean/std"),
                });
            } else if n.std.iter().any(|s| !(*s > 0.0)) {
                out.push(Violation::Normalization {
                    detail: "std entries must be positive".into(),
                });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(v))
        }
    }

    /// Hard-gated forward pass recording pre-activations, gates and pool winners.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardTrace> {
        self.run(x, Gates::Hard)
    }

    /// Forward pass where every ReLU is replaced by multiplication with the
    /// supplied per-layer gate values (pools still take the hard maximum).
    pub fn forward_induced(
        &self,
        x: ArrayView1<f64>,
        gates: &[Array1<f64>],
    ) -> Result<InducedForward> {
        let widths = self.gate_widths()?;
        if gates.len() != widths.len() {
            return Err(Error::Shape {
                what: "gate layer count".into(),
                expected: widths.len(),
                found: gates.len(),
            });
        }
        for (l, (g, w)) in gates.iter().zip(&widths).enumerate() {
            if g.len() != *w {
                return Err(Error::Shape {
                    what: format!("gate width of layer {}", l + 1),
                    expected: *w,
                    found: g.len(),
                });
            }
            if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain {
                    what: format!("gate value in layer {}", l + 1),
                    value: *v,
                });
            }
        }
        let t = self.run(x, Gates::Given(gates))?;
        Ok(InducedForward {
            output: t.output,
            logits: t.logits,
        })
    }

    fn run(&self, x: ArrayView1<f64>, gates: Gates<'_>) -> Result<ForwardTrace> {
        self.ensure_valid()?;
        if x.len() != self.input_shape.numel() {
            return Err(Error::InputShape {
                expected: self.input_shape.numel(),
                found: x.len(),
            });
        }
        let shapes = self.shapes()?;
        let mut trace = ForwardTrace {
            input: x.to_owned(),
            preactivations: Vec::new(),
            activations: Vec::new(),
            hard_gates: Vec::new(),
            pools: Vec::new(),
            output: Array1::zeros(0),
            logits: Array1::zeros(0),
        };
        let mut h = x.to_owned();
        for (k, stage) in self.stages.iter().enumerate() {
            let (sin, sout) = (shapes[k], shapes[k + 1]);
            h = match stage {
                Stage::Affine(a) => a.weight.dot(&h) + &a.bias,
                Stage::Conv(c) => conv::conv_forward(c, h.as_slice().unwrap(), sin, sout),
                Stage::MaxPool(p) => {
                    let (y, argmax) = conv::pool_forward(p, h.as_slice().unwrap(), sin, sout);
                    trace.pools.push(PoolRecord {
                        stage: k,
                        input_shape: sin,
                        output_shape: sout,
                        input: h,
                        argmax,
                    });
                    y
                }
                Stage::Gate { .. } => {
                    let layer = trace.preactivations.len();
                    let hard = hard_gate(h.view());
                    let lambda = match gates {
                        Gates::Hard => &hard,
                        Gates::Given(g) => &g[layer],
                    };
                    let act = lambda * &h;
                    trace.preactivations.push(h);
                    trace.hard_gates.push(hard);
                    trace.activations.push(act.clone());
                    act
                }
            };
        }
        trace.logits = self.heads.dot(&h);
        trace.output = h;
        Ok(trace)
    }

    /// Copy of the network with every conv stage replaced by its dense matrix.
    pub fn densified(&self) -> Result<Network> {
        let shapes = self.shapes()?;
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| match s {
                Stage::Conv(c) => c.to_affine(shapes[k]).map(Stage::Affine),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            stages,
            heads: self.heads.clone(),
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
        })
    }

    /// True if no stage other than Affine/Gate is present and every affine is gated.
    pub fn is_plain_dense(&self) -> bool {
        self.stages.iter().enumerate().all(|(k, s)| match s {
            Stage::Affine(a) => !a.linear_output && k % 2 == 0,
            Stage::Gate { .. } => k % 2 == 1,
            _ => false,
        }) && self.stages.len().is_multiple_of(2)
            && !self.stages.is_empty()
    }

    /// Affine stages of a plain dense network, in order.
    pub fn affine_layers(&self) -> Vec<&Affine> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Affine(a) => Some(a),
                _ => None,
            })
            .collect()
    }
}

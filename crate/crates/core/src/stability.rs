//! Gate-stability measurements over training.
//!
//! Small dense networks are trained with plain mini-batch SGD (ordinary hard
//! ReLU gradients). At chosen epochs the network is snapshotted; for every
//! snapshot we measure the Pearson correlation between the hard-gated logits
//! `f(X)` and the excitation-gated logits `f_Γ(X)` on a fixed evaluation set,
//! and between consecutive snapshots the fraction of hard gates that flipped.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{hard_gate, GatingSpec};
use crate::network::{Network, Stage};
use crate::pullback::gate_values;

/// Correlation above which `f` and `f_Γ` count as strongly positively correlated.
pub const RHO_THRESHOLD: f64 = 0.9;

/// Default seed for every sampled quantity.
pub const DEFAULT_SEED: u64 = 314;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Two isotropic Gaussians centred at `±separation/2` along the diagonal.
    TwoGaussians {
        dim: usize,
        train: usize,
        eval: usize,
        separation: f64,
        std: f64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoGaussians {
            dim: 2,
            train: 1024,
            eval: 512,
            separation: 5.0,
            std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Array1<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::TwoGaussians { dim, .. } => *dim,
        }
    }

    pub fn classes(&self) -> usize {
        2
    }

    /// Training and held-out evaluation splits, drawn from one seeded stream.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match *self {
            DatasetSpec::TwoGaussians {
                dim,
                train,
                eval,
                separation,
                std,
            } => {
                let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let offset = separation / 2.0 / (dim as f64).sqrt();
                let mut draw = |n: usize| {
                    let mut d = Dataset {
                        inputs: Vec::with_capacity(n),
                        labels: Vec::with_capacity(n),
                    };
                    for i in 0..n {
                        let label = i % 2;
                        let sign = if label == 0 { -1.0 } else { 1.0 };
                        d.inputs.push(Array1::from_shape_fn(dim, |_| {
                            sign * offset + noise.sample(&mut rng)
                        }));
                        d.labels.push(label);
                    }
                    d
                };
                let tr = draw(train);
                let ev = draw(eval);
                Ok((tr, ev))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs after which the network is recorded; `0` is the initialization.
    pub snapshot_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
            snapshot_epochs: vec![0, 1, 2, 5, 10, 20, 50],
            seed: DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if let Some(e) = self.snapshot_epochs.iter().find(|e| **e > self.epochs) {
            return Err(Error::Config(format!(
                "snapshot epoch {e} is after the last epoch {}",
                self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub network: Network,
}

/// Per-epoch mean training loss and end-of-epoch training accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub snapshots: Vec<Snapshot>,
    pub curves: TrainingCurves,
    pub train: Dataset,
    pub eval: Dataset,
}

impl TrainingRun {
    pub fn final_network(&self) -> Option<&Network> {
        self.snapshots.last().map(|s| &s.network)
    }
}

/// Dense network for training: He-normal weights, zero biases, heads with
/// variance `1 / fan_in`. `widths` is `(input, hidden.., classes)`.
pub fn init_dense(widths: &[usize], seed: u64) -> Result<Network> {
    if widths.len() < 3 {
        return Err(Error::Config(
            "widths must list input, at least one hidden layer and the class count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let hidden = &widths[..widths.len() - 1];
    let mut layers = Vec::new();
    for pair in hidden.windows(2) {
        let scale = (2.0 / pair[0] as f64).sqrt();
        let w = Array2::from_shape_fn((pair[1], pair[0]), |_| scale * unit.sample(&mut rng));
        layers.push((w, Array1::zeros(pair[1])));
    }
    let fan_in = *hidden.last().unwrap();
    let classes = *widths.last().unwrap();
    let scale = (1.0 / fan_in as f64).sqrt();
    let heads = Array2::from_shape_fn((classes, fan_in), |_| scale * unit.sample(&mut rng));
    Network::dense(layers, heads)
}

fn softmax_xent(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad = exp / sum;
    grad[label] -= 1.0;
    (loss, grad)
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `data` whose argmax logit matches the label.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if argmax(&net.forward(x.view())?.logits) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

struct Grads {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    heads: Array2<f64>,
}

impl Grads {
    fn zeros(net: &Network) -> Self {
        let layers = net.affine_layers();
        Self {
            weights: layers
                .iter()
                .map(|a| Array2::zeros(a.weight.raw_dim()))
                .collect(),
            biases: layers.iter().map(|a| Array1::zeros(a.bias.len())).collect(),
            heads: Array2::zeros(net.heads.raw_dim()),
        }
    }
}

/// Accumulates loss gradients of one example; returns its loss.
fn accumulate(net: &Network, x: &Array1<f64>, label: usize, g: &mut Grads) -> Result<f64> {
    let trace = net.forward(x.view())?;
    let (loss, dlogits) = softmax_xent(&trace.logits, label);
    let out = trace.output.view();
    g.heads += &dlogits
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&out.insert_axis(ndarray::Axis(0)));
    let mut delta = net.heads.t().dot(&dlogits);
    let layers = net.affine_layers();
    for l in (0..layers.len()).rev() {
        delta *= &trace.hard_gates[l];
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        g.weights[l] += &delta
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&input.view().insert_axis(ndarray::Axis(0)));
        g.biases[l] += &delta;
        delta = layers[l].weight.t().dot(&delta);
    }
    Ok(loss)
}

fn apply(net: &mut Network, g: &Grads, step: f64) {
    let mut l = 0;
    for stage in &mut net.stages {
        if let Stage::Affine(a) = stage {
            a.weight.scaled_add(-step, &g.weights[l]);
            a.bias.scaled_add(-step, &g.biases[l]);
            l += 1;
        }
    }
    net.heads.scaled_add(-step, &g.heads);
}

/// Mini-batch SGD on softmax cross-entropy over the heads, recording snapshots.
pub fn train_sgd(net: &Network, cfg: &TrainConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    if !net.is_plain_dense() {
        return Err(Error::Config(
            "training supports plain dense networks only".into(),
        ));
    }
    if net.input_shape.numel() != cfg.dataset.input_dim()
        || net.num_classes() != cfg.dataset.classes()
    {
        return Err(Error::Config(format!(
            "network maps {} inputs to {} classes, dataset has {} and {}",
            net.input_shape.numel(),
            net.num_classes(),
            cfg.dataset.input_dim(),
            cfg.dataset.classes()
        )));
    }
    let (train, eval) = cfg.dataset.generate(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut net = net.clone();
    let mut snapshots = Vec::new();
    let mut curves = TrainingCurves::default();
    if cfg.snapshot_epochs.contains(&0) {
        snapshots.push(Snapshot {
            epoch: 0,
            network: net.clone(),
        });
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Grads::zeros(&net);
            for &i in batch {
                total += accumulate(&net, &train.inputs[i], train.labels[i], &mut g)?;
            }
            apply(&mut net, &g, cfg.learning_rate / batch.len() as f64);
        }
        let loss = total / train.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        curves.loss.push(loss);
        curves.accuracy.push(accuracy(&net, &train)?);
        if cfg.snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                network: net.clone(),
            });
        }
    }
    Ok(TrainingRun {
        snapshots,
        curves,
        train,
        eval,
    })
}

/// Gate flip fractions between two snapshots of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRate {
    pub from_epoch: usize,
    pub to_epoch: usize,
    pub rate: f64,
    pub per_layer: Vec<f64>,
}

fn same_architecture(a: &Network, b: &Network) -> Result<()> {
    if a.input_shape != b.input_shape || a.gate_widths()? != b.gate_widths()? {
        return Err(Error::ArchitectureMismatch(format!(
            "gate widths {:?} vs {:?}",
            a.gate_widths()?,
            b.gate_widths()?
        )));
    }
    Ok(())
}

/// Overall and per-layer fraction of `(x, layer, unit)` whose hard gate differs.
pub fn gate_flip_rates(a: &Network, b: &Network, xs: &[Array1<f64>]) -> Result<(f64, Vec<f64>)> {
    same_architecture(a, b)?;
    let widths = a.gate_widths()?;
    let mut per_layer = vec![0usize; widths.len()];
    for x in xs {
        let ta = a.forward(x.view())?;
        let tb = b.forward(x.view())?;
        for (l, (ga, gb)) in ta.hard_gates.iter().zip(&tb.hard_gates).enumerate() {
            per_layer[l] += ga.iter().zip(gb).filter(|(u, v)| u != v).count();
        }
    }
    let n = xs.len().max(1) as f64;
    let total: usize = per_layer.iter().sum();
    let units: usize = widths.iter().sum();
    let rates = per_layer
        .iter()
        .zip(&widths)
        .map(|(c, w)| *c as f64 / (n * *w as f64))
        .collect();
    Ok((total as f64 / (n * units as f64), rates))
}

pub fn gate_flip_rate(a: &Network, b: &Network, xs: &[Array1<f64>]) -> Result<f64> {
    Ok(gate_flip_rates(a, b, xs)?.0)
}

/// Product-moment correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            what: "correlation operands".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Hard and gate-substituted logits for every input, one column per class.
pub fn paired_logits(
    net: &Network,
    xs: &[Array1<f64>],
    spec: &GatingSpec,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let c = net.num_classes();
    let mut hard = Array2::zeros((xs.len(), c));
    let mut soft = Array2::zeros((xs.len(), c));
    for (i, x) in xs.iter().enumerate() {
        let trace = net.forward(x.view())?;
        let gates = gate_values(net, &trace, spec)?;
        let induced = net.forward_induced(x.view(), &gates)?;
        hard.row_mut(i).assign(&trace.logits);
        soft.row_mut(i).assign(&induced.logits);
    }
    Ok((hard, soft))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub epoch: usize,
    /// `rho(f_c(X), f_Γ,c(X))` per class head.
    pub rho: Vec<f64>,
    pub min_rho: f64,
    /// Hard-forward accuracy when labels were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    /// Mean fraction of active hard gates over the evaluation set.
    pub active_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub gating: GatingSpec,
    pub rho_threshold: f64,
    pub eval_size: usize,
    pub snapshots: Vec<SnapshotStats>,
    pub flip_rates: Vec<FlipRate>,
    /// Earliest snapshot epoch from which `min_rho` stays above the threshold.
    pub stable_from_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingCurves>,
}

impl StabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Correlation and gate-churn report over a sequence of snapshots.
pub fn stability_report(
    snapshots: &[Snapshot],
    xs: &[Array1<f64>],
    spec: &GatingSpec,
) -> Result<StabilityReport> {
    stability_report_labeled(snapshots, xs, None, spec)
}

/// As [`stability_report`], with evaluation accuracy when labels are given.
pub fn stability_report_labeled(
    snapshots: &[Snapshot],
    xs: &[Array1<f64>],
    labels: Option<&[usize]>,
    spec: &GatingSpec,
) -> Result<StabilityReport> {
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "evaluation set needs at least two points",
        ));
    }
    let mut stats = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let net = &snap.network;
        let (hard, soft) = paired_logits(net, xs, spec)?;
        let rho = (0..net.num_classes())
            .map(|c| {
                pearson(
                    hard.column(c)
                        .as_slice_memory_order()
                        .unwrap_or(&hard.column(c).to_vec()),
                    &soft.column(c).to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let min_rho = rho.iter().copied().fold(f64::INFINITY, f64::min);
        let eval_accuracy = labels.map(|l| {
            let hits = hard
                .rows()
                .into_iter()
                .zip(l)
                .filter(|(r, y)| argmax(&r.to_owned()) == **y)
                .count();
            hits as f64 / xs.len() as f64
        });
        let mut active = 0.0;
        let mut units = 0.0;
        for x in xs {
            for z in net.forward(x.view())?.preactivations {
                active += hard_gate(z.view()).sum();
                units += z.len() as f64;
            }
        }
        stats.push(SnapshotStats {
            epoch: snap.epoch,
            rho,
            min_rho,
            eval_accuracy,
            active_fraction: active / units.max(1.0),
        });
    }
    let flip_rates = snapshots
        .windows(2)
        .map(|w| {
            let (rate, per_layer) = gate_flip_rates(&w[0].network, &w[1].network, xs)?;
            Ok(FlipRate {
                from_epoch: w[0].epoch,
                to_epoch: w[1].epoch,
                rate,
                per_layer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stable_from_epoch = None;
    for s in stats.iter().rev() {
        if s.min_rho > RHO_THRESHOLD {
            stable_from_epoch = Some(s.epoch);
        } else {
            break;
        }
    }
    Ok(StabilityReport {
        gating: spec.clone(),
        rho_threshold: RHO_THRESHOLD,
        eval_size: xs.len(),
        snapshots: stats,
        flip_rates,
        stable_from_epoch,
        training: None,
    })
}

/// Trains `widths` on `cfg` and reports stability under `spec` on the held-out split.
pub fn run_stability(
    widths: &[usize],
    cfg: &TrainConfig,
    spec: &GatingSpec,
) -> Result<(TrainingRun, StabilityReport)> {
    let net = init_dense(widths, cfg.seed)?;
    let run = train_sgd(&net, cfg)?;
    let mut report = stability_report_labeled(
        &run.snapshots,
        &run.eval.inputs,
        Some(&run.eval.labels),
        spec,
    )?;
    report.training = Some(run.curves.clone());
    Ok((run, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(pearson(&a, &a).unwrap(), 1.0);
        assert_eq!(pearson(&a, &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        // centred: dx = (-1, 0, 1), dy = (-7, -1, 8) / 3
        let r = pearson(&a, &[2.0, 4.0, 7.0]).unwrap();
        let expected = 15.0 / (2.0f64 * 114.0).sqrt();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0], &[2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0], &[2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[2.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let net = init_dense(&[2, 4, 2], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            snapshot_epochs: vec![0, 1, 3],
            dataset: DatasetSpec::TwoGaussians {
                dim: 2,
                train: 64,
                eval: 16,
                separation: 3.0,
                std: 1.0,
            },
            ..Default::default()
        };
        let run = train_sgd(&net, &cfg).unwrap();
        assert_eq!(run.snapshots.len(), 3);
        for s in &run.snapshots {
            assert_eq!(s.network, net);
        }
    }

    #[test]
    fn flip_rate_of_negated_first_layer() {
        let a = init_dense(&[2, 5, 3, 2], 9).unwrap();
        let mut b = a.clone();
        if let Stage::Affine(l) = &mut b.stages[0] {
            l.weight.mapv_inplace(|v| -v);
            l.bias.mapv_inplace(|v| -v);
        }
        let xs = vec![arr1(&[0.3, -1.2]), arr1(&[1.5, 0.4]), arr1(&[-0.7, -0.9])];
        for x in &xs {
            assert!(a.forward(x.view()).unwrap().preactivations[0]
                .iter()
                .all(|z| *z != 0.0));
        }
        let (_, per_layer) = gate_flip_rates(&a, &b, &xs).unwrap();
        assert_eq!(per_layer[0], 1.0);
        assert_eq!(gate_flip_rate(&a, &a, &xs).unwrap(), 0.0);
    }

    #[test]
    fn flip_rate_needs_same_architecture() {
        let a = init_dense(&[2, 5, 2], 1).unwrap();
        let b = init_dense(&[2, 4, 2], 1).unwrap();
        assert!(matches!(
            gate_flip_rate(&a, &b, &[arr1(&[0.0, 1.0])]),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn single_point_report_is_undefined() {
        let net = init_dense(&[2, 3, 2], 1).unwrap();
        let snaps = vec![Snapshot {
            epoch: 0,
            network: net,
        }];
        assert!(matches!(
            stability_report(&snaps, &[arr1(&[0.1, 0.2])], &GatingSpec::sigmoid(0.3)),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn bad_snapshot_epoch_is_rejected() {
        let cfg = TrainConfig {
            epochs: 5,
            snapshot_epochs: vec![6],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            alpha in 0.1f64..10.0,
            beta in -5.0f64..5.0,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&a, &b) {
                let scaled: Vec<f64> = a.iter().map(|v| alpha * v + beta).collect();
                let r2 = pearson(&scaled, &b).unwrap();
                prop_assert!((r - r2).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}

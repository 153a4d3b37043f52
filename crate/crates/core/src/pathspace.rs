//! Brute-force path-space oracle for small dense networks.
//!
//! Paths run through augmented coordinates: layers `0..L-1` carry an extra
//! always-on bias coordinate (the last index), the head layer `L` does not.
//! The bias row of every augmented weight matrix is `[0 ... 0 1]`, so a path
//! can only sit on the bias coordinate of layer `l` if it also sat on the bias
//! coordinate of layer `l-1`: bias chains are prefixes of a path. A unit
//! feeding a bias coordinate has weight zero.
//!
//! Sums over paths are split into fixed-size chunks that may run in parallel;
//! partial sums are combined in chunk order, so results do not depend on the
//! thread count.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gating::GatingSpec;
use crate::network::Network;
use crate::pullback::{gate_values, PullbackTarget, PullbackVector};

/// Default limit on `|P0|`.
pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

const CHUNK: usize = 4096;

/// Sizes and enumeration order of the path sets of a dense network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathLayout {
    /// `d_0 .. d_L`.
    widths: Vec<usize>,
    /// Augmented sizes `D_0 .. D_L`.
    dims: Vec<usize>,
}

/// A path `(p_0, p_1, .., p_L)` through augmented coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathIndex(pub Vec<usize>);

impl PathIndex {
    /// `(p_1, .., p_L)`.
    pub fn tail(&self) -> &[usize] {
        &self.0[1..]
    }
}

impl PathLayout {
    pub fn from_widths(widths: &[usize]) -> Self {
        let last = widths.len() - 1;
        let dims = widths
            .iter()
            .enumerate()
            .map(|(l, &d)| if l < last { d + 1 } else { d })
            .collect();
        Self {
            widths: widths.to_vec(),
            dims,
        }
    }

    /// Number of gate layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `|P1|`.
    pub fn count_p1(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// `|P0|`.
    pub fn count_p0(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_bias(&self, layer: usize, coord: usize) -> bool {
        layer < self.depth() && coord == self.widths[layer]
    }

    /// Lexicographic rank of `(p_1, .., p_L)` within `P1`.
    pub fn index_p1(&self, tail: &[usize]) -> usize {
        tail.iter()
            .zip(&self.dims[1..])
            .fold(0, |acc, (&p, &d)| acc * d + p)
    }

    /// Lexicographic rank of a full path within `P0` (`p_0` slowest).
    pub fn index_p0(&self, p: &PathIndex) -> usize {
        p.0[0] * self.count_p1() + self.index_p1(p.tail())
    }

    /// Inverse of [`index_p1`](Self::index_p1).
    pub fn path_p1(&self, mut idx: usize) -> Vec<usize> {
        let mut p = vec![0; self.depth()];
        for (slot, &d) in p.iter_mut().zip(&self.dims[1..]).rev() {
            *slot = idx % d;
            idx /= d;
        }
        p
    }

    pub fn path_p0(&self, idx: usize) -> PathIndex {
        let n1 = self.count_p1();
        let mut p = vec![idx / n1];
        p.extend(self.path_p1(idx % n1));
        PathIndex(p)
    }

    /// First layer `l` where a unit of layer `l-1` feeds the bias coordinate of layer `l`.
    pub fn invalid_transition(&self, p: &PathIndex) -> Option<usize> {
        (1..self.depth()).find(|&l| self.is_bias(l, p.0[l]) && !self.is_bias(l - 1, p.0[l - 1]))
    }

    pub fn is_valid(&self, p: &PathIndex) -> bool {
        self.invalid_transition(p).is_none()
    }
}

/// Augmented weight matrices `W~_1 .. W~_L` of a plain dense network.
#[derive(Debug, Clone)]
struct Augmented {
    layout: PathLayout,
    weights: Vec<Array2<f64>>,
    heads: Array2<f64>,
}

impl Augmented {
    fn new(net: &Network, cap: u128) -> Result<Self> {
        let layout = enumerate_paths_with_cap(net, cap)?;
        let depth = layout.depth();
        let weights = net
            .affine_layers()
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let l = i + 1;
                let (rows, cols) = (layout.dims[l], layout.dims[l - 1]);
                let mut w = Array2::zeros((rows, cols));
                w.slice_mut(ndarray::s![..a.out_dim(), ..a.in_dim()])
                    .assign(&a.weight);
                w.slice_mut(ndarray::s![..a.out_dim(), a.in_dim()])
                    .assign(&a.bias);
                if l < depth {
                    w[[a.out_dim(), a.in_dim()]] = 1.0;
                }
                w
            })
            .collect();
        Ok(Self {
            layout,
            weights,
            heads: net.heads.clone(),
        })
    }

    /// `y[p_L] * prod_{l >= from} W~_l[p_l, p_{l-1}]` for a full path.
    fn weight_product(&self, class: usize, p: &[usize], from: usize) -> f64 {
        let depth = self.layout.depth();
        let mut w = self.heads[[class, p[depth]]];
        for l in from..=depth {
            w *= self.weights[l - 1][[p[l], p[l - 1]]];
        }
        w
    }
}

/// Closed-form path counts for a plain dense network, checked against `cap`.
pub fn enumerate_paths_with_cap(net: &Network, cap: u128) -> Result<PathLayout> {
    net.ensure_valid()?;
    if !net.is_plain_dense() {
        return Err(Error::OracleUnsupported(
            "expected alternating Affine/Gate stages".into(),
        ));
    }
    let mut widths = vec![net.input_shape.numel()];
    widths.extend(net.gate_widths()?);
    let last = widths.len() - 1;
    let count = widths
        .iter()
        .enumerate()
        .map(|(l, &d)| if l < last { d as u128 + 1 } else { d as u128 })
        .product::<u128>();
    if count > cap {
        return Err(Error::OracleTooLarge { count, cap });
    }
    Ok(PathLayout::from_widths(&widths))
}

pub fn enumerate_paths(net: &Network) -> Result<PathLayout> {
    enumerate_paths_with_cap(net, DEFAULT_PATH_CAP)
}

fn check_class(net: &Network, class: usize) -> Result<()> {
    if class >= net.num_classes() {
        return Err(Error::Index {
            what: "class",
            index: class,
            bound: net.num_classes(),
        });
    }
    Ok(())
}

fn check_path(layout: &PathLayout, p: &PathIndex) -> Result<()> {
    if p.0.len() != layout.dims.len() {
        return Err(Error::Shape {
            what: "path length".into(),
            expected: layout.dims.len(),
            found: p.0.len(),
        });
    }
    for (l, (&pl, &d)) in p.0.iter().zip(&layout.dims).enumerate() {
        if pl >= d {
            return Err(Error::Index {
                what: if l == 0 {
                    "input coordinate"
                } else {
                    "path coordinate"
                },
                index: pl,
                bound: d,
            });
        }
    }
    Ok(())
}

/// Path weight `omega_p`; zero for paths with a unit-to-bias transition.
pub fn omega(net: &Network, class: usize, p: &PathIndex) -> Result<f64> {
    check_class(net, class)?;
    let aug = Augmented::new(net, u128::MAX)?;
    check_path(&aug.layout, p)?;
    Ok(aug.weight_product(class, &p.0, 1))
}

/// Like [`omega`] but rejects unit-to-bias transitions instead of returning zero.
pub fn omega_strict(net: &Network, class: usize, p: &PathIndex) -> Result<f64> {
    let layout = enumerate_paths_with_cap(net, u128::MAX)?;
    check_path(&layout, p)?;
    if let Some(layer) = layout.invalid_transition(p) {
        return Err(Error::InvalidTransition { layer });
    }
    omega(net, class, p)
}

/// All path weights of one head, in `P0` order, bound to the network by a fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub layout: PathLayout,
    pub class: usize,
    pub omega: Vec<f64>,
    pub net_fingerprint: u64,
}

/// Hash of every weight bit pattern and the architecture.
pub fn fingerprint(net: &Network) -> u64 {
    let mut h = DefaultHasher::new();
    net.input_shape.hash(&mut h);
    for a in net.affine_layers() {
        a.weight.shape().hash(&mut h);
        for v in a.weight.iter().chain(a.bias.iter()) {
            v.to_bits().hash(&mut h);
        }
    }
    net.heads.shape().hash(&mut h);
    for v in net.heads.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl PathTable {
    pub fn build(net: &Network, class: usize) -> Result<Self> {
        Self::build_with_cap(net, class, DEFAULT_PATH_CAP)
    }

    pub fn build_with_cap(net: &Network, class: usize, cap: u128) -> Result<Self> {
        check_class(net, class)?;
        let aug = Augmented::new(net, cap)?;
        let layout = aug.layout.clone();
        let omega = (0..layout.count_p0())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| aug.weight_product(class, &layout.path_p0(i).0, 1))
            .collect();
        Ok(Self {
            layout,
            class,
            omega,
            net_fingerprint: fingerprint(net),
        })
    }

    /// Recomputes every `omega_p` from `net` and compares bit patterns.
    pub fn matches(&self, net: &Network) -> bool {
        if fingerprint(net) != self.net_fingerprint {
            return false;
        }
        match Self::build_with_cap(net, self.class, u128::MAX) {
            Ok(fresh) => {
                fresh.layout == self.layout
                    && fresh
                        .omega
                        .iter()
                        .zip(&self.omega)
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            }
            Err(_) => false,
        }
    }
}

/// Gate vectors extended by the always-on bias coordinate on layers `1..L-1`.
pub fn augment_gates(gates: &[Array1<f64>]) -> Vec<Array1<f64>> {
    let last = gates.len().saturating_sub(1);
    gates
        .iter()
        .enumerate()
        .map(|(l, g)| {
            if l < last {
                let mut a = Array1::ones(g.len() + 1);
                a.slice_mut(ndarray::s![..g.len()]).assign(g);
                a
            } else {
                g.clone()
            }
        })
        .collect()
}

/// Path activity `prod_l lambda~_l[p_l]` for `tail = (p_1, .., p_L)`;
/// `gates` must already carry the bias coordinates.
pub fn path_activity(gates: &[Array1<f64>], tail: &[usize]) -> f64 {
    gates.iter().zip(tail).map(|(g, &p)| g[p]).product()
}

/// A tensor value over `P1`, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub layout: PathLayout,
    pub values: Vec<f64>,
}

impl TensorField {
    pub fn zeros(layout: &PathLayout) -> Self {
        Self {
            layout: layout.clone(),
            values: vec![0.0; layout.count_p1()],
        }
    }

    /// One at a single path, zero elsewhere.
    pub fn indicator(layout: &PathLayout, tail: &[usize]) -> Self {
        let mut t = Self::zeros(layout);
        t.values[layout.index_p1(tail)] = 1.0;
        t
    }

    /// Rank-1 lift of per-layer gate values (bias coordinates added here).
    pub fn from_gates(layout: &PathLayout, gates: &[Array1<f64>]) -> Result<Self> {
        let widths = &layout.widths[1..];
        if gates.len() != widths.len() || gates.iter().zip(widths).any(|(g, w)| g.len() != *w) {
            return Err(Error::Shape {
                what: "gate vectors for tensor lift".into(),
                expected: widths.iter().sum(),
                found: gates.iter().map(|g| g.len()).sum(),
            });
        }
        let aug = augment_gates(gates);
        let values = (0..layout.count_p1())
            .map(|i| path_activity(&aug, &layout.path_p1(i)))
            .collect();
        Ok(Self {
            layout: layout.clone(),
            values,
        })
    }

    /// Lift of the gates `spec` assigns to `x`'s hard forward trace.
    pub fn for_input(net: &Network, x: ArrayView1<f64>, spec: &GatingSpec) -> Result<Self> {
        let layout = enumerate_paths(net)?;
        let trace = net.forward(x)?;
        Self::from_gates(&layout, &gate_values(net, &trace, spec)?)
    }

    fn check(&self, layout: &PathLayout) -> Result<()> {
        if &self.layout != layout || self.values.len() != layout.count_p1() {
            return Err(Error::Shape {
                what: "tensor field layout".into(),
                expected: layout.count_p1(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

fn augmented_input(x: ArrayView1<f64>) -> Array1<f64> {
    let mut a = Array1::ones(x.len() + 1);
    a.slice_mut(ndarray::s![..x.len()]).assign(&x);
    a
}

fn check_input(layout: &PathLayout, x: ArrayView1<f64>) -> Result<()> {
    if x.len() != layout.widths[0] {
        return Err(Error::InputShape {
            expected: layout.widths[0],
            found: x.len(),
        });
    }
    Ok(())
}

/// Feature vector `phi_tau(x)_p = tau_{p|1} * x~[p_0]` over `P0`.
pub fn feature_map(layout: &PathLayout, x: ArrayView1<f64>, tau: &TensorField) -> Result<Vec<f64>> {
    check_input(layout, x)?;
    tau.check(layout)?;
    let xa = augmented_input(x);
    let mut phi = Vec::with_capacity(layout.count_p0());
    for xi in xa.iter() {
        phi.extend(tau.values.iter().map(|t| t * xi));
    }
    Ok(phi)
}

/// `v_tau`: sum over `P1` of `tau_p` times the atom of path `p`.
pub fn path_pullback(net: &Network, class: usize, tau: &TensorField) -> Result<PullbackVector> {
    check_class(net, class)?;
    let aug = Augmented::new(net, DEFAULT_PATH_CAP)?;
    tau.check(&aug.layout)?;
    let layout = &aug.layout;
    let d0 = layout.dims[0];
    let n1 = layout.count_p1();
    let partials: Vec<Array1<f64>> = (0..n1.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = Array1::<f64>::zeros(d0);
            let mut full = vec![0usize; layout.dims.len()];
            for q in chunk * CHUNK..((chunk + 1) * CHUNK).min(n1) {
                let t = tau.values[q];
                if t == 0.0 {
                    continue;
                }
                full[1..].copy_from_slice(&layout.path_p1(q));
                let coef = t * aug.weight_product(class, &full, 2);
                acc.scaled_add(coef, &aug.weights[0].row(full[1]));
            }
            acc
        })
        .collect();
    let mut v = Array1::<f64>::zeros(d0);
    for p in &partials {
        v += p;
    }
    let n = d0 - 1;
    Ok(PullbackVector {
        vector: v.slice(ndarray::s![..n]).to_owned(),
        offset: v[n],
        target: PullbackTarget::Head(class),
        gating: None,
    })
}

/// `f_tau(x) = <v_tau, x~>`.
pub fn path_function(
    net: &Network,
    class: usize,
    x: ArrayView1<f64>,
    tau: &TensorField,
) -> Result<f64> {
    let layout = enumerate_paths(net)?;
    check_input(&layout, x)?;
    Ok(path_pullback(net, class, tau)?.evaluate(x))
}

/// `<phi_tau(x), omega>` accumulated path by path.
pub fn path_feature_value(table: &PathTable, x: ArrayView1<f64>, tau: &TensorField) -> Result<f64> {
    let phi = feature_map(&table.layout, x, tau)?;
    Ok(chunked_dot(&phi, &table.omega))
}

/// `<phi_tau(x), phi_sigma(x')>` by explicit enumeration.
pub fn feature_kernel(
    layout: &PathLayout,
    x: ArrayView1<f64>,
    tau: &TensorField,
    x2: ArrayView1<f64>,
    tau2: &TensorField,
) -> Result<f64> {
    let a = feature_map(layout, x, tau)?;
    let b = feature_map(layout, x2, tau2)?;
    Ok(chunked_dot(&a, &b))
}

fn chunked_dot(a: &[f64], b: &[f64]) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum())
        .collect();
    partials.iter().sum()
}

/// Product kernel `<x~, x~'> * prod_l <lambda~_l(x), lambda~_l(x')>`,
/// with gates from each input's hard forward trace.
pub fn path_kernel(
    net: &Network,
    x: ArrayView1<f64>,
    x2: ArrayView1<f64>,
    spec: &GatingSpec,
) -> Result<f64> {
    let ta = net.forward(x)?;
    let tb = net.forward(x2)?;
    let ga = augment_gates(&gate_values(net, &ta, spec)?);
    let gb = augment_gates(&gate_values(net, &tb, spec)?);
    let mut k = augmented_input(x).dot(&augmented_input(x2));
    for (a, b) in ga.iter().zip(&gb) {
        k *= a.dot(b);
    }
    Ok(k)
}

/// Number of backbone parameters (weights and biases, heads excluded).
pub fn backbone_parameter_count(net: &Network) -> usize {
    net.affine_layers()
        .iter()
        .map(|a| a.weight.len() + a.bias.len())
        .sum()
}

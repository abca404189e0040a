//! Linear probing of trained networks.
//!
//! The linearized network is an affine map `x ↦ Wᵀx + b`. Column `i` of `W`
//! is recovered as the input gradient of linear logit `i`, and `b` as the
//! output at the zero input. Class structure is then read off the cosine
//! correlations of `W`'s columns, and in feature space from class-wise
//! feature centres.

use std::collections::VecDeque;

use crate::autodiff::Tape;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::tensor::Tensor;

/// Columns with norm at or below this cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// The `D_input × D_output` weight matrix of a linearized network.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    /// Row-major `D_input × D_output`.
    pub values: Tensor,
    pub input_dims: [usize; 3],
    pub class_labels: Vec<String>,
}

impl WeightMatrix {
    pub fn input_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        let k = self.num_classes();
        self.values.data().iter().skip(class).step_by(k).copied().collect()
    }

    /// `Wᵀx + b` for one flattened input.
    pub fn apply(&self, x: &[f64], bias: &BiasVector) -> Vec<f64> {
        let k = self.num_classes();
        let mut out = bias.values.clone();
        for (row, &xv) in self.values.data().chunks_exact(k).zip(x) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xv;
            }
        }
        out
    }
}

/// Output of the linearized network at the zero input.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVector {
    pub values: Vec<f64>,
}

/// Runs the per-class backward passes on a linear network.
///
/// `probe` is any single input (`C×H×W` or `1×C×H×W`); linearity makes the
/// result independent of it.
pub fn extract_weight_matrix(net_linear: &Network, probe: &Tensor) -> Result<(WeightMatrix, BiasVector)> {
    if let Some(layer) = net_linear.first_nonlinear() {
        return Err(Error::NonLinearProbe(layer.to_string()));
    }
    let [c, h, w] = net_linear.input_dims();
    let d_in = c * h * w;
    if probe.numel() != d_in {
        return Err(Error::shape("probe", probe.shape(), &[c, h, w]));
    }
    let probe = probe.clone().reshape([1, c, h, w])?;
    let k = net_linear.num_classes();

    let mut tape = Tape::new();
    let x = tape.leaf(probe, true);
    let trace = net_linear.trace(&mut tape, x, Mode::Eval, false)?;
    let mut values = vec![0.0; d_in * k];
    for class in 0..k {
        tape.zero_grad(x)?;
        let mut seed = Tensor::zeros([1, k]);
        seed.data_mut()[class] = 1.0;
        tape.backward_seeded(trace.logits, &seed)?;
        let grad = tape
            .grad(x)?
            .ok_or_else(|| Error::contract("input received no gradient"))?;
        for (row, &g) in grad.data().iter().enumerate() {
            values[row * k + class] = g;
        }
    }
    let values = Tensor::new([d_in, k], values)?;
    if !values.is_finite() {
        return Err(Error::NonFinite("extracted weight matrix".into()));
    }
    let bias = net_linear.infer(&Tensor::zeros([1, c, h, w]))?.into_data();
    Ok((
        WeightMatrix {
            values,
            input_dims: [c, h, w],
            class_labels: default_labels(k),
        },
        BiasVector { values: bias },
    ))
}

/// Pairwise cosines of the class columns of `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    /// Row-major `K×K`.
    pub values: Tensor,
    pub class_labels: Vec<String>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.size() + j]
    }
}

pub fn correlation_matrix(weights: &WeightMatrix) -> Result<CorrelationMatrix> {
    let k = weights.num_classes();
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|class| {
            let col = weights.column(class);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= DEGENERATE_NORM || !norm.is_finite() {
                return Err(Error::DegenerateClass { class, norm });
            }
            Ok(col.into_iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        values[i * k + i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            let c = dot.clamp(-1.0, 1.0);
            values[i * k + j] = c;
            values[j * k + i] = c;
        }
    }
    Ok(CorrelationMatrix {
        values: Tensor::new([k, k], values)?,
        class_labels: weights.class_labels.clone(),
    })
}

/// Entry-wise `±1` approximation of a correlation matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMatrix {
    size: usize,
    values: Vec<i8>,
}

impl SignMatrix {
    /// Builds a sign matrix, forcing the diagonal to `+1`. Fails unless the
    /// entries are `±1` and symmetric.
    pub fn new(size: usize, mut values: Vec<i8>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::shape("sign matrix", &[values.len()], &[size, size]));
        }
        for i in 0..size {
            values[i * size + i] = 1;
            for j in 0..size {
                let v = values[i * size + j];
                if (v != 1 && v != -1) || v != values[j * size + i] {
                    return Err(Error::contract(format!(
                        "sign matrix entry ({i},{j}) = {v} is not a symmetric ±1"
                    )));
                }
            }
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// Applies a relabelling: entry `(perm[i], perm[j])` of the result is
    /// entry `(i, j)` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> SignMatrix {
        let n = self.size;
        let mut values = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        SignMatrix { size: n, values }
    }
}

/// `+1` where the correlation is strictly positive, `−1` otherwise.
pub fn sign_approximation(c: &CorrelationMatrix) -> SignMatrix {
    let k = c.size();
    let mut values: Vec<i8> = c.values.data().iter().map(|&v| if v > 0.0 { 1 } else { -1 }).collect();
    for i in 0..k {
        values[i * k + i] = 1;
    }
    SignMatrix { size: k, values }
}

/// Superclass groups over fine-class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyPartition {
    groups: Vec<Vec<usize>>,
    coarse_of: Vec<usize>,
}

impl HierarchyPartition {
    /// Validates that `groups` are non-empty, disjoint and cover
    /// `0..num_classes`. Groups keep the given order.
    pub fn new(groups: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let mut coarse_of = vec![usize::MAX; num_classes];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::contract(format!("group {g} is empty")));
            }
            for &m in members {
                if m >= num_classes || coarse_of[m] != usize::MAX {
                    return Err(Error::contract(format!("class {m} is out of range or in two groups")));
                }
                coarse_of[m] = g;
            }
        }
        if let Some(missing) = coarse_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::contract(format!("class {missing} is in no group")));
        }
        Ok(Self { groups, coarse_of })
    }

    /// Groups from a fine→coarse map; group `g` holds the classes mapped to `g`.
    pub fn from_coarse_map(coarse_of: &[usize]) -> Result<Self> {
        let count = coarse_of.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); count];
        for (fine, &coarse) in coarse_of.iter().enumerate() {
            groups[coarse].push(fine);
        }
        Self::new(groups, coarse_of.len())
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.coarse_of.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn coarse_of(&self, fine: usize) -> Option<usize> {
        self.coarse_of.get(fine).copied()
    }

    pub fn coarse_map(&self) -> &[usize] {
        &self.coarse_of
    }

    /// A single group, or nothing but singletons.
    pub fn is_degenerate(&self) -> bool {
        self.groups.len() == 1 || self.groups.len() == self.coarse_of.len()
    }

    /// Same grouping regardless of group order or member order.
    pub fn same_grouping(&self, other: &HierarchyPartition) -> bool {
        let canon = |p: &HierarchyPartition| {
            let mut g: Vec<Vec<usize>> = p
                .groups
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    m.sort_unstable();
                    m
                })
                .collect();
            g.sort();
            g
        };
        canon(self) == canon(other)
    }

    /// One line per group, members ascending and comma separated.
    pub fn to_text(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

/// Connected components of the graph with an edge wherever `C_op` is `+1`.
///
/// Members are ascending; groups are ordered by their smallest member.
pub fn extract_hierarchy(c_op: &SignMatrix) -> HierarchyPartition {
    let n = c_op.size();
    let mut component = vec![usize::MAX; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut members = vec![start];
        component[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let fresh: Vec<usize> = (0..n)
                .filter(|&j| j != i && c_op.get(i, j) == 1 && component[j] == usize::MAX)
                .collect();
            for j in fresh {
                component[j] = id;
                members.push(j);
                queue.push_back(j);
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    HierarchyPartition::new(groups, n).expect("components partition the classes")
}

/// Pairs placed in one group although their sign entry is `−1`.
pub fn inconsistency_count(c_op: &SignMatrix, partition: &HierarchyPartition) -> usize {
    partition
        .groups()
        .iter()
        .map(|g| {
            let mut bad = 0;
            for (a, &i) in g.iter().enumerate() {
                for &j in &g[a + 1..] {
                    if c_op.get(i, j) == -1 {
                        bad += 1;
                    }
                }
            }
            bad
        })
        .sum()
}

/// Mean within-group minus mean across-group correlation (off-diagonal
/// entries only). `None` when either set of pairs is empty.
pub fn clustering_gap(c: &CorrelationMatrix, partition: &HierarchyPartition) -> Option<f64> {
    let k = c.size();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            if partition.coarse_of(i) == partition.coarse_of(j) {
                within += c.get(i, j);
                nw += 1;
            } else {
                across += c.get(i, j);
                na += 1;
            }
        }
    }
    (nw > 0 && na > 0).then(|| within / nw as f64 - across / na as f64)
}

/// Mean penultimate-layer feature per class.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCenters {
    /// Row-major `num_classes × feature_dim`.
    pub centers: Tensor,
    pub counts: Vec<usize>,
}

impl FeatureCenters {
    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.centers.data()[class * d..(class + 1) * d]
    }
}

/// Class-wise means of eval-mode features over a labelled stream.
pub fn feature_centers(net: &Network, data: impl IntoIterator<Item = Batch>) -> Result<FeatureCenters> {
    let k = net.num_classes();
    let d = net.feature_dim();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for batch in data {
        let feats = net.features(&batch.inputs)?;
        for (row, &label) in feats.data().chunks_exact(d).zip(&batch.labels) {
            if label >= k {
                return Err(Error::Label { label, classes: k });
            }
            counts[label] += 1;
            for (s, v) in sums[label * d..(label + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass(missing));
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= n as f64;
        }
    }
    Ok(FeatureCenters {
        centers: Tensor::new([k, d], sums)?,
        counts,
    })
}

/// Centre distances normalized by each row's largest distance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDistanceMatrix {
    /// Row-major `K×K`; not symmetric in general.
    pub values: Tensor,
}

impl FeatureDistanceMatrix {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values.data()[a * self.size() + b]
    }
}

pub fn feature_distance_matrix(z: &FeatureCenters) -> Result<FeatureDistanceMatrix> {
    let k = z.num_classes();
    if k < 2 {
        return Err(Error::contract("feature distances need at least two classes"));
    }
    let mut values = vec![0.0; k * k];
    for a in 0..k {
        let row: Vec<f64> = (0..k)
            .map(|b| {
                z.center(a)
                    .iter()
                    .zip(z.center(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let max = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .fold(0.0f64, |m, (_, &v)| m.max(v));
        if max <= DEGENERATE_NORM {
            return Err(Error::DegenerateCenters(a));
        }
        for (b, v) in row.into_iter().enumerate() {
            values[a * k + b] = if a == b { 0.0 } else { v / max };
        }
    }
    Ok(FeatureDistanceMatrix {
        values: Tensor::new([k, k], values)?,
    })
}

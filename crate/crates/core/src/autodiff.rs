//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node whose inputs already sit on the tape, so node
//! order is a topological order and the backward pass simply walks the tape
//! from the root towards index 0. Gradients persist only on leaves and
//! accumulate across backward calls until [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics measured by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

/// How the group centre of the clustering regularizer is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroupCenter {
    /// One centre per group: mean over the batch and the group's classes.
    Batch,
    /// One centre per group and example: mean over the group's classes only.
    #[default]
    PerExample,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inputs: usize,
        outputs: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        filters: usize,
        cols: Vec<f64>,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ClusterReg {
        logits: usize,
        groups: Vec<Vec<usize>>,
        center: GroupCenter,
        unit: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations for one computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node. Handles from before the reset become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>> {
        let i = self.check(v)?;
        Ok(self.grads[i].as_ref())
    }

    pub fn zero_grad(&mut self, v: Var) -> Result<()> {
        let i = self.check(v)?;
        self.grads[i] = None;
        Ok(())
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.node(ia).value.data(),
            false,
            self.node(ib).value.data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            rg,
            Op::MatMul { a: ia, b: ib, m, k, n },
        ))
    }

    /// Dense layer: `x·wᵀ + b` with `x: N×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (sx, sw, sb) = (
            self.node(ix).value.shape(),
            self.node(iw).value.shape(),
            self.node(ib).value.shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("linear bias", sb, &sw[..1]));
        }
        let (rows, inputs, outputs) = (sx[0], sx[1], sw[0]);
        let bias = self.node(ib).value.data();
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            rows,
            inputs,
            outputs,
            self.node(ix).value.data(),
            false,
            self.node(iw).value.data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.grad_flag(&[ix, iw, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, outputs], out),
            rg,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
                rows,
                inputs,
                outputs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, rg, Op::Add { a: ia, b: ib }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.node(ix).value.map(|v| v * factor);
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, rg, Op::Scale { x: ix, factor }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let total = self.node(ix).value.data().iter().sum();
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum { x: ix }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.node(ix).value.clone().reshape(shape.to_vec())?;
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, rg, Op::Reshape { x: ix }))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape();
        let rows = shape[0];
        let cols = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[rows, cols])
    }

    /// Cross-correlation of `x: N×C×H×W` with `w: F×C×kh×kw` plus optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.node(ix).value.shape(), self.node(iw).value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d kernel exceeds padded input", sx, sw));
        }
        let filters = sw[0];
        if let Some(ib) = ib {
            let sb = self.node(ib).value.shape();
            if sb != [filters] {
                return Err(Error::shape("conv2d bias", sb, &[filters]));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.node(ix).value.data(), &geom);
        let p = geom.patch_count();
        let mut tmp = vec![0.0; filters * p];
        kernels::gemm(
            filters,
            geom.patch_len(),
            p,
            self.node(iw).value.data(),
            false,
            &cols,
            false,
            0.0,
            &mut tmp,
        );
        let ohw = oh * ow;
        let mut out = vec![0.0; geom.batch * filters * ohw];
        let bias = ib.map(|ib| self.node(ib).value.data());
        for n in 0..geom.batch {
            for f in 0..filters {
                let shift = bias.map_or(0.0, |b| b[f]);
                let src = &tmp[f * p + n * ohw..][..ohw];
                let dst = &mut out[(n * filters + f) * ohw..][..ohw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        let rg = self.grad_flag(&inputs);
        let value = Tensor::from_parts(vec![geom.batch, filters, oh, ow], out);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                x: ix,
                w: iw,
                b: ib,
                geom,
                filters,
                cols: if rg { cols } else { Vec::new() },
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.node(ix).value.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, rg, Op::Relu { x: ix }))
    }

    fn pool_dims(&self, ix: usize, k: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.node(ix).value.shape();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::shape(op, s, &[k, k]));
        }
        Ok((s[0] * s[1], s[2], s[3], vec![s[0], s[1], s[2] / k, s[3] / k]))
    }

    /// Max pooling with window and stride `k`; the window must tile the input.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (planes, h, w, shape) = self.pool_dims(ix, k, "max_pool2d")?;
        let (out, argmax) = kernels::max_pool(self.node(ix).value.data(), planes, h, w, k);
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::MaxPool { x: ix, argmax }))
    }

    /// Average pooling with window and stride `k`; the window must tile the input.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (planes, h, w, shape) = self.pool_dims(ix, k, "avg_pool2d")?;
        let out = kernels::avg_pool(self.node(ix).value.data(), planes, h, w, k);
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::AvgPool { x: ix, planes, h, w, k },
        ))
    }

    /// Batch normalization over axis 1 of an `N×C` or `N×C×H×W` input.
    ///
    /// With [`NormStats::Batch`] the measured statistics are returned so the
    /// caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.node(ix).value.shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape("batch_norm", &shape, &[]));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for i in [ig, ib] {
            let s = self.node(i).value.shape();
            if s != [c] {
                return Err(Error::shape("batch_norm affine", s, &[c]));
            }
        }
        let x_data = self.node(ix).value.data();
        let count = (n * inner) as f64;
        let (mean, var, measured) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(n));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        acc += x_data[(s * c + ch) * inner..][..inner].iter().sum::<f64>();
                    }
                    let mu = acc / count;
                    let mut sq = 0.0;
                    for s in 0..n {
                        for v in &x_data[(s * c + ch) * inner..][..inner] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let measured = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(measured))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[mean.len()], &[c]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.node(ig).value.data();
        let b = self.node(ib).value.data();
        let mut xhat = vec![0.0; x_data.len()];
        let mut out = vec![0.0; x_data.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for j in off..off + inner {
                    let h = (x_data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let rg = self.grad_flag(&[ix, ig, ib]);
        let var_out = self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                channels: c,
                inner,
                xhat,
                inv_std,
                batch_stats: measured.is_some(),
            },
        );
        Ok((var_out, measured))
    }

    /// Mean softmax cross-entropy of `logits: N×K` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let s = self.node(il).value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let data = self.node(il).value.data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let z = &data[row * k..(row + 1) * k];
            let (arg, max) =
                z.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) },
                );
            let mut rest = 0.0;
            for (i, &v) in z.iter().enumerate() {
                let e = (v - max).exp();
                probs[row * k + i] = e;
                if i != arg {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for p in &mut probs[row * k..(row + 1) * k] {
                *p /= denom;
            }
            total += (max - z[label]) + rest.ln_1p();
        }
        let rg = self.grad_flag(&[il]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            rg,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Superclass clustering penalty on `logits: N×K`.
    ///
    /// For each group `g` with centre `F_g`, adds `Σ_{i∈g} ‖logits[:, i] − F_g‖₂`
    /// where the norm runs over the batch axis.
    pub fn cluster_reg(&mut self, logits: Var, groups: &[Vec<usize>], center: GroupCenter) -> Result<Var> {
        let il = self.check(logits)?;
        let s = self.node(il).value.shape();
        if s.len() != 2 {
            return Err(Error::shape("cluster_reg", s, &[]));
        }
        let (n, k) = (s[0], s[1]);
        let mut seen = vec![false; k];
        for &c in groups.iter().flatten() {
            if c >= k || std::mem::replace(&mut seen[c], true) {
                return Err(Error::contract(format!(
                    "partition does not match {k} classes (class {c} out of range or repeated)"
                )));
            }
        }
        if groups.iter().any(|g| g.is_empty()) || seen.iter().any(|s| !s) {
            return Err(Error::contract(format!("partition does not cover all {k} classes")));
        }
        let data = self.node(il).value.data();
        let mut unit = vec![0.0; n * k];
        let mut total = 0.0;
        for group in groups {
            let centers = group_centers(data, n, k, group, center);
            for &c in group {
                let mut sq = 0.0;
                for row in 0..n {
                    let d = data[row * k + c] - centers[row];
                    sq += d * d;
                }
                let r = sq.sqrt();
                total += r;
                if r > 0.0 {
                    for row in 0..n {
                        unit[row * k + c] = (data[row * k + c] - centers[row]) / r;
                    }
                }
            }
        }
        let rg = self.grad_flag(&[il]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::ClusterReg {
                logits: il,
                groups: groups.to_vec(),
                center,
                unit,
            },
        ))
    }

    /// Backpropagates from a scalar root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let i = self.check(root)?;
        let shape = self.nodes[i].value.shape();
        if self.nodes[i].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {shape:?}"
            )));
        }
        self.run_backward(i, vec![1.0])
    }

    /// Backpropagates the vector-Jacobian product seeded with `seed`.
    pub fn backward_seeded(&mut self, root: Var, seed: &Tensor) -> Result<()> {
        let i = self.check(root)?;
        let shape = self.nodes[i].value.shape();
        if seed.shape() != shape {
            return Err(Error::shape("backward seed", seed.shape(), shape));
        }
        self.run_backward(i, seed.data().to_vec())
    }

    fn run_backward(&mut self, root: usize, seed: Vec<f64>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(root + 1, || None);
        pending[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            for (input, contribution) in self.vjp(id, &g) {
                match &mut pending[input] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contribution) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to its inputs given upstream `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let wants = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| self.nodes[i].value.data();
        let mut out = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(b), true, 0.0, &mut da);
                    out.push((a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(a), true, g, false, 0.0, &mut db);
                    out.push((b, db));
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inputs,
                outputs,
            } => {
                if wants(x) {
                    let mut dx = vec![0.0; rows * inputs];
                    kernels::gemm(rows, outputs, inputs, g, false, val(w), false, 0.0, &mut dx);
                    out.push((x, dx));
                }
                if wants(w) {
                    let mut dw = vec![0.0; outputs * inputs];
                    kernels::gemm(outputs, rows, inputs, g, true, val(x), false, 0.0, &mut dw);
                    out.push((w, dw));
                }
                if wants(b) {
                    let mut db = vec![0.0; outputs];
                    for row in g.chunks_exact(outputs) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    out.push((a, g.to_vec()));
                }
                if wants(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Scale { x, factor } => {
                out.push((x, g.iter().map(|v| v * factor).collect()));
            }
            &Op::Sum { x } => {
                out.push((x, vec![g[0]; self.nodes[x].value.numel()]));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            Op::Conv {
                x,
                w,
                b,
                geom,
                filters,
                cols,
            } => {
                let (x, w, filters) = (*x, *w, *filters);
                let p = geom.patch_count();
                let ohw = geom.out_h() * geom.out_w();
                let mut gt = vec![0.0; filters * p];
                for n in 0..geom.batch {
                    for f in 0..filters {
                        gt[f * p + n * ohw..][..ohw].copy_from_slice(&g[(n * filters + f) * ohw..][..ohw]);
                    }
                }
                if wants(w) {
                    let mut dw = vec![0.0; filters * geom.patch_len()];
                    kernels::gemm(filters, p, geom.patch_len(), &gt, false, cols, true, 0.0, &mut dw);
                    out.push((w, dw));
                }
                if let Some(b) = *b {
                    if wants(b) {
                        let db = gt.chunks_exact(p).map(|r| r.iter().sum()).collect();
                        out.push((b, db));
                    }
                }
                if wants(x) {
                    let mut dcols = vec![0.0; geom.patch_len() * p];
                    kernels::gemm(geom.patch_len(), filters, p, val(w), true, &gt, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    out.push((x, dx));
                }
            }
            &Op::Relu { x } => {
                let dx = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                out.push((*x, dx));
            }
            &Op::AvgPool { x, planes, h, w, k } => {
                out.push((x, kernels::avg_pool_backward(g, planes, h, w, k)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                inner,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (c, inner) = (*channels, *inner);
                let n = g.len() / (c * inner);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for j in off..off + inner {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let count = (n * inner) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            for j in off..off + inner {
                                dx[j] = if *batch_stats {
                                    gam[ch] * inv_std[ch] / count * (count * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[j] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * k + l] -= scale;
                }
                out.push((*logits, d));
            }
            Op::ClusterReg {
                logits,
                groups,
                center,
                unit,
            } => {
                let shape = self.nodes[*logits].value.shape();
                let (n, k) = (shape[0], shape[1]);
                let mut d: Vec<f64> = unit.iter().map(|u| u * g[0]).collect();
                for group in groups {
                    match center {
                        GroupCenter::Batch => {
                            let mut s = 0.0;
                            for row in 0..n {
                                for &c in group {
                                    s += unit[row * k + c];
                                }
                            }
                            let shift = g[0] * s / (n * group.len()) as f64;
                            for row in 0..n {
                                for &c in group {
                                    d[row * k + c] -= shift;
                                }
                            }
                        }
                        GroupCenter::PerExample => {
                            for row in 0..n {
                                let s: f64 = group.iter().map(|&c| unit[row * k + c]).sum();
                                let shift = g[0] * s / group.len() as f64;
                                for &c in group {
                                    d[row * k + c] -= shift;
                                }
                            }
                        }
                    }
                }
                out.push((*logits, d));
            }
        }
        out.retain(|(i, _)| wants(*i));
        out
    }
}

/// Per-row group centres (the batch variant repeats one value per row).
pub(crate) fn group_centers(data: &[f64], n: usize, k: usize, group: &[usize], center: GroupCenter) -> Vec<f64> {
    match center {
        GroupCenter::Batch => {
            let mut acc = 0.0;
            for row in 0..n {
                for &c in group {
                    acc += data[row * k + c];
                }
            }
            vec![acc / (n * group.len()) as f64; n]
        }
        GroupCenter::PerExample => (0..n)
            .map(|row| group.iter().map(|&c| data[row * k + c]).sum::<f64>() / group.len() as f64)
            .collect(),
    }
}

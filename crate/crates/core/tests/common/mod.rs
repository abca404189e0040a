//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod cli;

use hprobe::autodiff::{GroupCenter, NormStats, Tape, Var};
use hprobe::probe::{CorrelationMatrix, HierarchyPartition, WeightMatrix};
use hprobe::tensor::Tensor;
use hprobe::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.05, 1)` and random sign, safely away from
/// the ReLU kink.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart in random order, so no pooling window
/// has a near tie.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let n = tape.value(out)?.numel();
    if n == 1 {
        return Ok(out);
    }
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.leaf(weights.clone(), false);
    tape.matmul(flat, w)
}

/// Largest relative error `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂)` over the inputs
/// between tape gradients and central finite differences of a random
/// projection of the op output.
pub fn grad_check(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let n = tape.value(out).unwrap().numel();
    let weights = Tensor::from_fn([n, 1], |_| rng.random_range(-1.0..1.0));
    let root = project(&mut tape, out, &weights).unwrap();
    tape.backward(root).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .unwrap()
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let root = project(&mut tape, out, &weights).unwrap();
        tape.value(root).unwrap().data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for e in 0..input.numel() {
            xs[i].data_mut()[e] = input.data()[e] + FD_STEP;
            let plus = eval(&xs);
            xs[i].data_mut()[e] = input.data()[e] - FD_STEP;
            let minus = eval(&xs);
            xs[i].data_mut()[e] = input.data()[e];
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[e];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff_sq.sqrt() / scale);
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Random groups covering `0..k`, none empty.
pub fn random_groups(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<usize>> {
    let g = rng.random_range(1..=k);
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(rng);
    let mut groups = vec![Vec::new(); g];
    for (i, &c) in classes.iter().enumerate() {
        let slot = if i < g { i } else { rng.random_range(0..g) };
        groups[slot].push(c);
    }
    groups
}

fn matmul_case(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    let inputs = [uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)];
    grad_check(rng, &inputs, &|t, v| t.matmul(v[0], v[1]))
}

fn linear_case(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, i, o) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 5));
    let inputs = [
        uniform(rng, &[rows, i], -1.0, 1.0),
        uniform(rng, &[o, i], -1.0, 1.0),
        uniform(rng, &[o], -1.0, 1.0),
    ];
    grad_check(rng, &inputs, &|t, v| t.linear(v[0], v[1], v[2]))
}

fn add_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let inputs = [uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)];
    grad_check(rng, &inputs, &|t, v| t.add(v[0], v[1]))
}

fn scale_case(rng: &mut ChaCha8Rng) -> f64 {
    let factor = rng.random_range(-3.0..3.0);
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let inputs = [uniform(rng, &shape, -1.0, 1.0)];
    grad_check(rng, &inputs, &move |t, v| t.scale(v[0], factor))
}

fn sum_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3)];
    let inputs = [uniform(rng, &shape, -1.0, 1.0)];
    grad_check(rng, &inputs, &|t, v| t.sum(v[0]))
}

fn reshape_case(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b, c) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let inputs = [uniform(rng, &[a, b, c], -1.0, 1.0)];
    grad_check(rng, &inputs, &move |t, v| t.reshape(v[0], &[c, a * b]))
}

fn flatten_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let inputs = [uniform(rng, &shape, -1.0, 1.0)];
    grad_check(rng, &inputs, &|t, v| t.flatten(v[0]))
}

fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, f) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let kernel = dim(rng, 1, 3);
    let stride = dim(rng, 1, 2);
    let padding = dim(rng, 0, 2);
    let h = dim(rng, kernel, 6);
    let w = dim(rng, kernel, 6);
    let with_bias = rng.random::<bool>();
    let mut inputs = vec![
        uniform(rng, &[n, c, h, w], -1.0, 1.0),
        uniform(rng, &[f, c, kernel, kernel], -1.0, 1.0),
    ];
    if with_bias {
        inputs.push(uniform(rng, &[f], -1.0, 1.0));
    }
    grad_check(rng, &inputs, &move |t, v| {
        t.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)
    })
}

fn relu_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 6)];
    let inputs = [off_zero(rng, &shape)];
    grad_check(rng, &inputs, &|t, v| t.relu(v[0]))
}

fn max_pool_case(rng: &mut ChaCha8Rng) -> f64 {
    let k = dim(rng, 1, 3);
    let shape = [dim(rng, 1, 2), dim(rng, 1, 2), k * dim(rng, 1, 3), k * dim(rng, 1, 3)];
    let inputs = [distinct(rng, &shape)];
    grad_check(rng, &inputs, &move |t, v| t.max_pool2d(v[0], k))
}

fn avg_pool_case(rng: &mut ChaCha8Rng) -> f64 {
    let k = dim(rng, 1, 3);
    let shape = [dim(rng, 1, 2), dim(rng, 1, 2), k * dim(rng, 1, 3), k * dim(rng, 1, 3)];
    let inputs = [uniform(rng, &shape, -1.0, 1.0)];
    grad_check(rng, &inputs, &move |t, v| t.avg_pool2d(v[0], k))
}

/// At least three values per channel: with two, the batch-normalized output
/// is ±1 up to the epsilon, its input gradient is epsilon-sized and a
/// relative comparison only measures finite-difference roundoff.
fn bn_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (n, c) = (dim(rng, 3, 5), dim(rng, 1, 3));
    if rng.random::<bool>() {
        vec![n, c]
    } else {
        vec![n, c, dim(rng, 1, 3), dim(rng, 1, 3)]
    }
}

fn batch_norm_batch_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = bn_shape(rng);
    let c = shape[1];
    let inputs = [
        uniform(rng, &shape, -1.0, 1.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    grad_check(rng, &inputs, &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], NormStats::Batch)?.0)
    })
}

fn batch_norm_running_case(rng: &mut ChaCha8Rng) -> f64 {
    let shape = bn_shape(rng);
    let c = shape[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let inputs = [
        uniform(rng, &shape, -1.0, 1.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    grad_check(rng, &inputs, &move |t, v| {
        Ok(
            t.batch_norm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var })?
                .0,
        )
    })
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (dim(rng, 1, 6), dim(rng, 2, 6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let inputs = [uniform(rng, &[n, k], -3.0, 3.0)];
    grad_check(rng, &inputs, &move |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn cluster_reg_case(rng: &mut ChaCha8Rng, center: GroupCenter) -> f64 {
    let (n, k) = (dim(rng, 2, 6), dim(rng, 2, 7));
    let groups = random_groups(rng, k);
    let inputs = [uniform(rng, &[n, k], -2.0, 2.0)];
    grad_check(rng, &inputs, &move |t, v| t.cluster_reg(v[0], &groups, center))
}

fn cluster_reg_batch_case(rng: &mut ChaCha8Rng) -> f64 {
    cluster_reg_case(rng, GroupCenter::Batch)
}

fn cluster_reg_example_case(rng: &mut ChaCha8Rng) -> f64 {
    cluster_reg_case(rng, GroupCenter::PerExample)
}

pub const OP_CASES: &[OpCase] = &[
    OpCase {
        name: "matmul",
        run: matmul_case,
    },
    OpCase {
        name: "linear",
        run: linear_case,
    },
    OpCase {
        name: "add",
        run: add_case,
    },
    OpCase {
        name: "scale",
        run: scale_case,
    },
    OpCase {
        name: "sum",
        run: sum_case,
    },
    OpCase {
        name: "reshape",
        run: reshape_case,
    },
    OpCase {
        name: "flatten",
        run: flatten_case,
    },
    OpCase {
        name: "conv2d",
        run: conv_case,
    },
    OpCase {
        name: "relu",
        run: relu_case,
    },
    OpCase {
        name: "max_pool2d",
        run: max_pool_case,
    },
    OpCase {
        name: "avg_pool2d",
        run: avg_pool_case,
    },
    OpCase {
        name: "batch_norm/batch",
        run: batch_norm_batch_case,
    },
    OpCase {
        name: "batch_norm/running",
        run: batch_norm_running_case,
    },
    OpCase {
        name: "cross_entropy",
        run: cross_entropy_case,
    },
    OpCase {
        name: "cluster_reg/batch",
        run: cluster_reg_batch_case,
    },
    OpCase {
        name: "cluster_reg/per_example",
        run: cluster_reg_example_case,
    },
];

/// Worst relative error over `instances` random draws of one op.
pub fn op_worst(case: &OpCase, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances).map(|_| (case.run)(&mut r)).fold(0.0, f64::max)
}

/// Direct scalar-loop evaluation of the clustering penalty.
pub fn cluster_reg_oracle(logits: &[f64], n: usize, k: usize, groups: &[Vec<usize>], center: GroupCenter) -> f64 {
    let mut total = 0.0;
    for group in groups {
        let mut centers = vec![0.0; n];
        match center {
            GroupCenter::Batch => {
                let mut s = 0.0;
                for row in 0..n {
                    for &c in group {
                        s += logits[row * k + c];
                    }
                }
                centers.fill(s / (n * group.len()) as f64);
            }
            GroupCenter::PerExample => {
                for (row, center) in centers.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for &c in group {
                        s += logits[row * k + c];
                    }
                    *center = s / group.len() as f64;
                }
            }
        }
        for &c in group {
            let mut sq = 0.0;
            for row in 0..n {
                let d = logits[row * k + c] - centers[row];
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    total
}

/// Cosine of every pair of class columns, by scalar loops.
pub fn cosine_oracle(w: &WeightMatrix) -> Vec<f64> {
    let (d, k) = (w.input_len(), w.num_classes());
    let v = w.values.data();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for r in 0..d {
                let (a, b) = (v[r * k + i], v[r * k + j]);
                dot += a * b;
                ni += a * a;
                nj += b * b;
            }
            out[i * k + j] = dot / (ni.sqrt() * nj.sqrt());
        }
    }
    out
}

/// A ±0.8 block template for a random partition plus symmetric N(0, σ²)
/// noise off the diagonal.
pub fn noisy_template(rng: &mut ChaCha8Rng, k: usize, sigma: f64) -> (CorrelationMatrix, HierarchyPartition) {
    use rand_distr::{Distribution, Normal};
    let groups = random_groups(rng, k);
    let partition = HierarchyPartition::new(groups, k).unwrap();
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut values = vec![1.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let base = if partition.coarse_of(i) == partition.coarse_of(j) {
                0.8
            } else {
                -0.8
            };
            let v = base + noise.sample(rng);
            values[i * k + j] = v;
            values[j * k + i] = v;
        }
    }
    let c = CorrelationMatrix {
        values: Tensor::new(vec![k, k], values).unwrap(),
        class_labels: (0..k).map(|i| format!("c{i}")).collect(),
    };
    (c, partition)
}

/// Direct nested-loop cross-correlation, `x: N×C×H×W`, `w: F×C×k×k`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[fi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                s += xv * wdat[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// A small synthetic task and a model of `kind` trained on it for one epoch.
pub fn one_epoch_model(
    kind: hprobe::network::ModelKind,
    seed: u64,
) -> (hprobe::network::Network, hprobe::data::HierarchicalDataset) {
    use hprobe::data::{synthesize, SyntheticSpec};
    use hprobe::training::{init_network, train_standard, Regime, TrainConfig};
    let mut spec = SyntheticSpec::desk(0);
    spec.train_per_subclass = 40;
    spec.test_per_subclass = 10;
    let (train, test) = synthesize(&spec).unwrap();
    let k = train.hierarchy().num_fine();
    let net = init_network(kind, train.image_dims(), k, seed).unwrap();
    let mut cfg = TrainConfig::desk(Regime::Std, seed);
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg.eval_attack = None;
    let (net, _) = train_standard(net, &train, None, &cfg).unwrap();
    (net, test)
}

/// Largest `‖f_lin(x) − (Wᵀx + b)‖∞ / (1 + ‖f_lin(x)‖∞)` over `samples`
/// uniform random inputs.
pub fn affine_residual(net: &hprobe::network::Network, samples: usize, seed: u64) -> f64 {
    use hprobe::probe::extract_weight_matrix;
    let linear = net.linearize().unwrap();
    let [c, h, w] = net.input_dims();
    let mut r = rng(seed);
    let probe = uniform(&mut r, &[1, c, h, w], 0.0, 1.0);
    let (wm, b) = extract_weight_matrix(&linear, &probe).unwrap();
    let x = uniform(&mut r, &[samples, c, h, w], -1.0, 2.0);
    let out = linear.infer(&x).unwrap();
    let k = net.num_classes();
    let d = c * h * w;
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let got = &out.data()[i * k..(i + 1) * k];
        let xi = &x.data()[i * d..(i + 1) * d];
        let want: Vec<f64> = (0..k)
            .map(|j| b.values[j] + (0..d).map(|r| wm.values.data()[r * k + j] * xi[r]).sum::<f64>())
            .collect();
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let size = got.iter().map(|v| v.abs()).fold(0.0, f64::max);
        worst = worst.max(err / (1.0 + size));
    }
    worst
}

/// Largest absolute difference between weight matrices extracted with
/// `probes` distinct probes: the zero image and random images of varied
/// scale.
pub fn probe_spread(net: &hprobe::network::Network, probes: usize, seed: u64) -> f64 {
    use hprobe::probe::extract_weight_matrix;
    let linear = net.linearize().unwrap();
    let [c, h, w] = net.input_dims();
    let mut r = rng(seed);
    let (first, _) = extract_weight_matrix(&linear, &Tensor::zeros([1, c, h, w])).unwrap();
    let mut worst: f64 = 0.0;
    for p in 1..probes {
        let scale = [1.0, 10.0, 1e-3, 100.0, 0.5][p % 5];
        let probe = uniform(&mut r, &[c, h, w], -scale, scale);
        let (wm, _) = extract_weight_matrix(&linear, &probe).unwrap();
        worst = worst.max(wm.values.max_abs_diff(&first.values));
    }
    worst
}

/// `per_class` uniform-noise images per class, labels unrelated to content;
/// every class is its own superclass except that classes pair up.
pub fn noise_dataset(
    classes: usize,
    per_class: usize,
    dims: [usize; 3],
    seed: u64,
) -> hprobe::data::HierarchicalDataset {
    use hprobe::data::{HierarchicalDataset, HierarchySpec, Record, Split};
    let supers = classes.div_ceil(2);
    let h = HierarchySpec::new(
        (0..supers).map(|s| format!("s{s}")).collect(),
        (0..classes).map(|c| format!("c{c}")).collect(),
        (0..classes).map(|c| c / 2).collect(),
    )
    .unwrap();
    let len: usize = dims.iter().product();
    let mut r = rng(seed);
    let records = (0..classes * per_class)
        .map(|id| Record {
            id,
            fine: id % classes,
            coarse: (id % classes) / 2,
            pixels: (0..len).map(|_| r.random::<f64>()).collect(),
        })
        .collect();
    HierarchicalDataset::new(h, dims, records, Split::Test).unwrap()
}

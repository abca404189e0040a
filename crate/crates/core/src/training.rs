//! Standard, adversarial and clustering-regularized adversarial training,
//! plus coarse-label finetuning and evaluation.

use std::fmt::{self, Write as _};

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{pgd_perturb, robust_accuracy, AttackConfig};
use crate::autodiff::{GroupCenter, Tape};
use crate::data::{encode_dataset, seeded_rng, HierarchicalDataset, HierarchySpec, LabelKind};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::network::{argmax_rows, Mode, ModelKind, Network, Parameter, TrainingMeta};
use crate::probe::{
    correlation_matrix, extract_hierarchy, extract_weight_matrix, inconsistency_count, sign_approximation,
    HierarchyPartition,
};
use crate::tensor::Tensor;

/// Independent random streams derived from a run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const PROBE: u64 = 6;
}

/// A 64-bit seed drawn from stream `stream` of `seed`.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seeded_rng(seed, stream).next_u64()
}

/// Builds `kind` with the initialization every regime uses for `seed`.
pub fn init_network(kind: ModelKind, input_dims: [usize; 3], num_classes: usize, seed: u64) -> Result<Network> {
    kind.build(input_dims, num_classes, stream_seed(seed, stream::INIT))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Std,
    At,
    AtC,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "std" => Some(Self::Std),
            "at" => Some(Self::At),
            "at_c" => Some(Self::AtC),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Std => "std",
            Self::At => "at",
            Self::AtC => "at_c",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Inner maximization for AT and AT+C.
    pub attack: AttackConfig,
    /// Attack for the per-epoch robust accuracy; `None` skips it.
    pub eval_attack: Option<AttackConfig>,
    pub lambda: f64,
    pub group_center: GroupCenter,
    pub labels: LabelKind,
    pub seed: u64,
}

impl TrainConfig {
    /// 60 epochs, lr 0.1 decayed tenfold at epochs 40 and 50. The clustering
    /// penalty is a sum of batch-length norms, so λ = 0.001 keeps it near the
    /// cross-entropy; λ = 0.1 drives AT+C to chance accuracy.
    pub fn desk(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            milestones: vec![40, 50],
            decay: 0.1,
            attack: AttackConfig::pgd10(),
            eval_attack: Some(AttackConfig::pgd20()),
            lambda: 0.001,
            group_center: GroupCenter::PerExample,
            labels: LabelKind::Fine,
            seed,
        }
    }

    /// 200 epochs, lr 0.1 decayed tenfold at epochs 75 and 90.
    pub fn full_schedule(regime: Regime, seed: u64) -> Self {
        Self {
            epochs: 200,
            milestones: vec![75, 90],
            ..Self::desk(regime, seed)
        }
    }

    /// Coarse-label finetuning at a constant learning rate.
    pub fn finetune(seed: u64, epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            milestones: Vec::new(),
            labels: LabelKind::Coarse,
            ..Self::desk(Regime::Std, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr > 0 and 0 <= momentum < 1");
        }
        if !(self.weight_decay >= 0.0 && self.decay > 0.0) {
            return bad("need weight_decay >= 0 and decay > 0");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        self.attack.validate()?;
        if self.regime != Regime::Std && self.attack.steps == 0 {
            return bad("adversarial regimes need at least one attack step");
        }
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }

    fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Flat `key=value` pairs; [`TrainConfig::apply_pairs`] inverts them.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let out = vec![
            ("regime", self.regime.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            (
                "milestones",
                self.milestones
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("decay", format!("{:?}", self.decay)),
            ("lambda", format!("{:?}", self.lambda)),
            (
                "group_center",
                match self.group_center {
                    GroupCenter::Batch => "batch",
                    GroupCenter::PerExample => "per_example",
                }
                .to_string(),
            ),
            (
                "labels",
                match self.labels {
                    LabelKind::Fine => "fine",
                    LabelKind::Coarse => "coarse",
                }
                .to_string(),
            ),
            ("seed", self.seed.to_string()),
        ];
        let mut out: Vec<(String, String)> = out.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.extend(attack_pairs("attack", Some(&self.attack)));
        out.extend(attack_pairs("eval_attack", self.eval_attack.as_ref()));
        out
    }

    /// Overrides fields of `self` from `key=value` pairs. Unknown keys are
    /// returned untouched.
    pub fn apply_pairs<'a>(&mut self, pairs: &'a [(String, String)]) -> Result<Vec<&'a (String, String)>> {
        let mut rest = Vec::new();
        let mut eval_none = false;
        for pair in pairs {
            let (k, v) = (pair.0.as_str(), pair.1.as_str());
            match k {
                "regime" => self.regime = Regime::parse(v).ok_or_else(|| bad_value(k, v))?,
                "epochs" => self.epochs = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "lr" => self.lr = parse(k, v)?,
                "momentum" => self.momentum = parse(k, v)?,
                "weight_decay" => self.weight_decay = parse(k, v)?,
                "milestones" => {
                    self.milestones = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse(k, s.trim()))
                        .collect::<Result<_>>()?
                }
                "decay" => self.decay = parse(k, v)?,
                "lambda" => self.lambda = parse(k, v)?,
                "group_center" => {
                    self.group_center = match v {
                        "batch" => GroupCenter::Batch,
                        "per_example" => GroupCenter::PerExample,
                        _ => return Err(bad_value(k, v)),
                    }
                }
                "labels" => {
                    self.labels = match v {
                        "fine" => LabelKind::Fine,
                        "coarse" => LabelKind::Coarse,
                        _ => return Err(bad_value(k, v)),
                    }
                }
                "seed" => self.seed = parse(k, v)?,
                "eval_attack" if v == "none" => eval_none = true,
                _ => {
                    if let Some(field) = k.strip_prefix("attack.") {
                        set_attack_field(&mut self.attack, field, v)?;
                    } else if let Some(field) = k.strip_prefix("eval_attack.") {
                        let a = self.eval_attack.get_or_insert_with(AttackConfig::pgd20);
                        set_attack_field(a, field, v)?;
                    } else {
                        rest.push(pair);
                    }
                }
            }
        }
        if eval_none {
            self.eval_attack = None;
        }
        Ok(rest)
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad_value(key, value))
}

fn attack_pairs(prefix: &str, a: Option<&AttackConfig>) -> Vec<(String, String)> {
    match a {
        None => vec![(prefix.to_string(), "none".to_string())],
        Some(a) => [
            ("epsilon", format!("{:?}", a.epsilon)),
            ("step_size", format!("{:?}", a.step_size)),
            ("steps", a.steps.to_string()),
            ("random_start", a.random_start.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect(),
    }
}

pub(crate) fn set_attack_field(a: &mut AttackConfig, field: &str, v: &str) -> Result<()> {
    let k = format!("attack.{field}");
    match field {
        "epsilon" => a.epsilon = parse(&k, v)?,
        "step_size" => a.step_size = parse(&k, v)?,
        "steps" => a.steps = parse(&k, v)?,
        "random_start" => a.random_start = parse(&k, v)?,
        "preset" => {
            *a = AttackConfig::preset(v).ok_or_else(|| bad_value(&k, v))?;
        }
        _ => return Err(Error::Config(format!("unknown key `{k}`"))),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// `v ← μ·v + g + wd·θ`, then `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [Parameter], grads: &[Tensor], state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("sgd gradient", g.shape(), p.tensor.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((theta, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *theta;
            *theta -= cfg.lr * *vi;
        }
    }
    Ok(())
}

/// Per-group batch-and-class means of the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMeans(pub Vec<f64>);

pub fn group_means(logits: &Tensor, partition: &HierarchyPartition) -> Result<GroupMeans> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != partition.num_classes() {
        return Err(Error::shape("group means", s, &[partition.num_classes()]));
    }
    let (n, k) = (s[0], s[1]);
    let means = partition
        .groups()
        .iter()
        .map(|g| {
            let sum: f64 = (0..n)
                .flat_map(|r| g.iter().map(move |&c| r * k + c))
                .map(|i| logits.data()[i])
                .sum();
            sum / (n * g.len()) as f64
        })
        .collect();
    Ok(GroupMeans(means))
}

/// Value of the clustering regularizer on a batch of logits.
pub fn clustering_regularization_loss(
    logits: &Tensor,
    partition: &HierarchyPartition,
    center: GroupCenter,
) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[1] != partition.num_classes() {
        return Err(Error::contract(format!(
            "partition covers {} classes, logits have shape {:?}",
            partition.num_classes(),
            logits.shape()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let r = tape.cluster_reg(l, partition.groups(), center)?;
    Ok(tape.value(r)?.data()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total training loss over the epoch's batches.
    pub loss: f64,
    /// Mean regularizer value (0 unless the regularizer is active).
    pub l_reg: f64,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

/// Append-only record of a run: config echo, then one line per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    pub notes: Vec<(String, String)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:?}"))
}

impl RunManifest {
    pub fn new(header: Vec<(String, String)>) -> Self {
        Self {
            header,
            ..Self::default()
        }
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn note(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.notes.push((key.into(), value.into()));
    }

    pub fn note_value(&self, key: &str) -> Option<&str> {
        self.notes.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RunManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# hprobe run manifest")?;
        for (k, v) in &self.header {
            writeln!(f, "{k}={v}")?;
        }
        for e in &self.epochs {
            writeln!(
                f,
                "epoch={} lr={:?} loss={:?} l_reg={:?} clean_acc={} robust_acc={}",
                e.epoch,
                e.lr,
                e.loss,
                e.l_reg,
                fmt_opt(e.clean_acc),
                fmt_opt(e.robust_acc)
            )?;
        }
        for (k, v) in &self.notes {
            writeln!(f, "note.{k}={v}")?;
        }
        Ok(())
    }
}

/// Accuracy of `net` on `data`.
///
/// With `hierarchy`, fine predictions are mapped to superclasses before they
/// are compared with the dataset's coarse labels.
pub fn evaluate(
    net: &Network,
    data: &HierarchicalDataset,
    kind: LabelKind,
    hierarchy: Option<&HierarchySpec>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let labels = data.labels(kind);
    let mut correct = 0usize;
    let mut start = 0;
    for batch in data.batches(512, None, kind)? {
        let preds = argmax_rows(&net.infer(&batch.inputs)?);
        for (i, p) in preds.into_iter().enumerate() {
            let p = match (kind, hierarchy) {
                (LabelKind::Coarse, Some(h)) => h
                    .coarse_of(p)
                    .ok_or_else(|| Error::contract(format!("prediction {p} has no superclass")))?,
                _ => p,
            };
            if p == labels[start + i] {
                correct += 1;
            }
        }
        start += batch.labels.len();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Everything a training loop needs besides the network.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    train: &'a HierarchicalDataset,
    monitor: Option<&'a HierarchicalDataset>,
    adversarial: bool,
    partition: Option<&'a HierarchyPartition>,
}

fn has_batch_norm(net: &Network) -> bool {
    net.layers()
        .iter()
        .any(|l| matches!(l.kind, crate::network::LayerKind::BatchNorm { .. }))
}

/// Header shared by every regime: the config echo, the seed and the
/// training-set fingerprint.
pub fn manifest_header(cfg: &TrainConfig, train: &HierarchicalDataset) -> Vec<(String, String)> {
    let mut h = cfg.to_pairs();
    h.push(("dataset_sha256".into(), sha256_hex(&encode_dataset(train))));
    h
}

fn config_hash(header: &[(String, String)]) -> String {
    let text: String = header.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    });
    sha256_hex(text.as_bytes())
}

fn run(mut net: Network, lp: Loop<'_>, mut manifest: RunManifest) -> Result<(Network, RunManifest)> {
    let cfg = lp.cfg;
    cfg.validate()?;
    let kind = cfg.labels;
    let k = lp.train.num_classes(kind);
    if net.num_classes() != k {
        return Err(Error::contract(format!(
            "network has {} outputs, training labels have {k} classes",
            net.num_classes()
        )));
    }
    let groups = lp.partition.map(|p| p.groups().to_vec());
    if let Some(p) = lp.partition {
        if p.num_classes() != k {
            return Err(Error::contract("partition does not match the class count"));
        }
    }
    let regularize = groups.is_some() && cfg.lambda > 0.0;
    let skip_singletons = has_batch_norm(&net);
    let mut shuffle: ChaCha8Rng = seeded_rng(cfg.seed, stream::SHUFFLE);
    let mut attack_rng = seeded_rng(cfg.seed, stream::ATTACK);
    let mut state = SgdState::default();
    let mut tape = Tape::new();
    net.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let sgd = cfg.sgd(epoch);
        let (mut loss_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in lp.train.batches(cfg.batch_size, Some(shuffle.next_u64()), kind)? {
            if skip_singletons && batch.labels.len() < 2 {
                continue;
            }
            let inputs = if lp.adversarial {
                pgd_perturb(&net, &batch.inputs, &batch.labels, None, &cfg.attack, &mut attack_rng)?
            } else {
                batch.inputs
            };
            tape.reset();
            let x = tape.leaf(inputs, false);
            let trace = net.trace(&mut tape, x, Mode::Train, true)?;
            let ce = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
            let total = match (&groups, regularize) {
                (Some(g), true) => {
                    let reg = tape.cluster_reg(trace.logits, g, cfg.group_center)?;
                    reg_sum += tape.value(reg)?.data()[0];
                    let weighted = tape.scale(reg, cfg.lambda)?;
                    tape.add(ce, weighted)?
                }
                _ => ce,
            };
            let value = tape.value(total)?.data()[0];
            if !value.is_finite() {
                manifest.note("diverged_epoch", epoch.to_string());
                return Err(Error::Diverged {
                    epoch,
                    manifest: Box::new(manifest),
                });
            }
            loss_sum += value;
            steps += 1;
            tape.backward(total)?;
            let grads = trace
                .params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| {
                    Ok(tape
                        .grad(v)?
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec())))
                })
                .collect::<Result<Vec<_>>>()?;
            net.apply_batch_stats(&trace);
            sgd_step(net.params_mut(), &grads, &mut state, &sgd)?;
        }
        let steps = steps.max(1) as f64;
        let (clean_acc, robust_acc) = match lp.monitor {
            Some(m) => {
                let clean = evaluate(&net, m, kind, None)?;
                let robust = match &cfg.eval_attack {
                    Some(a) => Some(robust_accuracy(
                        &net,
                        m,
                        kind,
                        a,
                        stream_seed(cfg.seed, stream::EVAL) ^ epoch as u64,
                    )?),
                    None => None,
                };
                (Some(clean), robust)
            }
            None => (None, None),
        };
        manifest.epochs.push(EpochRecord {
            epoch,
            lr: sgd.lr,
            loss: loss_sum / steps,
            l_reg: reg_sum / steps,
            clean_acc,
            robust_acc,
        });
    }
    net.set_mode(Mode::Eval);
    net.meta = TrainingMeta {
        epoch: cfg.epochs,
        seed: cfg.seed,
        config_hash: config_hash(&manifest.header),
    };
    Ok((net, manifest))
}

fn require_regime(cfg: &TrainConfig, regime: Regime) -> Result<()> {
    if cfg.regime != regime {
        return Err(Error::Config(format!(
            "config regime is {}, expected {}",
            cfg.regime.name(),
            regime.name()
        )));
    }
    Ok(())
}

/// Cross-entropy training on clean inputs.
pub fn train_standard(
    net: Network,
    train: &HierarchicalDataset,
    monitor: Option<&HierarchicalDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunManifest)> {
    require_regime(cfg, Regime::Std)?;
    let manifest = RunManifest::new(manifest_header(cfg, train));
    let lp = Loop {
        cfg,
        train,
        monitor,
        adversarial: false,
        partition: None,
    };
    run(net, lp, manifest)
}

/// Cross-entropy on PGD examples generated from the current weights.
pub fn train_adversarial(
    net: Network,
    train: &HierarchicalDataset,
    monitor: Option<&HierarchicalDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunManifest)> {
    require_regime(cfg, Regime::At)?;
    let manifest = RunManifest::new(manifest_header(cfg, train));
    let lp = Loop {
        cfg,
        train,
        monitor,
        adversarial: true,
        partition: None,
    };
    run(net, lp, manifest)
}

/// The class hierarchy implied by a trained network's linear sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedHierarchy {
    pub partition: HierarchyPartition,
    pub inconsistencies: usize,
}

pub fn hierarchy_of(net: &Network, probe_seed: u64) -> Result<ExtractedHierarchy> {
    let linear = net.linearize()?;
    let [c, h, w] = net.input_dims();
    let mut rng = seeded_rng(probe_seed, stream::PROBE);
    let probe = Tensor::from_fn([1, c, h, w], |_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64);
    let (wm, _) = extract_weight_matrix(&linear, &probe)?;
    let sign = sign_approximation(&correlation_matrix(&wm)?);
    let partition = extract_hierarchy(&sign);
    let inconsistencies = inconsistency_count(&sign, &partition);
    Ok(ExtractedHierarchy {
        partition,
        inconsistencies,
    })
}

/// Probes `pretrained` for a class hierarchy, then adversarially trains a
/// freshly initialized network of the same architecture with the
/// clustering regularizer on the adversarial logits.
pub fn train_clustered(
    pretrained: &Network,
    train: &HierarchicalDataset,
    monitor: Option<&HierarchicalDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunManifest)> {
    require_regime(cfg, Regime::AtC)?;
    let extracted = hierarchy_of(pretrained, cfg.seed)?;
    let fresh = Network::new(
        pretrained.input_dims(),
        pretrained.num_classes(),
        pretrained.layers().to_vec(),
        stream_seed(cfg.seed, stream::INIT),
    )?;
    clustered_from(fresh, &extracted, train, monitor, cfg)
}

/// AT+C training of `net` with an already extracted hierarchy.
pub fn clustered_from(
    net: Network,
    extracted: &ExtractedHierarchy,
    train: &HierarchicalDataset,
    monitor: Option<&HierarchicalDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunManifest)> {
    require_regime(cfg, Regime::AtC)?;
    let mut manifest = RunManifest::new(manifest_header(cfg, train));
    let p = &extracted.partition;
    manifest.note("partition", p.to_text().trim_end().replace('\n', " | "));
    manifest.note("partition_inconsistencies", extracted.inconsistencies.to_string());
    manifest.note("partition_degenerate", p.is_degenerate().to_string());
    let lp = Loop {
        cfg,
        train,
        monitor,
        adversarial: true,
        partition: Some(p),
    };
    run(net, lp, manifest)
}

/// Swaps in a fresh coarse-class head and trains every parameter on coarse
/// labels of the target domain.
pub fn finetune(
    net: &Network,
    target_train: &HierarchicalDataset,
    monitor: Option<&HierarchicalDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunManifest)> {
    if cfg.labels != LabelKind::Coarse {
        return Err(Error::Config("finetuning trains on coarse labels".into()));
    }
    let coarse = target_train.hierarchy().num_coarse();
    if let Some(m) = monitor {
        if m.hierarchy().num_coarse() != coarse {
            return Err(Error::contract("monitor and target coarse-class counts differ"));
        }
    }
    let mut head = net.replace_head(coarse, stream_seed(cfg.seed, stream::HEAD))?;
    head.set_mode(Mode::Eval);
    let manifest = RunManifest::new(manifest_header(cfg, target_train));
    let lp = Loop {
        cfg,
        train: target_train,
        monitor,
        adversarial: cfg.regime != Regime::Std,
        partition: None,
    };
    run(head, lp, manifest)
}

//! L∞ adversarial examples: FGSM and PGD, untargeted or targeted.

use rand::Rng;

use crate::autodiff::Tape;
use crate::data::{seeded_rng, HierarchicalDataset, LabelKind};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Mode, Network};
use crate::tensor::Tensor;

/// Examples per attack chunk in dataset-level evaluation.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub targeted: bool,
    pub lo: f64,
    pub hi: f64,
}

/// Named step/radius settings, all with random start.
pub const PRESET_NAMES: [&str; 7] = ["pgd10", "pgd20", "pgd7_3", "pgd5_2", "pgd5_1.5", "pgd3_1", "pgd1_0.5"];

impl AttackConfig {
    pub fn new(epsilon: f64, step_size: f64, steps: usize, random_start: bool) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            random_start,
            targeted: false,
            lo: 0.0,
            hi: 1.0,
        }
    }

    /// Single step of size `epsilon`.
    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(epsilon, epsilon, 1, false)
    }

    /// Training-time attack: ε = 8/255, α = 2/255, 10 steps.
    pub fn pgd10() -> Self {
        Self::new(8.0 / 255.0, 2.0 / 255.0, 10, true)
    }

    /// Evaluation attack: ε = 8/255, α = 0.003, 20 steps.
    pub fn pgd20() -> Self {
        Self::new(8.0 / 255.0, 0.003, 20, true)
    }

    pub fn preset(name: &str) -> Option<Self> {
        let px = |v: f64| v / 255.0;
        Some(match name {
            "pgd10" => Self::pgd10(),
            "pgd20" => Self::pgd20(),
            "pgd7_3" => Self::new(px(3.0), px(1.0), 7, true),
            "pgd5_2" => Self::new(px(2.0), px(1.0), 5, true),
            "pgd5_1.5" => Self::new(px(1.5), px(0.5), 5, true),
            "pgd3_1" => Self::new(px(1.0), px(0.5), 3, true),
            "pgd1_0.5" => Self::new(px(0.5), px(0.5), 1, true),
            _ => return None,
        })
    }

    /// Same steps with radius and step size multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            epsilon: self.epsilon * factor,
            step_size: self.step_size * factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon >= 0.0
            && self.epsilon.is_finite()
            && (self.steps == 0 || (self.step_size > 0.0 && self.step_size.is_finite()))
            && self.lo < self.hi;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid attack config {self:?}")))
        }
    }
}

/// Inputs before and after an attack, with predictions for both.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<usize>,
    pub targets: Option<Vec<usize>>,
    pub pred_before: Vec<usize>,
    pub pred_after: Vec<usize>,
}

impl AdversarialBatch {
    /// Largest per-coordinate perturbation.
    pub fn linf(&self) -> f64 {
        self.perturbed.max_abs_diff(&self.original)
    }
}

/// Gradient of the mean cross-entropy w.r.t. the input, with eval-mode
/// batch norm.
pub fn input_gradient(net: &Network, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let trace = net.trace(&mut tape, xv, Mode::Eval, false)?;
    let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
    tape.backward(loss)?;
    let g = tape
        .grad(xv)?
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    if !g.is_finite() {
        return Err(Error::NonFinite("attack input gradient".into()));
    }
    Ok(g)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The loss labels and step direction for a config.
fn objective<'a>(cfg: &AttackConfig, labels: &'a [usize], targets: Option<&'a [usize]>) -> Result<(&'a [usize], f64)> {
    match (cfg.targeted, targets) {
        (true, Some(t)) => Ok((t, -1.0)),
        (true, None) => Err(Error::contract("targeted attack needs target labels")),
        (false, _) => Ok((labels, 1.0)),
    }
}

fn check_targets(x: &Tensor, labels: &[usize], targets: Option<&[usize]>) -> Result<()> {
    let n = x.shape()[0];
    if labels.len() != n || targets.is_some_and(|t| t.len() != n) {
        return Err(Error::shape("attack labels", &[labels.len()], &[n]));
    }
    Ok(())
}

/// One signed step of size ε from `x`, clipped to the pixel bounds.
pub fn fgsm_perturb(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    // The step is ε itself, so `step_size` and `steps` play no part.
    AttackConfig { steps: 0, ..*cfg }.validate()?;
    check_targets(x, labels, targets)?;
    let (loss_labels, dir) = objective(cfg, labels, targets)?;
    let g = input_gradient(net, x, loss_labels)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| (xi + cfg.epsilon * (dir * sign(gi))).clamp(cfg.lo, cfg.hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `steps` signed steps of size α, each followed by projection onto the
/// ε-ball around `x` and the pixel bounds.
pub fn pgd_perturb(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    check_targets(x, labels, targets)?;
    if cfg.steps == 0 {
        return Err(Error::Config("pgd needs at least one step".into()));
    }
    let (loss_labels, dir) = objective(cfg, labels, targets)?;
    let eps = cfg.epsilon;
    let mut adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        for v in adv.data_mut() {
            *v = (*v + rng.random_range(-eps..=eps)).clamp(cfg.lo, cfg.hi);
        }
    }
    for _ in 0..cfg.steps {
        let g = input_gradient(net, &adv, loss_labels)?;
        for ((a, &x0), &gi) in adv.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            let stepped = *a + cfg.step_size * (dir * sign(gi));
            *a = stepped.clamp(x0 - eps, x0 + eps).clamp(cfg.lo, cfg.hi);
        }
    }
    Ok(adv)
}

fn finish(
    net: &Network,
    x: &Tensor,
    perturbed: Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
) -> Result<AdversarialBatch> {
    Ok(AdversarialBatch {
        original: x.clone(),
        pred_before: net.predict(x)?,
        pred_after: net.predict(&perturbed)?,
        perturbed,
        labels: labels.to_vec(),
        targets: targets.map(<[usize]>::to_vec),
    })
}

pub fn fgsm(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let adv = fgsm_perturb(net, x, y, targets, cfg)?;
    finish(net, x, adv, y, targets)
}

pub fn pgd(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AdversarialBatch> {
    let adv = pgd_perturb(net, x, y, targets, cfg, rng)?;
    finish(net, x, adv, y, targets)
}

/// Attacks with PGD, or leaves inputs untouched when `steps == 0`.
fn attack_chunk(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if cfg.steps == 0 {
        return net.predict(x);
    }
    let adv = pgd_perturb(net, x, labels, targets, cfg, rng)?;
    net.predict(&adv)
}

/// Fraction of examples still classified correctly after the attack.
pub fn robust_accuracy(
    net: &Network,
    data: &HierarchicalDataset,
    kind: LabelKind,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("robust accuracy dataset"));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut correct = 0usize;
    for batch in data.batches(CHUNK, None, kind)? {
        let pred = attack_chunk(net, &batch.inputs, &batch.labels, None, cfg, &mut rng)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfusionMode {
    Untargeted,
    Targeted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfusionMatrix {
    /// Row-major `K×K` rates.
    pub values: Tensor,
    pub mode: ConfusionMode,
    pub counts: Vec<usize>,
    /// Fraction of examples misclassified before any attack.
    pub clean_error: f64,
}

impl AttackConfusionMatrix {
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.size() + j]
    }
}

/// Untargeted: row `i` is the distribution of post-attack predictions for
/// class-`i` examples. Targeted: entry `(i, j)` is the rate at which class-`i`
/// examples attacked toward `j` are predicted `j`. Examples misclassified
/// before the attack are included.
pub fn attack_confusion_matrix(
    net: &Network,
    data: &HierarchicalDataset,
    kind: LabelKind,
    cfg: &AttackConfig,
    mode: ConfusionMode,
    seed: u64,
) -> Result<AttackConfusionMatrix> {
    let k = data.num_classes(kind);
    if net.num_classes() != k {
        return Err(Error::contract(format!(
            "network has {} outputs, dataset has {k} classes",
            net.num_classes()
        )));
    }
    let labels = data.labels(kind);
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let missing: Vec<usize> = (0..k).filter(|&c| by_class[c].is_empty()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass(missing));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut rng = seeded_rng(seed, 0);
    let mut values = vec![0.0; k * k];
    let mut clean_wrong = 0usize;
    for (i, members) in by_class.iter().enumerate() {
        for idx in members.chunks(CHUNK) {
            let batch = data.gather(idx, kind)?;
            let clean = net.predict(&batch.inputs)?;
            clean_wrong += clean.iter().filter(|&&p| p != i).count();
            match mode {
                ConfusionMode::Untargeted => {
                    let cfg = AttackConfig {
                        targeted: false,
                        ..*cfg
                    };
                    for p in attack_chunk(net, &batch.inputs, &batch.labels, None, &cfg, &mut rng)? {
                        values[i * k + p] += 1.0;
                    }
                }
                ConfusionMode::Targeted => {
                    let cfg = AttackConfig { targeted: true, ..*cfg };
                    for j in (0..k).filter(|&j| j != i) {
                        let targets = vec![j; idx.len()];
                        let pred = attack_chunk(net, &batch.inputs, &batch.labels, Some(&targets), &cfg, &mut rng)?;
                        values[i * k + j] += pred.iter().filter(|&&p| p == j).count() as f64;
                    }
                }
            }
        }
        for v in &mut values[i * k..(i + 1) * k] {
            *v /= counts[i] as f64;
        }
    }
    Ok(AttackConfusionMatrix {
        values: Tensor::new([k, k], values)?,
        mode,
        counts,
        clean_error: clean_wrong as f64 / labels.len() as f64,
    })
}

/// Predictions of `net` for a whole dataset.
pub fn predictions(net: &Network, data: &HierarchicalDataset) -> Result<Vec<usize>> {
    let logits = net.infer(&data.all(LabelKind::Fine)?.inputs)?;
    Ok(argmax_rows(&logits))
}

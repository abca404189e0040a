//! Command-line experiment runner.
//!
//! Every command resolves its flags, an optional `key=value` config file and
//! `--set key=value` overrides into one flat configuration. The resolved
//! configuration, defaults included, is echoed to `config.txt` in the output
//! directory, and `hprobe run --config <echo>` reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::attacks::{attack_confusion_matrix, robust_accuracy, AttackConfig, ConfusionMode};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    convert_cifar, load_dataset, parse_hierarchy, save_dataset, subpopulation_split, synthesize, CifarLayout,
    HierarchicalDataset, LabelKind, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::export::{write_csv, write_pgm, Shade};
use crate::network::ModelKind;
use crate::probe::{
    correlation_matrix, extract_hierarchy, extract_weight_matrix, feature_centers, feature_distance_matrix,
    sign_approximation,
};
use crate::tensor::Tensor;
use crate::training::{
    evaluate, finetune, init_network, set_attack_field, stream, stream_seed, train_adversarial, train_clustered,
    train_standard, Regime, RunManifest, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hprobe", version, about = "Train, attack and probe small image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random choice; required.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key=value` config file (lines starting with `#` are ignored).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier (std, at or at_c).
    Train {
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Robust checkpoint to extract the hierarchy from (at_c only).
        #[arg(long)]
        pretrained: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract W, C, C_op and the class hierarchy from a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Robust accuracy and attack confusion matrices.
    Attack {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        /// One of pgd10, pgd20, pgd7_3, pgd5_2, pgd5_1.5, pgd3_1, pgd1_0.5.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Class feature centres and the normalized feature distance matrix.
    Features {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Subpopulation-shift domain adaptation pipeline.
    Da {
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Convert CIFAR-style binaries into train.hpds and test.hpds.
    Convert {
        /// Comma-separated training binaries.
        #[arg(long)]
        train: Option<String>,
        /// Comma-separated test binaries.
        #[arg(long)]
        test: Option<String>,
        /// Class names, one per line, in label order.
        #[arg(long)]
        labels: Option<String>,
        /// One superclass per line: `[name:] fine,fine,...`.
        #[arg(long)]
        hierarchy: Option<String>,
        /// cifar10 or cifar100.
        #[arg(long)]
        layout: Option<String>,
    },
    /// Re-execute the command recorded in a config echo.
    Run,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{l}`")))
        })
        .collect()
}

pub fn config_text(resolved: &BTreeMap<String, String>) -> String {
    resolved.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

/// Given settings, consumed key by key; consumed values and defaults form
/// the resolved echo.
#[derive(Debug, Default)]
pub struct Settings {
    given: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            given: pairs.into_iter().collect(),
            resolved: BTreeMap::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let v = self.given.remove(key)?;
        self.resolved.insert(key.to_string(), v.clone());
        Some(v)
    }

    fn take_or(&mut self, key: &str, default: &str) -> String {
        let v = self.given.remove(key).unwrap_or_else(|| default.to_string());
        self.resolved.insert(key.to_string(), v.clone());
        v
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    fn parse_or<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        let v = self.take_or(key, &default.to_string());
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
    }

    /// Training hyper-parameters: desk defaults, then any given keys.
    fn train_config(&mut self, regime: Regime, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk(regime, seed);
        let mut eval = cfg.eval_attack.unwrap_or_else(AttackConfig::pgd20);
        if let Some(p) = self.given.remove("attack.preset") {
            set_attack_field(&mut cfg.attack, "preset", &p)?;
        }
        if let Some(p) = self.given.remove("eval_attack.preset") {
            set_attack_field(&mut eval, "preset", &p)?;
            cfg.eval_attack = Some(eval);
        }
        let known: Vec<String> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
        let mut pairs: Vec<(String, String)> = Vec::new();
        for key in known.iter().map(String::as_str).chain(["eval_attack"]) {
            if let Some(v) = self.given.remove(key) {
                pairs.push((key.to_string(), v));
            }
        }
        // The eval attack keys exist in the echo only when it is enabled.
        for field in ["epsilon", "step_size", "steps", "random_start"] {
            let key = format!("eval_attack.{field}");
            if let Some(v) = self.given.remove(&key) {
                pairs.push((key, v));
            }
        }
        let rest = cfg.apply_pairs(&pairs)?;
        debug_assert!(rest.is_empty());
        if cfg.seed != seed || cfg.regime != regime {
            return Err(Error::Config("seed and regime are set once, at the top level".into()));
        }
        cfg.validate()?;
        self.resolved.extend(cfg.to_pairs());
        Ok(cfg)
    }

    /// Fails on keys nobody consumed; returns the resolved echo.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        if let Some(k) = self.given.keys().next() {
            return Err(Error::Config(format!("unknown setting `{k}`")));
        }
        Ok(self.resolved)
    }
}

/// Train and test splits from `synth:default`, `synth:da`, or a directory
/// holding `train.hpds` and `test.hpds`.
fn load_source(s: &mut Settings, source: &str) -> Result<(HierarchicalDataset, HierarchicalDataset)> {
    if let Some(name) = source.strip_prefix("synth:") {
        let seed = s.parse_or("synth.seed", 0u64)?;
        let mut spec = match name {
            "default" => SyntheticSpec::desk(seed),
            "da" => SyntheticSpec::domain_adaptation(seed),
            _ => return Err(Error::Config(format!("unknown synthetic dataset `{name}`"))),
        };
        spec.train_per_subclass = s.parse_or("synth.train_per_subclass", spec.train_per_subclass)?;
        spec.test_per_subclass = s.parse_or("synth.test_per_subclass", spec.test_per_subclass)?;
        spec.latent_dim = s.parse_or("synth.latent_dim", spec.latent_dim)?;
        spec.sigma_super = s.parse_or("synth.sigma_super", spec.sigma_super)?;
        spec.sigma_sub = s.parse_or("synth.sigma_sub", spec.sigma_sub)?;
        spec.sigma_noise = s.parse_or("synth.sigma_noise", spec.sigma_noise)?;
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        return synthesize(&spec);
    }
    let dir = Path::new(source);
    let train = load_dataset(dir.join("train.hpds"))?;
    let test = load_dataset(dir.join("test.hpds"))?.with_split(Split::Test);
    if train.hierarchy() != test.hierarchy() || train.image_dims() != test.image_dims() {
        return Err(Error::Config(format!(
            "train and test in `{source}` disagree on hierarchy or dims"
        )));
    }
    Ok((train, test))
}

fn regime_of(s: &mut Settings) -> Result<Regime> {
    let r = s.take_or("regime", "std");
    Regime::parse(&r).ok_or_else(|| Error::Config(format!("unknown regime `{r}` (std, at, at_c)")))
}

fn model_of(s: &mut Settings) -> Result<ModelKind> {
    let m = s.take_or("model", "cnn4");
    ModelKind::parse(&m).ok_or_else(|| Error::Config(format!("unknown model `{m}` (mlp3, cnn4, rescnn6)")))
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn write(out: &Path, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(out.join(name), text)?;
    Ok(())
}

/// A command whose settings are parsed; `run` does the work.
type Job = Box<dyn FnOnce(&Path) -> Result<()>>;

/// Parses the settings of `command` into a job.
fn plan(command: &str, seed: u64, s: &mut Settings) -> Result<Job> {
    match command {
        "train" => plan_train(seed, s),
        "probe" => plan_probe(seed, s),
        "attack" => plan_attack(seed, s),
        "features" => plan_features(s),
        "da" => plan_da(seed, s),
        "convert" => plan_convert(s),
        _ => Err(Error::Config(format!("unknown command `{command}`"))),
    }
}

fn plan_train(seed: u64, s: &mut Settings) -> Result<Job> {
    let regime = regime_of(s)?;
    let model = model_of(s)?;
    let source = s.take_or("dataset", "synth:default");
    let pretrained = if regime == Regime::AtC {
        Some(
            s.take("pretrained")
                .ok_or_else(|| Error::Config("regime at_c needs --pretrained <robust checkpoint>".into()))?,
        )
    } else {
        None
    };
    let monitor: usize = s.parse_or("monitor", 200)?;
    let cfg = s.train_config(regime, seed)?;
    let (train, test) = load_source(s, &source)?;
    Ok(Box::new(move |out: &Path| {
        let monitor = (monitor > 0).then(|| test.strided(monitor));
        let k = train.hierarchy().num_fine();
        let (net, manifest) = match regime {
            Regime::Std => train_standard(
                init_network(model, train.image_dims(), k, seed)?,
                &train,
                monitor.as_ref(),
                &cfg,
            ),
            Regime::At => train_adversarial(
                init_network(model, train.image_dims(), k, seed)?,
                &train,
                monitor.as_ref(),
                &cfg,
            ),
            Regime::AtC => {
                let pre = load_checkpoint(pretrained.as_deref().expect("checked above"))?;
                train_clustered(&pre, &train, monitor.as_ref(), &cfg)
            }
        }
        .map_err(|e| flush_diverged(out, e))?;
        save_checkpoint(&net, out.join("model.ckpt"))?;
        let mut manifest = manifest;
        manifest.note("checkpoint", "model.ckpt");
        write(out, "manifest.txt", manifest.to_text())
    }))
}

/// Writes the partial manifest of a diverged run before reporting it.
fn flush_diverged(out: &Path, e: Error) -> Error {
    if let Error::Diverged { manifest, .. } = &e {
        let _ = fs::write(out.join("manifest.txt"), manifest.to_text());
    }
    e
}

fn plan_probe(seed: u64, s: &mut Settings) -> Result<Job> {
    let path = s.require("checkpoint")?;
    Ok(Box::new(move |out: &Path| {
        let net = load_checkpoint(&path)?;
        let linear = net.linearize()?;
        let [c, h, w] = net.input_dims();
        let mut rng = crate::data::seeded_rng(seed, stream::PROBE);
        let probe = Tensor::from_fn([1, c, h, w], |_| rand::Rng::random::<f64>(&mut rng));
        let (wm, bias) = extract_weight_matrix(&linear, &probe)?;
        let k = wm.num_classes();
        let c_mat = correlation_matrix(&wm)?;
        let sign = sign_approximation(&c_mat);
        let partition = extract_hierarchy(&sign);
        let names = labels(k);
        write_csv(out.join("W.csv"), &names, k, wm.values.data())?;
        write_csv(out.join("b.csv"), &names, k, &bias.values)?;
        write_csv(out.join("C.csv"), &names, k, c_mat.values.data())?;
        let sign_vals: Vec<f64> = sign.values().iter().map(|&v| v as f64).collect();
        write_csv(out.join("C_op.csv"), &names, k, &sign_vals)?;
        write_pgm(out.join("C.pgm"), k, k, c_mat.values.data(), Shade::Signed)?;
        write_pgm(out.join("C_op.pgm"), k, k, &sign_vals, Shade::Signed)?;
        write(out, "hierarchy.txt", partition.to_text())
    }))
}

fn plan_attack(seed: u64, s: &mut Settings) -> Result<Job> {
    let path = s.require("checkpoint")?;
    let source = s.take_or("dataset", "synth:default");
    let mut cfg = AttackConfig::preset(&s.take_or("attack.preset", "pgd20"))
        .ok_or_else(|| Error::Config("unknown attack preset".into()))?;
    cfg.epsilon = s.parse_or("attack.epsilon", cfg.epsilon)?;
    cfg.step_size = s.parse_or("attack.step_size", cfg.step_size)?;
    cfg.steps = s.parse_or("attack.steps", cfg.steps)?;
    cfg.random_start = s.parse_or("attack.random_start", cfg.random_start)?;
    cfg.validate()?;
    let limit: usize = s.parse_or("examples", 0)?;
    let (_, test) = load_source(s, &source)?;
    Ok(Box::new(move |out: &Path| {
        let net = load_checkpoint(&path)?;
        let test = if limit > 0 { test.strided(limit) } else { test };
        let clean = evaluate(&net, &test, LabelKind::Fine, None)?;
        let robust = robust_accuracy(&net, &test, LabelKind::Fine, &cfg, stream_seed(seed, stream::EVAL))?;
        let k = net.num_classes();
        let names = labels(k);
        let mut report = format!("robust_acc={robust:?}\nclean_acc={clean:?}\n");
        for (mode, name) in [
            (ConfusionMode::Untargeted, "untargeted"),
            (ConfusionMode::Targeted, "targeted"),
        ] {
            let m = attack_confusion_matrix(
                &net,
                &test,
                LabelKind::Fine,
                &cfg,
                mode,
                stream_seed(seed, stream::ATTACK),
            )?;
            write_csv(out.join(format!("M_{name}.csv")), &names, k, m.values.data())?;
            write_pgm(out.join(format!("M_{name}.pgm")), k, k, m.values.data(), Shade::Unit)?;
            if mode == ConfusionMode::Untargeted {
                let _ = writeln!(report, "clean_error={:?}", m.clean_error);
            }
        }
        write(out, "robust_acc.txt", report)
    }))
}

fn plan_features(s: &mut Settings) -> Result<Job> {
    let path = s.require("checkpoint")?;
    let source = s.take_or("dataset", "synth:default");
    let (train, _) = load_source(s, &source)?;
    Ok(Box::new(move |out: &Path| {
        let net = load_checkpoint(&path)?;
        let z = feature_centers(&net, train.batches(256, None, LabelKind::Fine)?)?;
        let f = feature_distance_matrix(&z)?;
        let k = z.num_classes();
        let dims: Vec<String> = (0..z.feature_dim()).map(|i| format!("f{i}")).collect();
        write_csv(out.join("Z.csv"), &dims, z.feature_dim(), z.centers.data())?;
        write_csv(out.join("F_dist.csv"), &labels(k), k, f.values.data())?;
        write_pgm(out.join("F_dist.pgm"), k, k, f.values.data(), Shade::Unit)
    }))
}

/// Source/target accuracies of one domain-adaptation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaResult {
    pub source_fine: f64,
    pub source_coarse: f64,
    pub target_coarse: f64,
    pub target_coarse_ft: f64,
}

impl DaResult {
    pub fn table(&self) -> String {
        format!(
            "source_fine,source_coarse,target_coarse,target_coarse_ft\n{:?},{:?},{:?},{:?}\n",
            self.source_fine, self.source_coarse, self.target_coarse, self.target_coarse_ft
        )
    }
}

/// Settings of the domain-adaptation pipeline.
#[derive(Clone, Debug)]
pub struct DaPlan {
    pub model: ModelKind,
    pub train: TrainConfig,
    pub source_count: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

/// Split → train → evaluate source and target → finetune → evaluate target.
///
/// For AT+C the hierarchy is extracted from an AT model trained first on the
/// same source data. Manifests of every stage are returned with the result.
pub fn domain_adaptation(
    plan: &DaPlan,
    train: &HierarchicalDataset,
    test: &HierarchicalDataset,
) -> Result<(DaResult, Vec<(String, RunManifest)>)> {
    let seed = plan.train.seed;
    let (src_train, tgt_train, split) = subpopulation_split(train, plan.source_count, seed)?;
    let src_test = split.apply(test, false)?;
    let tgt_test = split.apply(test, true)?;
    let k = src_train.hierarchy().num_fine();
    let dims = src_train.image_dims();
    let mut manifests = Vec::new();
    let net = match plan.train.regime {
        Regime::Std => {
            let (n, m) = train_standard(init_network(plan.model, dims, k, seed)?, &src_train, None, &plan.train)?;
            manifests.push(("train".to_string(), m));
            n
        }
        Regime::At => {
            let (n, m) = train_adversarial(init_network(plan.model, dims, k, seed)?, &src_train, None, &plan.train)?;
            manifests.push(("train".to_string(), m));
            n
        }
        Regime::AtC => {
            let at_cfg = TrainConfig {
                regime: Regime::At,
                ..plan.train.clone()
            };
            let (robust, m) = train_adversarial(init_network(plan.model, dims, k, seed)?, &src_train, None, &at_cfg)?;
            manifests.push(("pretrain".to_string(), m));
            let (n, m) = train_clustered(&robust, &src_train, None, &plan.train)?;
            manifests.push(("train".to_string(), m));
            n
        }
    };
    let h = src_train.hierarchy();
    let source_fine = evaluate(&net, &src_test, LabelKind::Fine, None)?;
    let source_coarse = evaluate(&net, &src_test, LabelKind::Coarse, Some(h))?;
    let target_coarse = evaluate(&net, &tgt_test, LabelKind::Coarse, Some(h))?;
    let ft_cfg = TrainConfig {
        regime: Regime::Std,
        ..TrainConfig::finetune(seed, plan.finetune_epochs, plan.finetune_lr)
    };
    let (ft, m) = finetune(&net, &tgt_train, None, &ft_cfg)?;
    manifests.push(("finetune".to_string(), m));
    let target_coarse_ft = evaluate(&ft, &tgt_test, LabelKind::Coarse, None)?;
    Ok((
        DaResult {
            source_fine,
            source_coarse,
            target_coarse,
            target_coarse_ft,
        },
        manifests,
    ))
}

fn plan_da(seed: u64, s: &mut Settings) -> Result<Job> {
    let regime = regime_of(s)?;
    let model = model_of(s)?;
    let source = s.take_or("dataset", "synth:da");
    let source_count = s.parse_or("source_count", 4usize)?;
    let finetune_epochs = s.parse_or("finetune_epochs", 20usize)?;
    let finetune_lr = s.parse_or("finetune_lr", 0.01f64)?;
    let cfg = s.train_config(regime, seed)?;
    let (train, test) = load_source(s, &source)?;
    let plan = DaPlan {
        model,
        train: cfg,
        source_count,
        finetune_epochs,
        finetune_lr,
    };
    Ok(Box::new(move |out: &Path| {
        let (result, manifests) = domain_adaptation(&plan, &train, &test)?;
        for (stage, m) in manifests {
            write(out, &format!("manifest_{stage}.txt"), m.to_text())?;
        }
        write(out, "results.csv", result.table())
    }))
}

fn read_binaries(list: &str) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    for p in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        raw.extend(fs::read(p)?);
    }
    Ok(raw)
}

fn plan_convert(s: &mut Settings) -> Result<Job> {
    let train = s.require("train")?;
    let test = s.require("test")?;
    let labels_path = s.require("labels")?;
    let hierarchy_path = s.require("hierarchy")?;
    let layout = match s.take_or("layout", "cifar10").as_str() {
        "cifar10" => CifarLayout::Cifar10,
        "cifar100" => CifarLayout::Cifar100,
        other => return Err(Error::Config(format!("unknown layout `{other}`"))),
    };
    Ok(Box::new(move |out: &Path| {
        let names: Vec<String> = fs::read_to_string(&labels_path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let hierarchy = parse_hierarchy(&fs::read_to_string(&hierarchy_path)?, &names)?;
        let tr = convert_cifar(&read_binaries(&train)?, layout, hierarchy.clone())?;
        let te = convert_cifar(&read_binaries(&test)?, layout, hierarchy)?.with_split(Split::Test);
        save_dataset(&tr, out.join("train.hpds"))?;
        save_dataset(&te, out.join("test.hpds"))
    }))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Probe { .. } => "probe",
        Command::Attack { .. } => "attack",
        Command::Features { .. } => "features",
        Command::Da { .. } => "da",
        Command::Convert { .. } => "convert",
        Command::Run => "run",
    }
}

/// Flags given on the command line, as config pairs.
fn flag_pairs(c: Command) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    match c {
        Command::Train {
            regime,
            dataset,
            model,
            pretrained,
            epochs,
        } => {
            put("regime", regime);
            put("dataset", dataset);
            put("model", model);
            put("pretrained", pretrained);
            put("epochs", epochs.map(|e| e.to_string()));
        }
        Command::Probe { checkpoint } => put("checkpoint", checkpoint),
        Command::Attack {
            checkpoint,
            dataset,
            preset,
        } => {
            put("checkpoint", checkpoint);
            put("dataset", dataset);
            put("attack.preset", preset);
        }
        Command::Features { checkpoint, dataset } => {
            put("checkpoint", checkpoint);
            put("dataset", dataset);
        }
        Command::Da {
            regime,
            dataset,
            model,
            epochs,
        } => {
            put("regime", regime);
            put("dataset", dataset);
            put("model", model);
            put("epochs", epochs.map(|e| e.to_string()));
        }
        Command::Convert {
            train,
            test,
            labels,
            hierarchy,
            layout,
        } => {
            put("train", train);
            put("test", test);
            put("labels", labels);
            put("hierarchy", hierarchy);
            put("layout", layout);
        }
        Command::Run => {}
    }
    out
}

/// Merges config file, flags and overrides (later wins) and checks the
/// command and seed.
fn resolve(cli: Cli) -> Result<(BTreeMap<String, String>, PathBuf)> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("missing --out <dir>".into()))?;
    let mut pairs = match &cli.config {
        Some(p) => parse_config(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        )?,
        None => Vec::new(),
    };
    let name = command_name(&cli.command);
    if name != "run" {
        if let Some((_, c)) = pairs.iter().find(|(k, _)| k == "command") {
            if c != name {
                return Err(Error::Config(format!("config is for `{c}`, not `{name}`")));
            }
        }
        pairs.push(("command".into(), name.into()));
    } else if cli.config.is_none() {
        return Err(Error::Config("run needs --config <echo>".into()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    let sets = cli
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged: BTreeMap<String, String> = pairs.into_iter().chain(flag_pairs(cli.command)).chain(sets).collect();
    Ok((merged, out))
}

/// Resolves settings, echoes them and runs the command.
pub fn execute(resolved: BTreeMap<String, String>, out: &Path) -> Result<()> {
    let mut s = Settings::new(resolved);
    let command = s.require("command")?;
    let seed: u64 = s
        .take("seed")
        .ok_or_else(|| Error::Config("missing --seed (every run needs an explicit seed)".into()))?
        .parse()
        .map_err(|_| Error::Config("seed must be an unsigned integer".into()))?;
    s.resolved.insert("seed".into(), seed.to_string());
    let job = plan(&command, seed, &mut s)?;
    let echo = s.finish()?;
    fs::create_dir_all(out)?;
    write(out, "config.txt", config_text(&echo))?;
    job(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(cli).and_then(|(resolved, out)| execute(resolved, &out));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("hprobe: {e}");
            exit_code(&e)
        }
    }
}

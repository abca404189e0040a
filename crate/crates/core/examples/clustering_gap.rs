//! Trains STD, AT and AT+C CNN-4 models on the synthetic hierarchy task and
//! prints the within-minus-across correlation gap of each, plus clean and
//! robust test accuracy.
//!
//! Usage: `cargo run --release --example clustering_gap -- [seeds] [epochs]`
//!
//! Environment overrides: `SYNTH_SEED`, `SIGMA_SUB`, `SIGMA_NOISE`, `LATENT`,
//! `EPS_SCALE`, `LAMBDA` and `CENTER` (`batch` or `per_example`).

use std::time::Instant;

use hprobe::attacks::robust_accuracy;
use hprobe::autodiff::GroupCenter;
use hprobe::data::{synthesize, LabelKind, SyntheticSpec};
use hprobe::network::{ModelKind, Network};
use hprobe::probe::{clustering_gap, correlation_matrix, extract_weight_matrix, HierarchyPartition};
use hprobe::tensor::Tensor;
use hprobe::training::{
    clustered_from, evaluate, hierarchy_of, init_network, train_adversarial, train_standard, Regime, TrainConfig,
};

fn gap(net: &Network, planted: &HierarchyPartition) -> f64 {
    let linear = net.linearize().unwrap();
    let [c, h, w] = net.input_dims();
    let (wm, _) = extract_weight_matrix(&linear, &Tensor::zeros([1, c, h, w])).unwrap();
    clustering_gap(&correlation_matrix(&wm).unwrap(), planted).unwrap()
}

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mut spec = SyntheticSpec::desk(env("SYNTH_SEED", 0));
    spec.sigma_sub = env("SIGMA_SUB", spec.sigma_sub);
    spec.sigma_noise = env("SIGMA_NOISE", spec.sigma_noise);
    spec.latent_dim = env("LATENT", spec.latent_dim);
    let (train, test) = synthesize(&spec).unwrap();
    let planted = train.hierarchy().partition();
    let k = train.hierarchy().num_fine();
    let scale: f64 = env("EPS_SCALE", 1.0);
    let mut totals = std::collections::BTreeMap::<String, [f64; 3]>::new();
    for seed in 0..seeds {
        let mut cfg = TrainConfig::desk(Regime::Std, seed);
        cfg.epochs = epochs;
        cfg.milestones = vec![epochs * 2 / 3, epochs * 5 / 6];
        cfg.attack = cfg.attack.scaled(scale);
        cfg.eval_attack = None;
        let eval = hprobe::attacks::AttackConfig::pgd20().scaled(scale);
        let mut report = |name: &str, net: &Network, t: Instant| {
            let clean = evaluate(net, &test, LabelKind::Fine, None).unwrap();
            let train_acc = evaluate(net, &train, LabelKind::Fine, None).unwrap();
            let robust = robust_accuracy(net, &test, LabelKind::Fine, &eval, 99).unwrap();
            let g = gap(net, &planted);
            println!(
                "seed {seed} {name:>4}: gap {g:+.4} clean {clean:.3} train {train_acc:.3} robust {robust:.3} ({:.1}s)",
                t.elapsed().as_secs_f64()
            );
            let slot = totals.entry(name.to_string()).or_insert([0.0; 3]);
            slot[0] += g / seeds as f64;
            slot[1] += clean / seeds as f64;
            slot[2] += robust / seeds as f64;
        };
        let t = Instant::now();
        let init = || init_network(ModelKind::Cnn4, train.image_dims(), k, seed).unwrap();
        let (std_net, _) = train_standard(init(), &train, None, &cfg).unwrap();
        report("std", &std_net, t);
        let t = Instant::now();
        let at_cfg = TrainConfig {
            regime: Regime::At,
            ..cfg.clone()
        };
        let (at_net, _) = train_adversarial(init(), &train, None, &at_cfg).unwrap();
        report("at", &at_net, t);
        let extracted = hierarchy_of(&at_net, seed).unwrap();
        println!(
            "seed {seed} hierarchy {:?} recovered {}",
            extracted.partition.groups(),
            extracted.partition.same_grouping(&planted)
        );
        let t = Instant::now();
        let group_center = match env("CENTER", String::new()).as_str() {
            "batch" => GroupCenter::Batch,
            "per_example" => GroupCenter::PerExample,
            _ => cfg.group_center,
        };
        let lambda = env("LAMBDA", cfg.lambda);
        let atc_cfg = TrainConfig {
            regime: Regime::AtC,
            lambda,
            group_center,
            ..cfg.clone()
        };
        let (atc_net, _) = clustered_from(init(), &extracted, &train, None, &atc_cfg).unwrap();
        report("at_c", &atc_net, t);
    }
    for (name, [g, clean, robust]) in &totals {
        println!("mean {name:>4}: gap {g:+.4} clean {clean:.4} robust {robust:.4}");
    }
}

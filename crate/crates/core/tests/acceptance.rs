//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The training criteria take tens of minutes on one core. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 9`.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::cli::{hprobe, p, rerun_differences, SMALL};
use common::{
    affine_residual, cluster_reg_oracle, cosine_oracle, noisy_template, one_epoch_model, op_worst, probe_spread,
    random_groups, rng, uniform, FD_INSTANCES, FD_TOLERANCE, OP_CASES,
};
use hprobe::attacks::{
    attack_confusion_matrix, fgsm, fgsm_perturb, pgd, pgd_perturb, robust_accuracy, AttackConfig, ConfusionMode,
};
use hprobe::autodiff::{GroupCenter, Tape};
use hprobe::cli::{domain_adaptation, DaPlan, DaResult};
use hprobe::data::{synthesize, HierarchicalDataset, LabelKind, SyntheticSpec};
use hprobe::network::{ModelKind, Network};
use hprobe::probe::{
    clustering_gap, correlation_matrix, extract_hierarchy, extract_weight_matrix, sign_approximation,
    HierarchyPartition, WeightMatrix,
};
use hprobe::tensor::Tensor;
use hprobe::training::{
    clustered_from, clustering_regularization_loss, evaluate, hierarchy_of, init_network, train_adversarial,
    train_standard, Regime, TrainConfig,
};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const MODELS: [ModelKind; 3] = [ModelKind::Mlp3, ModelKind::Cnn4, ModelKind::ResCnn6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, minutes: u64) -> bool {
    elapsed <= Duration::from_secs(60 * minutes)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn affine_exactness() -> Verdict {
    let t = Instant::now();
    let worst = MODELS
        .iter()
        .map(|&k| affine_residual(&one_epoch_model(k, 1).0, 100, 2))
        .fold(0.0, f64::max);
    let time = t.elapsed();
    verdict(
        worst <= 1e-9 && within(time, 1),
        format!("worst residual {worst:.2e} (≤ 1e-9), {time:.1?}"),
    )
}

fn probe_independence() -> Verdict {
    let t = Instant::now();
    let worst = MODELS
        .iter()
        .map(|&k| probe_spread(&one_epoch_model(k, 3).0, 5, 4))
        .fold(0.0, f64::max);
    let time = t.elapsed();
    verdict(
        worst <= 1e-12 && within(time, 1),
        format!("max W difference over 5 probes {worst:.2e} (≤ 1e-12), {time:.1?}"),
    )
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0, "");
    for (i, case) in OP_CASES.iter().enumerate() {
        let e = op_worst(case, FD_INSTANCES, 100 + i as u64);
        if e >= worst.0 {
            worst = (e, case.name);
        }
    }
    let time = t.elapsed();
    verdict(
        worst.0 < FD_TOLERANCE && within(time, 5),
        format!(
            "{} ops × {FD_INSTANCES} instances, worst {:.2e} ({}), {time:.1?}",
            OP_CASES.len(),
            worst.0,
            worst.1
        ),
    )
}

fn attack_contracts() -> Verdict {
    let t = Instant::now();
    let (net, test) = one_epoch_model(ModelKind::Cnn4, 21);
    let batch = test.all(LabelKind::Fine).unwrap();
    let targets: Vec<usize> = batch.labels.iter().map(|l| (l + 3) % 8).collect();
    let mut r = rng(1);
    let mut failures = Vec::new();

    let mut configs = vec![
        AttackConfig::pgd10(),
        AttackConfig::pgd20(),
        AttackConfig::pgd20().scaled(4.0),
    ];
    configs.extend(
        hprobe::attacks::PRESET_NAMES
            .iter()
            .map(|n| AttackConfig::preset(n).unwrap()),
    );
    let mut feasible = true;
    for cfg in &configs {
        for targeted in [false, true] {
            let cfg = AttackConfig { targeted, ..*cfg };
            let t = targeted.then_some(&targets[..]);
            let a = pgd(&net, &batch.inputs, &batch.labels, t, &cfg, &mut r).unwrap();
            let f = fgsm(
                &net,
                &batch.inputs,
                &batch.labels,
                t,
                &AttackConfig {
                    targeted,
                    ..AttackConfig::fgsm(cfg.epsilon)
                },
            )
            .unwrap();
            for adv in [a, f] {
                feasible &= adv.linf() <= cfg.epsilon + 1e-9;
                feasible &= adv.perturbed.data().iter().all(|v| (cfg.lo..=cfg.hi).contains(v));
            }
        }
    }
    if !feasible {
        failures.push("feasibility");
    }

    let mut single = true;
    for eps in [1.0 / 255.0, 8.0 / 255.0, 0.1] {
        let f = fgsm_perturb(&net, &batch.inputs, &batch.labels, None, &AttackConfig::fgsm(eps)).unwrap();
        let p = pgd_perturb(
            &net,
            &batch.inputs,
            &batch.labels,
            None,
            &AttackConfig::new(eps, eps, 1, false),
            &mut r,
        )
        .unwrap();
        single &= f.data() == p.data();
    }
    if !single {
        failures.push("PGD(1) vs FGSM");
    }

    let mut identity = true;
    for cfg in &configs {
        let adv = pgd(
            &net,
            &batch.inputs,
            &batch.labels,
            None,
            &AttackConfig { epsilon: 0.0, ..*cfg },
            &mut r,
        )
        .unwrap();
        identity &= adv.perturbed == batch.inputs;
    }
    identity &=
        fgsm_perturb(&net, &batch.inputs, &batch.labels, None, &AttackConfig::fgsm(0.0)).unwrap() == batch.inputs;
    if !identity {
        failures.push("ε = 0 identity");
    }

    let mut rows = 0.0_f64;
    for cfg in [AttackConfig::pgd20(), AttackConfig::pgd20().scaled(4.0)] {
        let m = attack_confusion_matrix(&net, &test, LabelKind::Fine, &cfg, ConfusionMode::Untargeted, 5).unwrap();
        for i in 0..m.size() {
            rows = rows.max(((0..m.size()).map(|j| m.get(i, j)).sum::<f64>() - 1.0).abs());
        }
    }
    if rows > 1e-9 {
        failures.push("confusion rows");
    }
    let time = t.elapsed();
    verdict(
        failures.is_empty() && within(time, 2),
        format!("failed checks {failures:?}, worst row-sum error {rows:.1e}, {time:.1?}"),
    )
}

fn gap(net: &Network, planted: &HierarchyPartition) -> f64 {
    let linear = net.linearize().unwrap();
    let [c, h, w] = net.input_dims();
    let (wm, _) = extract_weight_matrix(&linear, &Tensor::zeros([1, c, h, w])).unwrap();
    clustering_gap(&correlation_matrix(&wm).unwrap(), planted).unwrap()
}

struct Scores {
    gap: f64,
    clean: f64,
    robust: f64,
}

fn scores(net: &Network, test: &HierarchicalDataset, planted: &HierarchyPartition, seed: u64) -> Scores {
    Scores {
        gap: gap(net, planted),
        clean: evaluate(net, test, LabelKind::Fine, None).unwrap(),
        robust: robust_accuracy(net, test, LabelKind::Fine, &AttackConfig::pgd20(), seed).unwrap(),
    }
}

struct SeedRun {
    std: Scores,
    at: Scores,
    atc: Scores,
    recovered: bool,
    std_time: Duration,
    at_time: Duration,
    atc_time: Duration,
}

/// STD, AT and AT+C CNN-4 models on the default synthetic task for each seed.
fn hierarchy_runs() -> Vec<SeedRun> {
    let (train, test) = synthesize(&SyntheticSpec::desk(0)).unwrap();
    let planted = train.hierarchy().partition();
    let k = train.hierarchy().num_fine();
    SEEDS
        .iter()
        .map(|&seed| {
            let init = || init_network(ModelKind::Cnn4, train.image_dims(), k, seed).unwrap();
            let cfg = TrainConfig { eval_attack: None, ..TrainConfig::desk(Regime::Std, seed) };
            let t = Instant::now();
            let (std, _) = train_standard(init(), &train, None, &cfg).unwrap();
            let std_time = t.elapsed();
            let t = Instant::now();
            let (at, _) = train_adversarial(init(), &train, None, &TrainConfig { regime: Regime::At, ..cfg.clone() }).unwrap();
            let at_time = t.elapsed();
            let t = Instant::now();
            let extracted = hierarchy_of(&at, seed).unwrap();
            let atc_cfg = TrainConfig { regime: Regime::AtC, ..cfg };
            let (atc, _) = clustered_from(init(), &extracted, &train, None, &atc_cfg).unwrap();
            let atc_time = t.elapsed();
            let run = SeedRun {
                std: scores(&std, &test, &planted, seed),
                at: scores(&at, &test, &planted, seed),
                atc: scores(&atc, &test, &planted, seed),
                recovered: extracted.partition.same_grouping(&planted),
                std_time,
                at_time,
                atc_time,
            };
            println!(
                "  seed {seed}: gap std {:+.4} at {:+.4} at_c {:+.4}; clean at {:.4} at_c {:.4}; robust at {:.4} at_c {:.4}; recovered {}",
                run.std.gap, run.at.gap, run.atc.gap, run.at.clean, run.atc.clean, run.at.robust, run.atc.robust, run.recovered
            );
            run
        })
        .collect()
}

fn clustering_effect(runs: &[SeedRun]) -> Verdict {
    let g_std = mean(runs.iter().map(|r| r.std.gap));
    let g_at = mean(runs.iter().map(|r| r.at.gap));
    let time: Duration = runs.iter().map(|r| r.std_time + r.at_time).sum();
    verdict(
        g_at > g_std && g_at > 0.2 && within(time, 30),
        format!("G_AT {g_at:+.4} vs G_STD {g_std:+.4} (need G_AT > G_STD and > 0.2), {time:.0?}"),
    )
}

fn clustered_training(runs: &[SeedRun]) -> Verdict {
    let recovered = runs.iter().filter(|r| r.recovered).count();
    let g_at = mean(runs.iter().map(|r| r.at.gap));
    let g_atc = mean(runs.iter().map(|r| r.atc.gap));
    let time: Duration = runs.iter().map(|r| r.at_time + r.atc_time).sum();
    verdict(
        recovered >= 2 && g_atc > g_at && within(time, 45),
        format!("hierarchy recovered in {recovered}/3 seeds, G_AT+C {g_atc:+.4} vs G_AT {g_at:+.4}, {time:.0?}"),
    )
}

fn robustness_direction(runs: &[SeedRun]) -> Verdict {
    let [clean_at, clean_atc, robust_at, robust_atc] = [
        mean(runs.iter().map(|r| r.at.clean)),
        mean(runs.iter().map(|r| r.atc.clean)),
        mean(runs.iter().map(|r| r.at.robust)),
        mean(runs.iter().map(|r| r.atc.robust)),
    ];
    verdict(
        robust_atc >= robust_at - 0.01 && clean_atc >= clean_at - 0.01,
        format!(
            "robust AT+C {robust_atc:.4} vs AT {robust_at:.4} ({:+.2} pts), clean AT+C {clean_atc:.4} vs AT {clean_at:.4} ({:+.2} pts)",
            100.0 * (robust_atc - robust_at),
            100.0 * (clean_atc - clean_at)
        ),
    )
}

fn domain_adaptation_direction() -> Verdict {
    let t = Instant::now();
    let (train, test) = synthesize(&SyntheticSpec::domain_adaptation(0)).unwrap();
    let mut results: Vec<(Regime, Vec<DaResult>)> = Vec::new();
    for regime in [Regime::Std, Regime::At, Regime::AtC] {
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let plan = DaPlan {
                    model: ModelKind::Cnn4,
                    train: TrainConfig {
                        eval_attack: None,
                        ..TrainConfig::desk(regime, seed)
                    },
                    source_count: 4,
                    finetune_epochs: 20,
                    finetune_lr: 0.01,
                };
                let (r, _) = domain_adaptation(&plan, &train, &test).unwrap();
                println!(
                    "  {} seed {seed}: source fine {:.4} coarse {:.4}; target coarse {:.4} after finetune {:.4}",
                    regime.name(),
                    r.source_fine,
                    r.source_coarse,
                    r.target_coarse,
                    r.target_coarse_ft
                );
                r
            })
            .collect();
        results.push((regime, runs));
    }
    let mut detail = Vec::new();
    let mut finetune_helps = true;
    for (regime, runs) in &results {
        let before = mean(runs.iter().map(|r| r.target_coarse));
        let after = mean(runs.iter().map(|r| r.target_coarse_ft));
        finetune_helps &= runs.iter().all(|r| r.target_coarse_ft >= r.target_coarse);
        detail.push(format!("{} target {before:.4} → {after:.4}", regime.name()));
    }
    let target = |i: usize| mean(results[i].1.iter().map(|r| r.target_coarse));
    let time = t.elapsed();
    verdict(
        finetune_helps && target(2) >= target(1) && within(time, 45),
        format!(
            "{}; AT+C ≥ AT: {}, {time:.0?}",
            detail.join(", "),
            target(2) >= target(1)
        ),
    )
}

fn oracle_equivalences() -> Verdict {
    let mut r = rng(7);
    let mut reg = 0.0_f64;
    for _ in 0..50 {
        let (n, k) = (r.random_range(1..40), r.random_range(2..12));
        let groups = random_groups(&mut r, k);
        let logits = uniform(&mut r, &[n, k], -5.0, 5.0);
        let partition = HierarchyPartition::new(groups.clone(), k).unwrap();
        for center in [GroupCenter::Batch, GroupCenter::PerExample] {
            let want = cluster_reg_oracle(logits.data(), n, k, partition.groups(), center);
            let got = clustering_regularization_loss(&logits, &partition, center).unwrap();
            let mut tape = Tape::new();
            let v = tape.leaf(logits.clone(), false);
            let l = tape.cluster_reg(v, &groups, center).unwrap();
            let taped = tape.value(l).unwrap().data()[0];
            reg = reg.max((got - want).abs()).max((taped - want).abs());
        }
    }
    let mut cos = 0.0_f64;
    for _ in 0..20 {
        let (d, k) = (r.random_range(1..30), r.random_range(2..12));
        let wm = WeightMatrix {
            values: uniform(&mut r, &[d, k], -1.0, 1.0),
            input_dims: [1, 1, d],
            class_labels: (0..k).map(|i| i.to_string()).collect(),
        };
        let c = correlation_matrix(&wm).unwrap();
        let oracle = cosine_oracle(&wm);
        for (i, o) in oracle.iter().enumerate() {
            cos = cos.max((c.get(i / k, i % k) - o).abs());
        }
    }
    let recovered = (0..100)
        .filter(|_| {
            let k = r.random_range(2..=12);
            let (c, planted) = noisy_template(&mut r, k, 0.1);
            extract_hierarchy(&sign_approximation(&c)).same_grouping(&planted)
        })
        .count();
    verdict(
        reg <= 1e-12 && cos <= 1e-12 && recovered == 100,
        format!("L_reg error {reg:.1e}, cosine error {cos:.1e}, templates recovered {recovered}/100"),
    )
}

/// Every command, run once and then again from its config echo.
fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| root.path().join(name);
    let mut runs: Vec<(String, Vec<String>)> = Vec::new();
    let mut check = |name: &str, args: Vec<&str>| {
        let out = dir(name);
        let mut full = args;
        full.extend(["--out", p(&out)]);
        let diffs = if hprobe(&full) == 0 {
            rerun_differences(&out)
        } else {
            vec!["<command failed>".to_string()]
        };
        runs.push((name.to_string(), diffs));
    };
    let small = SMALL.to_vec();
    let with = |base: &[&'static str]| -> Vec<&'static str> { base.iter().chain(&small).copied().collect() };
    check("train_std", with(&["train", "--seed", "7", "--epochs", "2"]));
    check(
        "train_at",
        with(&["train", "--seed", "7", "--epochs", "2", "--regime", "at"]),
    );
    let ckpt = dir("train_at").join("model.ckpt");
    let ckpt = p(&ckpt);
    let mut atc = with(&["train", "--seed", "7", "--epochs", "2", "--regime", "at_c"]);
    atc.extend(["--pretrained", ckpt]);
    check("train_at_c", atc);
    check("probe", vec!["probe", "--seed", "1", "--checkpoint", ckpt]);
    let mut attack = with(&["attack", "--seed", "2", "--preset", "pgd5_2"]);
    attack.extend(["--checkpoint", ckpt]);
    check("attack", attack);
    let mut features = with(&["features", "--seed", "3"]);
    features.extend(["--checkpoint", ckpt]);
    check("features", features);
    check(
        "da",
        vec![
            "da",
            "--seed",
            "4",
            "--regime",
            "at_c",
            "--epochs",
            "1",
            "--set",
            "synth.train_per_subclass=10",
            "--set",
            "synth.test_per_subclass=4",
            "--set",
            "finetune_epochs=1",
        ],
    );
    let raw = dir("raw");
    fs::create_dir(&raw).unwrap();
    write_cifar_fixture(&raw);
    let (a, t, l, h) = (
        raw.join("a.bin"),
        raw.join("t.bin"),
        raw.join("labels.txt"),
        raw.join("h.txt"),
    );
    check(
        "convert",
        vec![
            "convert",
            "--seed",
            "0",
            "--train",
            p(&a),
            "--test",
            p(&t),
            "--labels",
            p(&l),
            "--hierarchy",
            p(&h),
        ],
    );
    let bad: Vec<String> = runs
        .iter()
        .filter(|(_, d)| !d.is_empty())
        .map(|(n, d)| format!("{n} {d:?}"))
        .collect();
    verdict(
        bad.is_empty(),
        format!("{} commands rerun from their echo, differing: {bad:?}", runs.len()),
    )
}

fn write_cifar_fixture(dir: &Path) {
    let record = |label: u8| {
        let mut r = vec![label];
        r.extend((0..3072u32).map(|i| ((i * 7 + label as u32) % 256) as u8));
        r
    };
    fs::write(dir.join("a.bin"), [record(0), record(1), record(2), record(3)].concat()).unwrap();
    fs::write(dir.join("t.bin"), record(2)).unwrap();
    fs::write(dir.join("labels.txt"), "cat\ndog\ncar\ntruck\n").unwrap();
    fs::write(dir.join("h.txt"), "animal: cat, dog\nvehicle: car, truck\n").unwrap();
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, v: Verdict| {
        println!(
            "criterion {n:>2} {}: {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(n);
        }
    };
    if on(1) {
        report(1, "affine exactness", affine_exactness());
    }
    if on(2) {
        report(2, "probe independence", probe_independence());
    }
    if on(3) {
        report(3, "gradient suite", gradient_suite());
    }
    if on(4) {
        report(4, "attack contracts", attack_contracts());
    }
    if on(5) || on(6) || on(7) {
        let runs = hierarchy_runs();
        if on(5) {
            report(5, "clustering effect", clustering_effect(&runs));
        }
        if on(6) {
            report(6, "clustered training", clustered_training(&runs));
        }
        if on(7) {
            report(7, "robustness direction", robustness_direction(&runs));
        }
    }
    if on(8) {
        report(8, "domain adaptation direction", domain_adaptation_direction());
    }
    if on(9) {
        report(9, "oracle equivalences", oracle_equivalences());
    }
    if on(10) {
        report(10, "determinism", determinism());
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

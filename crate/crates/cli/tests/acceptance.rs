//! One PASS/FAIL line per acceptance criterion. Criteria 7 and 8 run the
//! full desk-scale experiment matrices and dominate the runtime.

use std::time::Instant;

use fca_cli::runner::prepare_data;
use fca_cli::{format_table, run, ExperimentConfig, RunOptions, RunSummary};
use fca_core::autodiff::{Graph, Tensor, Var};
use fca_core::datagen::{generate, SynthSpec};
use fca_core::federation::{epoch_order, local_update, lr_schedule, Federation, LocalTrainer, Method, RoundPlan, ServerState};
use fca_core::losses::{
    balanced_softmax, calibrate, cross_entropy, fca_client_loss, focal_loss, kl_consistency, proximal_term, ClassPrior,
    ConsistencyDirection, LossWeights,
};
use fca_core::metrics::{balanced_accuracy, balanced_auc, PredictionBatch};
use fca_core::model::{apply_delta_by_counts, forward_features, forward_head, init_model, ModelConfig, ParamBlock};
use fca_core::partition::{dirichlet_partition, make_split2, PartitionSpec, SPLIT2_ALPHAS};
use fca_core::testing::{
    central_difference, confusion_balanced_accuracy, max_relative_error, pairwise_balanced_auc, reference_kl,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn flatten(blocks: &[&ParamBlock]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.values().copied()).collect()
}

fn unflatten(template: &[&ParamBlock], flat: &[f64]) -> Vec<ParamBlock> {
    let mut at = 0;
    template
        .iter()
        .map(|b| {
            let mut b = (*b).clone();
            for p in &mut b.params {
                let n = p.values.len();
                p.values.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
            b
        })
        .collect()
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<f64> {
    vars.iter()
        .flat_map(|&v| match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect()
}

/// Max relative error of `loss` over one logits matrix.
fn check_logits_loss(
    rows: usize,
    cols: usize,
    seed: u64,
    loss: &dyn Fn(&mut Graph, Var) -> Var,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = uniform(&mut rng, rows * cols, 3.0);
    let mut g = Graph::new();
    let v = g.param(Tensor::matrix(rows, cols, x0.clone()).unwrap());
    let l = loss(&mut g, v);
    g.backward(l).unwrap();
    let analytic = g.grad(v).unwrap().to_vec();
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(rows, cols, x.to_vec()).unwrap());
        let l = loss(&mut g, v);
        g.scalar(l)
    };
    (max_relative_error(&analytic, &central_difference(&f, &x0, FD_EPS)), x0.len())
}

/// KL consistency over two logits matrices. The finite-difference side holds
/// each guide at its starting value, which is what the detach promises.
fn check_kl(direction: ConsistencyDirection, seed: u64) -> (f64, usize, f64) {
    let (rows, cols) = (40, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fed0 = uniform(&mut rng, rows * cols, 3.0);
    let per0 = uniform(&mut rng, rows * cols, 3.0);
    let mut g = Graph::new();
    let fv = g.param(Tensor::matrix(rows, cols, fed0.clone()).unwrap());
    let pv = g.param(Tensor::matrix(rows, cols, per0.clone()).unwrap());
    let l = kl_consistency(&mut g, fv, pv, direction).unwrap();
    let value = g.scalar(l);
    g.backward(l).unwrap();
    let analytic = grads_of(&g, &[fv, pv]);

    let kl = |fed: &[f64], per: &[f64], d: ConsistencyDirection| {
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(rows, cols, fed.to_vec()).unwrap());
        let p = g.constant(Tensor::matrix(rows, cols, per.to_vec()).unwrap());
        let l = kl_consistency(&mut g, f, p, d).unwrap();
        g.scalar(l)
    };
    let (pgf, fgp) = (
        ConsistencyDirection::PersonalizedGuidesFederated,
        ConsistencyDirection::FederatedGuidesPersonalized,
    );
    let n = rows * cols;
    let f = |x: &[f64]| {
        let (fed, per) = x.split_at(n);
        match direction {
            ConsistencyDirection::PersonalizedGuidesFederated => kl(fed, &per0, pgf),
            ConsistencyDirection::FederatedGuidesPersonalized => kl(&fed0, per, fgp),
            ConsistencyDirection::Bidirectional => kl(fed, &per0, pgf) + kl(&fed0, per, fgp),
        }
    };
    let x0: Vec<f64> = fed0.iter().chain(&per0).copied().collect();
    let err = max_relative_error(&analytic, &central_difference(&f, &x0, FD_EPS));
    let oracle = match direction {
        ConsistencyDirection::PersonalizedGuidesFederated => reference_kl(&per0, &fed0, cols),
        ConsistencyDirection::FederatedGuidesPersonalized => reference_kl(&fed0, &per0, cols),
        ConsistencyDirection::Bidirectional => reference_kl(&per0, &fed0, cols) + reference_kl(&fed0, &per0, cols),
    };
    (err, x0.len(), (value - oracle).abs())
}

fn check_proximal(seed: u64) -> (f64, usize) {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden_dims: vec![12, 8],
        num_classes: 5,
        seed,
    };
    let start = init_model(&cfg).unwrap();
    let anchor = init_model(&ModelConfig { seed: seed + 1, ..cfg }).unwrap();
    let template = [&start.extractor, &start.head];
    let x0 = flatten(&template);
    let anchors: Vec<_> = anchor.extractor.params.iter().chain(&anchor.head.params).collect();
    let mu = 0.01;
    let mut g = Graph::new();
    let vars: Vec<Var> = start.extractor.register(&mut g, true).into_iter().chain(start.head.register(&mut g, true)).collect();
    let l = proximal_term(&mut g, &vars, &anchors, mu).unwrap();
    g.backward(l).unwrap();
    let analytic = grads_of(&g, &vars);
    let f = |x: &[f64]| {
        let blocks = unflatten(&template, x);
        let mut g = Graph::new();
        let vars: Vec<Var> = blocks.iter().flat_map(|b| b.register(&mut g, false)).collect();
        let l = proximal_term(&mut g, &vars, &anchors, mu).unwrap();
        g.scalar(l)
    };
    (max_relative_error(&analytic, &central_difference(&f, &x0, FD_EPS)), x0.len())
}

/// The combined client objective on a two-hidden-layer model, with respect
/// to the extractor, the federated head and the personalized head.
fn check_fca(weights: LossWeights, seed: u64) -> (f64, usize) {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden_dims: vec![12, 8],
        num_classes: 5,
        seed,
    };
    let model = init_model(&cfg).unwrap();
    let personal = init_model(&ModelConfig { seed: seed + 100, ..cfg.clone() }).unwrap().head;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 16;
    let x = Tensor::matrix(rows, 6, uniform(&mut rng, rows * 6, 2.0)).unwrap();
    let labels: Vec<usize> = (0..rows).map(|i| i % 5).collect();
    let prior = ClassPrior::from_counts(0, vec![500, 200, 60, 12, 3]).unwrap();
    let template = [&model.extractor, &model.head, &personal];
    let x0 = flatten(&template);

    let mut g = Graph::new();
    let ev = model.extractor.register(&mut g, true);
    let hv = model.head.register(&mut g, true);
    let pv = personal.register(&mut g, true);
    let xv = g.constant(x.clone());
    let feats = forward_features(&mut g, &ev, xv).unwrap();
    let fed = forward_head(&mut g, &hv, feats).unwrap();
    let own = forward_head(&mut g, &pv, feats).unwrap();
    let loss = fca_client_loss(&mut g, fed, own, &labels, &prior, &weights).unwrap();
    let fed_start = g.value(fed).clone();
    let own_start = g.value(own).clone();
    g.backward(loss.total).unwrap();
    let analytic: Vec<f64> = [ev, hv, pv].iter().flat_map(|vars| grads_of(&g, vars)).collect();

    let f = |theta: &[f64]| {
        let blocks = unflatten(&template, theta);
        let mut g = Graph::new();
        let ev = blocks[0].register(&mut g, false);
        let hv = blocks[1].register(&mut g, false);
        let pv = blocks[2].register(&mut g, false);
        let xv = g.constant(x.clone());
        let feats = forward_features(&mut g, &ev, xv).unwrap();
        let fed = forward_head(&mut g, &hv, feats).unwrap();
        let own = forward_head(&mut g, &pv, feats).unwrap();
        let a = balanced_softmax(&mut g, fed, &labels, &prior).unwrap();
        let b = balanced_softmax(&mut g, own, &labels, &prior).unwrap();
        let mut total = weights.lambda1 * g.scalar(a) + weights.lambda2 * g.scalar(b);
        if weights.consistency {
            let fed0 = g.constant(fed_start.clone());
            let own0 = g.constant(own_start.clone());
            let mut term = |fed: Var, own: Var, d: ConsistencyDirection| {
                let (fed, own) = if weights.calibrated_consistency {
                    (calibrate(&mut g, fed, &prior).unwrap(), calibrate(&mut g, own, &prior).unwrap())
                } else {
                    (fed, own)
                };
                let l = kl_consistency(&mut g, fed, own, d).unwrap();
                g.scalar(l)
            };
            let (pgf, fgp) = (
                ConsistencyDirection::PersonalizedGuidesFederated,
                ConsistencyDirection::FederatedGuidesPersonalized,
            );
            total += match weights.direction {
                ConsistencyDirection::PersonalizedGuidesFederated => term(fed, own0, pgf),
                ConsistencyDirection::FederatedGuidesPersonalized => term(fed0, own, fgp),
                ConsistencyDirection::Bidirectional => term(fed, own0, pgf) + term(fed0, own, fgp),
            };
        }
        total
    };
    (max_relative_error(&analytic, &central_difference(&f, &x0, FD_EPS)), x0.len())
}

fn criterion_1() -> Verdict {
    let prior = ClassPrior::from_counts(0, vec![400, 150, 40, 9, 1]).unwrap();
    let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 5).collect();
    let mut rows: Vec<(String, f64, usize)> = Vec::new();
    let (e, n) = check_logits_loss(40, 5, 1, &|g, v| cross_entropy(g, v, &labels).unwrap());
    rows.push(("ce".into(), e, n));
    for gamma in [0.0, 2.0] {
        let (e, n) = check_logits_loss(40, 5, 2, &|g, v| focal_loss(g, v, &labels, gamma).unwrap());
        rows.push((format!("focal_g{}", gamma), e, n));
    }
    let (e, n) = check_logits_loss(40, 5, 3, &|g, v| balanced_softmax(g, v, &labels, &prior).unwrap());
    rows.push(("bsm".into(), e, n));
    let mut kl_value_gap: f64 = 0.0;
    for d in ConsistencyDirection::ALL {
        let (e, n, gap) = check_kl(d, 4);
        kl_value_gap = kl_value_gap.max(gap);
        rows.push((format!("kl_{}", d.name()), e, n));
    }
    let (e, n) = check_proximal(5);
    rows.push(("proximal".into(), e, n));
    for d in ConsistencyDirection::ALL {
        for calibrated in [false, true] {
            let w = LossWeights {
                lambda1: 1.0,
                lambda2: 1.5,
                direction: d,
                consistency: true,
                calibrated_consistency: calibrated,
            };
            let (e, n) = check_fca(w, 6);
            rows.push((format!("fca_{}{}", d.name(), if calibrated { "_cal" } else { "" }), e, n));
        }
    }
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.1));
    let fewest = rows.iter().map(|r| r.2).min().unwrap();
    for (name, e, n) in &rows {
        println!("    {:<40} params {:>4}  max rel err {:.2e}", name, n, e);
    }
    verdict(
        worst < GRAD_TOL && fewest >= 200 && kl_value_gap < 1e-12,
        format!(
            "{} losses, >= {} params each, worst rel err {:.2e}, kl value vs oracle {:.1e}",
            rows.len(),
            fewest,
            worst,
            kl_value_gap
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rows = rng.random_range(1..=64);
        let cols = rng.random_range(2..=10);
        let logits = uniform(&mut rng, rows * cols, 10.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(rows, cols, logits).unwrap());
        let ce = cross_entropy(&mut g, v, &labels).unwrap();
        let bsm = balanced_softmax(&mut g, v, &labels, &ClassPrior::uniform(cols)).unwrap();
        worst = worst.max((g.scalar(ce) - g.scalar(bsm)).abs());
    }
    verdict(worst <= 1e-9, format!("1000 batches, max |bsm - ce| {:.1e}", worst))
}

fn small_federation_setup(seed: u64) -> (ExperimentConfig, fca_core::datagen::Dataset, fca_core::partition::Partition) {
    let config = ExperimentConfig::from_toml(
        "seeds = [0]\nmethods = [\"fca\"]\n[partition]\npreset = \"split2\"\nnum_clients = 4\n",
        "acceptance.toml",
    )
    .unwrap();
    let (data, partition) = prepare_data(&config, seed).unwrap();
    (config, data, partition)
}

fn criterion_3() -> Verdict {
    let (config, data, partition) = small_federation_setup(30);
    let model = config.model_config(data.dim(), 30);
    let base = RoundPlan {
        method: Method::Fca,
        seed: 30,
        ..RoundPlan::default()
    };

    let frozen_plan = RoundPlan {
        loss_weights: LossWeights {
            lambda2: 0.0,
            ..LossWeights::default()
        },
        ..base.clone()
    };
    let fed = Federation::new(&data, &partition, &model, frozen_plan.clone()).unwrap();
    let client = &fed.clients[0];
    let before = client.personal.clone().unwrap();
    let mut trainer = LocalTrainer::new(&data, &frozen_plan, client, &fed.server.params).unwrap();
    let order = epoch_order(&client.train, 30, 0, 0, 0);
    for batch in order.chunks(frozen_plan.batch_size) {
        trainer.step(batch, frozen_plan.base_lr).unwrap();
    }
    let frozen = trainer.personal.as_ref().unwrap().head == before.head && trainer.report.personal_steps == 0;
    let shared_moved = trainer.model != fed.server.params;

    let with_cr = base.clone();
    let without_cr = RoundPlan {
        loss_weights: LossWeights {
            consistency: false,
            ..LossWeights::default()
        },
        ..base.clone()
    };
    let fed = Federation::new(&data, &partition, &model, with_cr.clone()).unwrap();
    let client = &fed.clients[0];
    let mut a = LocalTrainer::new(&data, &with_cr, client, &fed.server.params).unwrap();
    let mut b = LocalTrainer::new(&data, &without_cr, client, &fed.server.params).unwrap();
    let mut identical = true;
    let mut steps = 0;
    for epoch in 0..3 {
        for batch in epoch_order(&client.train, 30, 0, 0, epoch).chunks(with_cr.batch_size) {
            // Same shared model going into each step, so the personal head
            // sees the same features in both runs.
            b.model = a.model.clone();
            a.step(batch, with_cr.base_lr).unwrap();
            b.step(batch, with_cr.base_lr).unwrap();
            identical &= a.personal == b.personal;
            steps += 1;
        }
    }
    let personal_moved = a.personal.as_ref().unwrap().head != client.personal.as_ref().unwrap().head;
    verdict(
        frozen && shared_moved && identical && personal_moved,
        format!(
            "lambda2=0 head bitwise frozen over {} steps: {}; consistency on/off personal trajectories identical over {} steps: {}",
            order.len().div_ceil(frozen_plan.batch_size),
            frozen,
            steps,
            identical
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (config, data, partition) = small_federation_setup(40);
    let model = config.model_config(data.dim(), 40);
    let plan = RoundPlan {
        method: Method::Fca,
        seed: 40,
        ..RoundPlan::default()
    };
    let fed = Federation::new(&data, &partition, &model, plan.clone()).unwrap();

    let mut weight_gap: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=50);
        let sizes: Vec<u64> = (0..k).map(|_| rng.random_range(1..=100_000)).collect();
        let server = ServerState::new(fed.server.params.clone(), sizes).unwrap();
        weight_gap = weight_gap.max((server.weights.iter().sum::<f64>() - 1.0).abs());
    }

    let (delta, _, _) = local_update(&data, &fed.clients[0], &fed.server.params, &plan, 0).unwrap();
    let single = apply_delta_by_counts(&fed.server.params, &[(1, &delta)]).unwrap();
    let mut identical = true;
    for _ in 0..20 {
        let k = rng.random_range(2..=12);
        let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..=5000)).collect();
        let deltas: Vec<(u64, &_)> = counts.iter().map(|&n| (n, &delta)).collect();
        identical &= apply_delta_by_counts(&fed.server.params, &deltas).unwrap() == single;
    }

    let raw = generate(&SynthSpec::long_tail(41)).unwrap();
    let spec = PartitionSpec {
        num_clients: 1,
        per_class_alpha: SPLIT2_ALPHAS.to_vec(),
        missing_class_prob: 0.0,
        train_fraction: 0.8,
        seed: 41,
    };
    let one = dirichlet_partition(raw.labels(), &spec).unwrap();
    let data1 = fca_core::datagen::normalize(&raw, &one.train[0]).unwrap();
    let rounds = 10;
    let plan1 = RoundPlan {
        total_rounds: rounds,
        milestones: RoundPlan::scaled_milestones(rounds),
        method: Method::Fca,
        seed: 41,
        ..RoundPlan::default()
    };
    let mut fed1 = Federation::new(&data1, &one, &config.model_config(data1.dim(), 41), plan1.clone()).unwrap();
    let mut client = fed1.clients[0].clone();
    let mut params = fed1.server.params.clone();
    let mut k1_equal = true;
    for round in 0..rounds {
        fed1.round().unwrap();
        let mut trainer = LocalTrainer::new(&data1, &plan1, &client, &params).unwrap();
        let lr = lr_schedule(round, &plan1);
        for epoch in 0..plan1.local_epochs {
            for batch in epoch_order(&client.train, plan1.seed, round, 0, epoch).chunks(plan1.batch_size) {
                trainer.step(batch, lr).unwrap();
            }
        }
        params = trainer.model.clone();
        client = trainer.finish(&client).unwrap().1;
        k1_equal &= fed1.server.params == params && fed1.clients[0] == client;
    }
    verdict(
        weight_gap <= 1e-12 && identical && k1_equal,
        format!(
            "max |sum w - 1| {:.1e}; identical deltas exact: {}; K=1 bitwise over {} rounds: {}",
            weight_gap, identical, rounds, k1_equal
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut auc_exact = 0;
    let mut acc_exact = 0;
    let batches = 100;
    for _ in 0..batches {
        let n = rng.random_range(2..=200);
        let classes = rng.random_range(2..=6);
        // Quarter-step scores force many ties.
        let scores: Vec<f64> = (0..n * classes).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = PredictionBatch::new(scores.clone(), labels.clone(), classes).unwrap();
        if balanced_auc(&batch).ok() == pairwise_balanced_auc(&scores, &labels, classes) {
            auc_exact += 1;
        }
        if balanced_accuracy(&batch).ok() == confusion_balanced_accuracy(&scores, &labels, classes) {
            acc_exact += 1;
        }
    }
    verdict(
        auc_exact == batches && acc_exact == batches,
        format!(
            "bAUC exact on {}/{} tied batches, bACC exact on {}/{}",
            auc_exact, batches, acc_exact, batches
        ),
    )
}

fn criterion_6() -> Verdict {
    let k = 10;
    let mut conserved = 0;
    let mut removed = 0usize;
    let mut pairs = 0usize;
    for seed in 0..100u64 {
        let raw = generate(&SynthSpec::long_tail(seed)).unwrap();
        let labels = raw.labels();
        let p = make_split2(labels, k, seed).unwrap();
        let mut seen: Vec<usize> = p.assignment.iter().flatten().chain(&p.dropped).copied().collect();
        seen.sort_unstable();
        let mut ok = seen == (0..labels.len()).collect::<Vec<_>>();
        for c in 0..k {
            let mut split: Vec<usize> = p.train[c].iter().chain(&p.test[c]).copied().collect();
            let mut held = p.assignment[c].clone();
            split.sort_unstable();
            held.sort_unstable();
            ok &= split == held;
            let mut counts = vec![0u64; p.num_classes];
            for &i in &p.train[c] {
                counts[labels[i]] += 1;
            }
            ok &= counts == p.train_counts[c];
            ok &= p.removed_classes[c].iter().all(|&y| p.assignment[c].iter().all(|&i| labels[i] != y));
        }
        conserved += ok as usize;
        removed += p.removed_classes.iter().map(Vec::len).sum::<usize>();
        pairs += k * p.num_classes;
    }
    let rate = removed as f64 / pairs as f64;

    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let raw = generate(&SynthSpec::long_tail(1000 + seed)).unwrap();
        let spec = PartitionSpec {
            num_clients: k,
            per_class_alpha: vec![1e6; 5],
            missing_class_prob: 0.0,
            train_fraction: 0.8,
            seed,
        };
        let p = dirichlet_partition(raw.labels(), &spec).unwrap();
        let totals = raw.class_histogram();
        for shard in &p.assignment {
            for (y, &total) in totals.iter().enumerate() {
                let share = shard.iter().filter(|&&i| raw.labels()[i] == y).count() as f64 / total as f64;
                worst = worst.max((share * k as f64 - 1.0).abs());
            }
        }
    }
    verdict(
        conserved == 100 && (0.25..=0.35).contains(&rate) && worst <= 0.05,
        format!(
            "conservation exact on {}/100 seeds; removal rate {:.4}; alpha=1e6 worst deviation from uniform {:.2}%",
            conserved,
            rate,
            worst * 100.0
        ),
    )
}

fn pooled(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

fn run_matrix(toml: &str, dir: &std::path::Path) -> RunSummary {
    let config = ExperimentConfig::from_toml(toml, "acceptance.toml").unwrap();
    run(
        &config,
        &RunOptions {
            out_dir: Some(dir.to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap()
}

fn seeds_toml() -> String {
    format!("seeds = {:?}\n", SEEDS)
}

fn criterion_7(dir: &std::path::Path) -> Verdict {
    let summary = run_matrix(&(seeds_toml() + "grid = \"table4\"\n"), dir);
    print!("{}", indent(&format_table(&summary)));
    let row = |m: Method| summary.row(m.name()).unwrap();
    let (fca, bsm, ce, local) = (row(Method::Fca), row(Method::FedavgBsm), row(Method::FedavgCe), row(Method::Local));

    let margin_a = pooled(fca.std.avg_bacc, bsm.std.avg_bacc);
    let a = fca.mean.avg_bacc - bsm.mean.avg_bacc > margin_a;
    let b = bsm.mean.avg_bacc > ce.mean.avg_bacc;
    let mut c = true;
    let mut c_detail = Vec::new();
    for m in Method::ALL.into_iter().filter(|m| m.is_federated()) {
        let r = row(m);
        let margin = pooled(r.std.gen_bacc, local.std.gen_bacc);
        let gap = r.mean.gen_bacc - local.mean.gen_bacc;
        c &= gap > margin;
        c_detail.push(format!("{} {:+.4}/{:.4}", m.name(), gap, margin));
    }
    println!(
        "    (a) fca {:.4} vs fedavg_bsm {:.4}: gap {:+.4}, pooled std {:.4} -> {}",
        fca.mean.avg_bacc,
        bsm.mean.avg_bacc,
        fca.mean.avg_bacc - bsm.mean.avg_bacc,
        margin_a,
        if a { "holds" } else { "fails" }
    );
    println!(
        "    (b) fedavg_bsm {:.4} vs fedavg_ce {:.4} -> {}",
        bsm.mean.avg_bacc,
        ce.mean.avg_bacc,
        if b { "holds" } else { "fails" }
    );
    println!(
        "    (c) gen bACC gap over local / pooled std: {} -> {}",
        c_detail.join(", "),
        if c { "holds" } else { "fails" }
    );
    verdict(
        a && b && c,
        format!("5 seeds, K=10, T=60: (a) {} (b) {} (c) {}", ok(a), ok(b), ok(c)),
    )
}

fn criterion_8(dir: &std::path::Path) -> Verdict {
    let summary = run_matrix(&(seeds_toml() + "grid = \"table5\"\n"), dir);
    print!("{}", indent(&format_table(&summary)));
    let best = summary.row("fca_l1-1_l2-3_cr-on").unwrap();
    let plain = summary.row("fca_l1-1_l2-1_cr-off").unwrap();
    verdict(
        best.mean.avg_bacc >= plain.mean.avg_bacc,
        format!(
            "(1,3,on) {:.4} vs (1,1,off) {:.4} mean avg bACC over {} cells",
            best.mean.avg_bacc,
            plain.mean.avg_bacc,
            summary.rows.len()
        ),
    )
}

fn criterion_9(trend_dir: &std::path::Path) -> Verdict {
    let rerun = tempfile::tempdir().unwrap();
    let seed = SEEDS[2];
    run_matrix(&format!("seeds = [{}]\ngrid = \"table4\"\n", seed), rerun.path());
    let mut same = 0;
    let mut total = 0;
    for m in Method::ALL {
        let name = format!("{}_seed{}.csv", m.name(), seed);
        let a = std::fs::read(trend_dir.join(&name)).unwrap();
        let b = std::fs::read(rerun.path().join(&name)).unwrap();
        same += (a == b) as usize;
        total += 1;
    }
    verdict(same == total, format!("{}/{} reran seed-{} CSVs byte-identical", same, total, seed))
}

fn ok(b: bool) -> &'static str {
    if b {
        "holds"
    } else {
        "fails"
    }
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {}\n", l)).collect()
}

#[test]
fn acceptance_criteria() {
    let trend = tempfile::tempdir().unwrap();
    let sweep = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("calibration identity", Box::new(criterion_2)),
        ("stop-gradient contract", Box::new(criterion_3)),
        ("aggregation identities", Box::new(criterion_4)),
        ("metric oracles", Box::new(criterion_5)),
        ("partition conservation and statistics", Box::new(criterion_6)),
        ("directional trend", Box::new(|| criterion_7(trend.path()))),
        ("lambda sweep shape", Box::new(|| criterion_8(sweep.path()))),
        ("determinism", Box::new(|| criterion_9(trend.path()))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        println!(
            "criterion {} {}: {} ({}; {:.1}s)",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}

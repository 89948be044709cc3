//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::process::Command;
use std::time::{Duration, Instant};

use emoe::train::{
    convert_emoe2lora, convert_lora2emoe, evaluate, finite_diff_check, make_toy_dataset, run_toy,
    Adapter, BlockLayer, Construction, ModelSpec, Sample, ToyExperiment, ToyModel, Trainable,
    TuneMode, HELD_OUT,
};
use emoe::{
    activation_ratios, balanced_kmeans, random_partition, select_experts, ActivationKind,
    EmoeLayer, FfnLayer, GateMode, KMeansConfig, Matrix, Partition, Rng, Router, Scalar,
    SelectionPolicy,
};

fn report(name: &str, pass: bool, detail: String, elapsed: Duration, limit: Duration) {
    let ok = pass && elapsed < limit;
    println!(
        "{} {name}: {detail} ({:.2}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "{name}: {detail}");
    assert!(elapsed < limit, "{name}: took {elapsed:?}");
}

fn random_layer<T: Scalar>(rng: &mut Rng, h: usize, d: usize, biases: bool) -> FfnLayer<T> {
    let f = FfnLayer::random(h, d, ActivationKind::Relu, rng);
    if !biases {
        return f;
    }
    let kb = (0..d).map(|_| T::lit(0.2 * rng.normal())).collect();
    let vb = (0..h).map(|_| T::lit(0.2 * rng.normal())).collect();
    f.with_biases(Some(kb), Some(vb)).unwrap()
}

/// (h, d, N) with N dividing d.
fn random_dims(rng: &mut Rng) -> (usize, usize, usize) {
    let n = [1, 2, 4, 8][rng.below(4)];
    let m = 1 + rng.below(8);
    (1 + rng.below(16), n * m, n)
}

fn max_rel<T: Scalar>(got: &[T], want: &[T]) -> f64 {
    let scale = want
        .iter()
        .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
        .max(1e-30);
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
        / scale
}

fn dense_equivalence_worst<T: Scalar>(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, d, n) = random_dims(&mut rng);
        let layer = random_layer::<T>(&mut rng, h, d, case % 2 == 1);
        let partition = random_partition(d, n, seed + case).unwrap();
        let x: Vec<T> = (0..h).map(|_| T::lit(rng.normal())).collect();
        let emoe = EmoeLayer::split(&layer, &partition, n, GateMode::AvgK).unwrap();
        let (y, _) = emoe.forward(&x, SelectionPolicy::TopK, Some(n)).unwrap();
        worst = worst.max(max_rel(&y, &layer.forward(&x).unwrap()));
    }
    worst
}

#[test]
fn dense_equivalence() {
    let t = Instant::now();
    let e32 = dense_equivalence_worst::<f32>(1);
    let e64 = dense_equivalence_worst::<f64>(2);
    report(
        "dense equivalence",
        e32 <= 1e-5 && e64 <= 1e-12,
        format!("max rel err f32 {e32:.3e} (<= 1e-5), f64 {e64:.3e} (<= 1e-12)"),
        t.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn gate_score_identity() {
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, d, n) = random_dims(&mut rng);
        let layer = random_layer::<f64>(&mut rng, h, d, case % 2 == 0);
        let partition = random_partition(d, n, 100 + case).unwrap();
        let emoe = EmoeLayer::split(&layer, &partition, 1, GateMode::AvgK).unwrap();
        let x: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let scores = emoe.gate_scores(&x).unwrap();
        // Pre-activations by explicit loops over the dense layer.
        let pre: Vec<f64> = (0..d)
            .map(|j| {
                let dot: f64 = (0..h).map(|r| x[r] * layer.keys().get(r, j)).sum();
                dot + layer.key_bias().map_or(0.0, |b| b[j])
            })
            .collect();
        let mut want = vec![0.0; n];
        for (j, &e) in partition.assignment().iter().enumerate() {
            want[e] += pre[j];
        }
        let want: Vec<f64> = want.iter().map(|s| s * n as f64 / d as f64).collect();
        worst = worst.max(max_rel(&scores, &want));
    }
    report(
        "gate score identity",
        worst <= 1e-6,
        format!("max rel err {worst:.3e} (<= 1e-6)"),
        t.elapsed(),
        Duration::from_secs(2),
    );
}

#[test]
fn merge_round_trip() {
    let t = Instant::now();
    let mut rng = Rng::new(4);
    let mut failures = 0;
    for case in 0..100 {
        let (h, d, n) = random_dims(&mut rng);
        let layer = random_layer::<f64>(&mut rng, h, d, case % 3 == 0);
        let partition = random_partition(d, n, 200 + case).unwrap();
        let mut emoe = EmoeLayer::split(&layer, &partition, 1, GateMode::AvgK).unwrap();
        if !emoe.merge().unwrap().bitwise_eq(&layer) {
            failures += 1;
        }
        // Mutate one weight of one expert; the merge must place it at the
        // original neuron index.
        let e = rng.below(n);
        let slot = rng.below(emoe.experts()[e].size());
        let neuron = emoe.experts()[e].neuron_indices[slot];
        let r = rng.below(h);
        let v = rng.normal();
        emoe.experts_mut()[e].keys.set(r, slot, v);
        emoe.experts_mut()[e].values.set(slot, r, -v);
        let mut expected = layer.clone();
        expected.keys_mut().set(r, neuron, v);
        expected.values_mut().set(neuron, r, -v);
        if !emoe.merge().unwrap().bitwise_eq(&expected) {
            failures += 1;
        }
    }
    report(
        "merge round-trip",
        failures == 0,
        format!("{failures} of 200 merges differ bitwise"),
        t.elapsed(),
        Duration::from_secs(2),
    );
}

fn balanced_partitions(d: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(
        j: usize,
        d: usize,
        n: usize,
        cap: usize,
        counts: &mut Vec<usize>,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if j == d {
            out.push(cur.clone());
            return;
        }
        // Canonical labelling: a new cluster id may only be the next unused one.
        let used = cur.iter().copied().max().map_or(0, |m| m + 1);
        for c in 0..n.min(used + 1) {
            if counts[c] < cap {
                counts[c] += 1;
                cur.push(c);
                rec(j + 1, d, n, cap, counts, cur, out);
                cur.pop();
                counts[c] -= 1;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, d, n, d / n, &mut vec![0; n], &mut Vec::new(), &mut out);
    out
}

fn objective(points: &[Vec<f64>], assignment: &[usize], n: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..n {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| p)
            .collect();
        let mean: Vec<f64> = (0..dim)
            .map(|k| members.iter().map(|p| p[k]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>();
    }
    total
}

fn canonical(groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut g = groups;
    g.sort();
    g
}

#[test]
fn balanced_clustering() {
    let t = Instant::now();
    let mut rng = Rng::new(5);
    let mut bad_balance = 0;
    let mut bad_monotone = 0;
    let mut recovered = 0;
    let instances = 20;
    for inst in 0..instances {
        let n = 2 + inst % 2;
        let m = 2 + rng.below(12 / n - 1);
        let d = n * m;
        let dim = 1 + rng.below(3);
        let centers: Vec<Vec<f64>> = (0..n)
            .map(|c| {
                (0..dim)
                    .map(|k| {
                        if k == 0 {
                            10.0 * c as f64
                        } else {
                            3.0 * rng.normal()
                        }
                    })
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut order);
        let mut points = vec![Vec::new(); d];
        for (slot, &j) in order.iter().enumerate() {
            let c = &centers[slot / m];
            points[j] = c.iter().map(|v| v + 0.3 * rng.normal()).collect();
        }
        let (partition, report) =
            balanced_kmeans(&points, &KMeansConfig::new(n, inst as u64)).unwrap();
        if partition.groups().iter().any(|g| g.len() != d / n) {
            bad_balance += 1;
        }
        if report
            .objective_per_iteration
            .windows(2)
            .any(|w| w[1] > w[0])
        {
            bad_monotone += 1;
        }
        let best = balanced_partitions(d, n)
            .into_iter()
            .map(|a| (objective(&points, &a, n), a))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        let best_groups = Partition::new(best.1, n).unwrap().groups();
        if canonical(best_groups) == canonical(partition.groups()) {
            recovered += 1;
        }
    }
    report(
        "balanced clustering",
        bad_balance == 0 && bad_monotone == 0 && recovered == instances,
        format!(
            "unbalanced {bad_balance}, objective increases {bad_monotone}, optimum recovered {recovered}/{instances}"
        ),
        t.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn ratio_complementarity() {
    let t = Instant::now();
    let mut rng = Rng::new(6);
    let layer = random_layer::<f64>(&mut rng, 16, 64, false);
    let n = 8;
    let partition = random_partition(64, n, 7).unwrap();
    let emoe = EmoeLayer::split(&layer, &partition, 2, GateMode::AvgK).unwrap();
    let (mut worst_sum, mut order_violations, mut used) = (0.0f64, 0, 0);
    let (mut top_mean, mut not_mean) = (0.0, 0.0);
    while used < 100 {
        let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let k = 1 + rng.below(n - 1);
        let scores = emoe.gate_scores(&x).unwrap();
        let ratio = |p| {
            let sel = select_experts(&scores, p, k).unwrap();
            activation_ratios(&layer, &partition, &x, &sel).unwrap()
        };
        let top = ratio(SelectionPolicy::TopK);
        if top.activated_total == 0 {
            continue;
        }
        used += 1;
        let not = ratio(SelectionPolicy::NotTopK);
        let bottom = ratio(SelectionPolicy::BottomK);
        worst_sum = worst_sum
            .max((top.plain + not.plain - 1.0).abs())
            .max((top.weighted + not.weighted - 1.0).abs());
        if k <= n - k && (bottom.plain > not.plain || bottom.weighted > not.weighted) {
            order_violations += 1;
        }
        if k == 2 {
            top_mean += top.plain;
            not_mean += not.plain;
        }
    }
    report(
        "ratio complementarity",
        worst_sum <= 1e-6 && order_violations == 0,
        format!(
            "max |top+nottop-1| {worst_sum:.1e} (<= 1e-6), bottom>nottop cases {order_violations}; k=2 sample plain ratios top {:.3} / nottop {:.3}",
            top_mean / (top_mean + not_mean).max(1e-12),
            not_mean / (top_mean + not_mean).max(1e-12)
        ),
        t.elapsed(),
        Duration::from_secs(2),
    );
}

fn gc_spec(residual: bool) -> ModelSpec {
    ModelSpec {
        h_in: 3,
        h: 6,
        d: 8,
        n_blocks: 2,
        n_classes: 3,
        activation: ActivationKind::Relu,
        residual,
    }
}

fn split_model(model: &ToyModel<f64>, mode: GateMode, seed: u64) -> ToyModel<f64> {
    let parts: Vec<Partition> = (0..model.blocks.len())
        .map(|l| random_partition(8, 4, seed + l as u64).unwrap())
        .collect();
    convert_lora2emoe(model, &parts, 2, mode).unwrap()
}

/// Inputs clear of ReLU kinks (|pre-activation| >= 1e-3) and gate ties.
fn clean_batch(model: &ToyModel<f64>, seed: u64) -> Vec<Sample<f64>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    while out.len() < 4 {
        let x: Vec<f64> = (0..model.h_in()).map(|_| rng.normal()).collect();
        let (_, cache) = model
            .forward(&x, &mut Router::new(SelectionPolicy::TopK), None)
            .unwrap();
        let (kink, gap) = cache.margins();
        if kink >= 1e-3 && gap >= 1e-3 {
            out.push(Sample {
                x,
                label: rng.below(model.n_classes()),
                cluster: 0,
            });
        }
    }
    out
}

#[test]
fn gradient_correctness() {
    let t = Instant::now();
    let dense = ToyModel::<f64>::new(&gc_spec(true), 10).unwrap();
    let avgk = split_model(
        &ToyModel::<f64>::new(&gc_spec(true), 11).unwrap(),
        GateMode::AvgK,
        1,
    );
    let mut learned = split_model(
        &ToyModel::<f64>::new(&gc_spec(false), 12).unwrap(),
        GateMode::Learned,
        2,
    );
    let mut rng = Rng::new(13);
    for b in &mut learned.blocks {
        if let BlockLayer::Emoe(e) = &mut b.layer {
            e.gate_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.2 * rng.normal());
        }
    }
    let mut adapter = split_model(
        &ToyModel::<f64>::new(&gc_spec(true), 14).unwrap(),
        GateMode::AvgK,
        3,
    );
    let mut ad = Adapter::new(6, 3, 2, 2.0, &mut rng);
    ad.b = Matrix::random_normal(6, 2, 0.5, &mut rng);
    adapter.adapter = Some(ad);
    adapter.trainable = Trainable::ADAPTER;

    let mut errors = Vec::new();
    for (name, model, policy) in [
        ("dense", &dense, SelectionPolicy::All),
        ("avg-k", &avgk, SelectionPolicy::TopK),
        ("learned", &learned, SelectionPolicy::TopK),
        ("frozen+adapter", &adapter, SelectionPolicy::TopK),
    ] {
        let batch = clean_batch(model, 20);
        let r = finite_diff_check(model, &batch, policy, None, 1e-5).unwrap();
        errors.push((name, r.max_relative_error));
    }

    // Unselected experts receive exactly zero gradient, sample by sample.
    let mut leaks = 0;
    let mut full = avgk.clone();
    full.trainable = Trainable::ALL;
    for s in clean_batch(&full, 21) {
        let (logits, cache) = full
            .forward(&s.x, &mut Router::new(SelectionPolicy::TopK), None)
            .unwrap();
        let (_, dl) = emoe::train::softmax_cross_entropy(&logits, s.label).unwrap();
        let grads = full.backward(&cache, &dl).unwrap();
        for (l, sel) in cache.selected().iter().enumerate() {
            let BlockLayer::Emoe(g) = &grads.as_model().blocks[l].layer else {
                unreachable!()
            };
            for (i, ex) in g.experts().iter().enumerate() {
                let touched = ex
                    .keys
                    .data()
                    .iter()
                    .chain(ex.values.data())
                    .any(|&v| v != 0.0);
                if !sel.contains(&i) && touched {
                    leaks += 1;
                }
            }
        }
    }
    let worst = errors.iter().fold(0.0f64, |m, e| m.max(e.1));
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    report(
        "gradient correctness",
        worst <= 1e-4 && leaks == 0,
        format!(
            "max rel err {} (<= 1e-4), unselected experts with gradient {leaks}",
            detail.join(", ")
        ),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn toy_accuracies(configure: impl Fn(&mut ToyExperiment)) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut exp = ToyExperiment::reference(seed);
            configure(&mut exp);
            run_toy::<f64>(&exp).unwrap().finetune_log.test_accuracy
        })
        .collect()
}

#[test]
fn toy_selection_ordering() {
    let t = Instant::now();
    let top = toy_accuracies(|_| {});
    let bottom = toy_accuracies(|e| e.finetune.policy = SelectionPolicy::BottomK);
    let dense = toy_accuracies(|e| e.mode = TuneMode::Dense);
    let (mt, mb, md) = (median(top.clone()), median(bottom), median(dense));
    report(
        "toy selection ordering",
        mt >= mb && mt >= md - 0.02,
        format!("median test acc top-2 {mt:.4}, bottom-2 {mb:.4}, dense {md:.4} (need top >= bottom and top >= dense - 0.02)"),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn emoe_to_dense_workflow() {
    let t = Instant::now();
    let mut preserved = true;
    let mut round_trip = true;
    let mut gaps = Vec::new();
    for &seed in &SEEDS {
        let exp = ToyExperiment::reference(seed);
        let outcome = run_toy::<f64>(&exp).unwrap();
        let split = &outcome.model;
        let dense = convert_emoe2lora(split).unwrap();
        for (sb, db) in split.blocks.iter().zip(&dense.blocks) {
            let (BlockLayer::Emoe(e), BlockLayer::Dense(f)) = (&sb.layer, &db.layer) else {
                preserved = false;
                continue;
            };
            for ex in e.experts() {
                for (slot, &j) in ex.neuron_indices.iter().enumerate() {
                    for r in 0..f.h() {
                        preserved &= ex.keys.get(r, slot).to_bits() == f.keys().get(r, j).to_bits();
                        preserved &=
                            ex.values.get(slot, r).to_bits() == f.values().get(j, r).to_bits();
                    }
                }
            }
        }
        preserved &=
            dense.input_proj.bitwise_eq(&split.input_proj) && dense.head.bitwise_eq(&split.head);
        let back =
            convert_lora2emoe(&dense, &outcome.partitions, exp.top_k, GateMode::AvgK).unwrap();
        round_trip &=
            back.bitwise_eq(split) && convert_emoe2lora(&back).unwrap().bitwise_eq(&dense);

        let data = make_toy_dataset::<f64>(&exp.task).unwrap();
        let (_, test) = data.split(HELD_OUT, exp.finetune.seed);
        let masked = evaluate(split, &test, SelectionPolicy::TopK, Some(exp.top_k)).unwrap();
        let merged = evaluate(&dense, &test, SelectionPolicy::All, None).unwrap();
        gaps.push((masked, merged));
    }
    let detail: Vec<String> = gaps.iter().map(|(m, d)| format!("{m:.3}/{d:.3}")).collect();
    let mean_gap = gaps.iter().map(|(m, d)| d - m).sum::<f64>() / gaps.len() as f64;
    report(
        "emoe-to-dense workflow",
        preserved && round_trip,
        format!(
            "parameters preserved {preserved}, round trip bitwise {round_trip}; masked/dense test acc per seed [{}], mean dense-minus-masked gap {mean_gap:+.4}",
            detail.join(", ")
        ),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

fn run_flops(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_emoe"))
        .arg("flops")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

fn ratio_line(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("ratio "))
        .and_then(|v| v.trim().parse().ok())
        .unwrap()
}

#[test]
fn flops_accounting() {
    let t = Instant::now();
    let sparse = run_flops(&["--h", "16", "--d", "64", "--experts", "8", "--topk", "2"]);
    let printed = sparse.lines().any(|l| l == "ratio 0.3125");
    let full = ratio_line(&run_flops(&[
        "--h",
        "16",
        "--d",
        "64",
        "--experts",
        "8",
        "--topk",
        "8",
    ]));
    let excess = full - 1.0;
    let want = 8.0 / (2.0 * 64.0);
    report(
        "flops accounting",
        printed && excess == want,
        format!(
            "prints 'ratio 0.3125' {printed}; k=N ratio {full} exceeds 1 by {excess} (want {want})"
        ),
        t.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn cluster_versus_random_construction() {
    let t = Instant::now();
    let cluster = toy_accuracies(|e| e.construction = Construction::Cluster);
    let random = toy_accuracies(|e| e.construction = Construction::Random);
    let (mc, mr) = (median(cluster), median(random));
    report(
        "cluster versus random construction",
        mc >= mr,
        format!("median top-2 test acc cluster {mc:.4}, random {mr:.4} (need cluster >= random)"),
        t.elapsed(),
        Duration::from_secs(600),
    );
}

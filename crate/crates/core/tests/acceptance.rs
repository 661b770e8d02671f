use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use ndt_lime::bench::{boundary_grid, compute_depth_sweep, prepare, run_table, ExperimentConfig};
use ndt_lime::data::Task;
use ndt_lime::explain::SurrogateKind;
use ndt_lime::metrics::{cosine, fidelity_r2, regularity_k, stability, stability_of};
use ndt_lime::ndt::{convert_dt_to_ndt, taylor_residual_check, Mode, NdtParams};
use ndt_lime::tree::{fit_weighted_cart, CartConfig, DecisionTree, Node, TreeTargets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn first_argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Random weighted CART: regression or classification, depth 1..=5, d 1..=10.
fn random_cart(rng: &mut ChaCha8Rng) -> DecisionTree {
    let d = rng.random_range(1..=10);
    let depth = rng.random_range(1..=5);
    let n = rng.random_range(40..=160);
    let x = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() * 4.0 - 2.0);
    let w: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>() * 3.0 }).collect();
    let cfg = CartConfig { max_depth: depth, min_leaf_weight: 0.0 };
    if rng.random::<bool>() {
        let y: Vec<f64> = x.outer_iter().map(|r| 5.0 * r[0].sin() + r[d - 1] * 2.0 + rng.random::<f64>() * 3.0 - 10.0).collect();
        fit_weighted_cart(x.view(), TreeTargets::Regression(&y), &w, &cfg).unwrap()
    } else {
        let n_classes = rng.random_range(2..=4);
        let labels: Vec<usize> = x
            .outer_iter()
            .map(|r| if rng.random::<f64>() < 0.2 { rng.random_range(0..n_classes) } else { ((r[0] + 2.0) * n_classes as f64 / 4.0) as usize % n_classes })
            .collect();
        fit_weighted_cart(x.view(), TreeTargets::Classification { labels: &labels, n_classes }, &w, &cfg).unwrap()
    }
}

fn min_margin(tree: &DecisionTree, x: ArrayView1<f64>) -> f64 {
    tree.nodes()
        .iter()
        .filter_map(|n| match n {
            Node::Internal { feature, threshold, .. } => Some((x[*feature] - threshold).abs()),
            Node::Leaf { .. } => None,
        })
        .fold(f64::INFINITY, f64::min)
}

/// Random points in the tree's domain whose split margins all exceed `margin`.
fn points_with_margin(tree: &DecisionTree, rng: &mut ChaCha8Rng, count: usize, margin: f64) -> Array2<f64> {
    let d = tree.n_features();
    let mut out = Array2::zeros((count, d));
    let mut filled = 0;
    while filled < count {
        let p = Array1::from_shape_simple_fn(d, || rng.random::<f64>() * 5.0 - 2.5);
        if min_margin(tree, p.view()) > margin {
            out.row_mut(filled).assign(&p);
            filled += 1;
        }
    }
    out
}

#[test]
fn criterion_1_conversion_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for _ in 0..100 {
        let tree = random_cart(&mut rng);
        let hard = convert_dt_to_ndt(&tree, 1.0, 1.0).unwrap().with_mode(Mode::Hard);
        let pts = points_with_margin(&tree, &mut rng, 200, 1e-9);
        let expected = tree.predict(pts.view()).unwrap();
        let got = hard.forward(pts.view()).unwrap();
        for (e, g) in expected.outer_iter().zip(got.outer_iter()) {
            checked += 1;
            let ok = if tree.n_outputs() == 1 && e.len() == 1 && matches!(tree.task(), Task::Regression) {
                e[0].to_bits() == g[0].to_bits()
            } else {
                first_argmax(e) == first_argmax(g)
            };
            if !ok {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(30);
    report(1, "conversion exactness", pass, &format!("{mismatches}/{checked} mismatches, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_2_soft_to_hard_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0usize;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tree = random_cart(&mut rng);
        let soft = convert_dt_to_ndt(&tree, 1e4, 1e4).unwrap();
        let hard = soft.clone().with_mode(Mode::Hard);
        let pts = points_with_margin(&tree, &mut rng, 100, 1e-2);
        let s = soft.forward(pts.view()).unwrap();
        let h = hard.forward(pts.view()).unwrap();
        for (rs, rh) in s.outer_iter().zip(h.outer_iter()) {
            checked += 1;
            let dev = rs.iter().zip(rh.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(dev);
            if dev > 1e-3 {
                failures += 1;
            }
        }
    }
    let pass = failures == 0 && checked == 10_000;
    report(2, "soft-to-hard limit", pass, &format!("{failures}/{checked} failures, max deviation {worst:.3e}"));
    assert!(pass);
}

fn soft_random_ndt(rng: &mut ChaCha8Rng) -> NdtParams {
    let tree = loop {
        let t = random_cart(rng);
        if t.n_leaves() > 1 {
            break t;
        }
    };
    let g1 = rng.random_range(0.5..3.0);
    let g2 = rng.random_range(0.5..=g1);
    let mut p = convert_dt_to_ndt(&tree, g1, g2).unwrap();
    // Move away from the structured initialisation so every parameter matters.
    let flat: Vec<f64> = p.to_flat().iter().map(|v| v + rng.random::<f64>() * 0.2 - 0.1).collect();
    p.set_flat(&flat);
    p
}

#[test]
fn criterion_3_gradient_correctness() {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_input: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    for _ in 0..50 {
        let p = soft_random_ndt(&mut rng);
        let d = p.n_features();
        let c = p.n_outputs();

        let x = Array1::from_shape_simple_fn(d, || rng.random::<f64>() * 2.0 - 1.0);
        let output = rng.random_range(0..c);
        let analytic = p.input_gradients(x.view().insert_axis(Axis(0)), output).unwrap().row(0).to_vec();
        let numeric: Vec<f64> = (0..d)
            .map(|j| {
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[j] += STEP;
                lo[j] -= STEP;
                let fh = p.forward(hi.view().insert_axis(Axis(0))).unwrap()[[0, output]];
                let fl = p.forward(lo.view().insert_axis(Axis(0))).unwrap()[[0, output]];
                (fh - fl) / (2.0 * STEP)
            })
            .collect();
        worst_input = worst_input.max(rel_err(&analytic, &numeric));

        let n = 8;
        let pts = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() * 2.0 - 1.0);
        let targets = Array2::from_shape_simple_fn((n, c), || rng.random::<f64>() * 2.0 - 1.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (_, grads) = p.loss_and_grads(pts.view(), targets.view(), &w).unwrap();
        let analytic = grads.to_flat();
        let base = p.to_flat();
        assert_eq!(base.len(), analytic.len());
        let numeric: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut q = p.clone();
                let mut v = base.clone();
                v[k] = base[k] + STEP;
                q.set_flat(&v);
                let lh = q.fidelity_loss(pts.view(), targets.view(), &w).unwrap();
                v[k] = base[k] - STEP;
                q.set_flat(&v);
                let ll = q.fidelity_loss(pts.view(), targets.view(), &w).unwrap();
                (lh - ll) / (2.0 * STEP)
            })
            .collect();
        worst_param = worst_param.max(rel_err(&analytic, &numeric));
    }
    let grads_ok = worst_input < 1e-4 && worst_param < 1e-4;

    let mut in_band = 0;
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let p = soft_random_ndt(&mut rng);
        let d = p.n_features();
        let x0 = Array1::from_shape_simple_fn(d, || rng.random::<f64>() * 2.0 - 1.0);
        let mut u = Array1::from_shape_simple_fn(d, || rng.random::<f64>() * 2.0 - 1.0);
        let norm = u.dot(&u).sqrt();
        u.mapv_inplace(|v| v / norm);
        let r = taylor_residual_check(&p, x0.view(), u.view(), &[0.04, 0.02], 0).unwrap();
        let ratio = r[0] / r[1];
        ratios.push(ratio);
        if (6.0..=10.0).contains(&ratio) {
            in_band += 1;
        }
    }
    let taylor_ok = in_band >= 18;
    let pass = grads_ok && taylor_ok;
    report(
        3,
        "gradient correctness",
        pass,
        &format!("input rel err {worst_input:.2e}, param rel err {worst_param:.2e}, Taylor ratio in [6,10] at {in_band}/20"),
    );
    assert!(grads_ok, "gradient errors {worst_input} {worst_param}");
    assert!(taylor_ok, "Taylor ratios {ratios:?}");
}

fn oracle_r2(f: &[f64], g: &[f64]) -> Option<f64> {
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let tot: f64 = f.iter().map(|v| (v - mean) * (v - mean)).sum();
    let res: f64 = f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
    if tot < 1e-12 {
        None
    } else {
        Some(1.0 - res / tot)
    }
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn oracle_stability(expl: &[Vec<f64>]) -> f64 {
    let r = expl.len();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..r {
        for j in 0..r {
            if i < j {
                total += oracle_cos(&expl[i], &expl[j]);
                pairs += 1.0;
            }
        }
    }
    total / pairs
}

fn oracle_regularity(expl: &[Vec<f64>], feats: &Array2<f64>, k: usize) -> Vec<f64> {
    let n = expl.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = feats.row(i).iter().zip(feats.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            others[..k].iter().map(|&(_, j)| oracle_cos(&expl[i], &expl[j])).sum::<f64>() / k as f64
        })
        .collect()
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(3..=20);
        let d = rng.random_range(1..=5);
        let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let g: Vec<f64> = f.iter().map(|v| v + rng.random::<f64>() - 0.5).collect();
        let r2 = fidelity_r2(&f, &g).unwrap().unwrap();
        worst = worst.max((r2 - oracle_r2(&f, &g).unwrap()).abs());

        let expl: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        worst = worst.max((cosine(&expl[0], &expl[1]) - oracle_cos(&expl[0], &expl[1])).abs());
        let reps = rng.random_range(2..=6).min(n);
        let s = stability_of(&expl[..reps]).unwrap().unwrap();
        worst = worst.max((s - oracle_stability(&expl[..reps])).abs());

        let feats = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>());
        let k = rng.random_range(1..n);
        let reg = regularity_k(&expl, feats.view(), k).unwrap();
        let want = oracle_regularity(&expl, &feats, k);
        worst = worst.max(reg.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let random_ok = worst <= 1e-12;

    let hand_r2 = fidelity_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap() == Some(0.5);
    let hand_cos = cosine(&[1.0, 0.0], &[1.0, 1.0]) == 1.0 / 2f64.sqrt();
    let hand_stab = stability_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap() == Some(1.0 / 3.0);
    let pass = random_ok && hand_r2 && hand_cos && hand_stab;
    report(
        4,
        "metric oracles",
        pass,
        &format!("max abs deviation {worst:.2e}; hand examples r2={hand_r2} cos={hand_cos} stability={hand_stab}"),
    );
    assert!(pass);
}

fn blob_config() -> ExperimentConfig {
    ExperimentConfig {
        datasets: vec!["blobs".into()],
        blob_features: 2,
        blob_classes: 2,
        n_samples: 800,
        ..Default::default()
    }
}

#[test]
fn criterion_5_finetuning_efficacy() {
    let start = Instant::now();
    let cfg = blob_config();
    let mut improved = 0;
    let mut losses = Vec::new();
    for seed in 0..20u64 {
        let prep = prepare(&cfg, "blobs", seed, &cfg.hidden_sizes).unwrap();
        let grid = boundary_grid(&prep, &ExperimentConfig { grid_resolution: 2, ..cfg.clone() }, seed).unwrap();
        losses.push((grid.loss_init, grid.loss_tuned));
        if grid.loss_tuned < grid.loss_init && !grid.diverged {
            improved += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = improved >= 19 && elapsed < Duration::from_secs(60);
    report(5, "fine-tuning efficacy", pass, &format!("loss decreased in {improved}/20 runs, {elapsed:.2?}"));
    assert!(pass, "losses {losses:?}");
}

fn mean_fidelity(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

#[test]
fn criterion_6_fidelity_ordering() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for name in ["friedman1", "blobs"] {
        let cfg = ExperimentConfig {
            datasets: vec![name.into()],
            synth_rows: 2000,
            hidden_sizes: vec![64, 32],
            n_test_instances: 20,
            ..blob_config()
        };
        let mut wins = 0;
        for seed in 0..10u64 {
            let prep = prepare(&cfg, name, seed, &cfg.hidden_sizes).unwrap();
            let lr = mean_fidelity(&prep.fidelities(&cfg, SurrogateKind::Linear).unwrap());
            let dt = mean_fidelity(&prep.fidelities(&cfg, SurrogateKind::Tree).unwrap());
            let ndt = mean_fidelity(&prep.fidelities(&cfg, SurrogateKind::Ndt).unwrap());
            if ndt > lr && ndt > dt {
                wins += 1;
            }
        }
        pass &= wins >= 8;
        lines.push(format!("{name} NDT best in {wins}/10 seeds"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    report(6, "fidelity ordering", pass, &format!("{}, {elapsed:.2?}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_7_depth_sweep_trend() {
    let start = Instant::now();
    let mut lr_drop = 0;
    let mut gap_grows = 0;
    for seed in 0..10u64 {
        let cfg = ExperimentConfig {
            datasets: vec!["friedman1".into()],
            surrogates: vec![SurrogateKind::Linear, SurrogateKind::Ndt],
            depth_range: vec![1, 4],
            n_dataset_seeds: 1,
            seed,
            ..Default::default()
        };
        let (rows, errors) = compute_depth_sweep(&cfg).unwrap();
        assert!(errors.is_empty(), "{errors:?}");
        let get = |depth: usize, kind: SurrogateKind| {
            rows.iter().find(|r| r.param == depth && r.surrogate == kind).and_then(|r| r.mean).unwrap()
        };
        let (lr1, lr4) = (get(1, SurrogateKind::Linear), get(4, SurrogateKind::Linear));
        let (ndt1, ndt4) = (get(1, SurrogateKind::Ndt), get(4, SurrogateKind::Ndt));
        if lr4 < lr1 {
            lr_drop += 1;
        }
        if ndt4 - lr4 >= ndt1 - lr1 {
            gap_grows += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = lr_drop >= 7 && gap_grows >= 7 && elapsed < Duration::from_secs(600);
    report(
        7,
        "depth-sweep trend",
        pass,
        &format!("LR drops in {lr_drop}/10 seeds, NDT-LR gap grows in {gap_grows}/10, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_stability_sanity() {
    let cfg = ExperimentConfig {
        datasets: vec!["iris".into()],
        ..Default::default()
    };
    let prep = prepare(&cfg, "iris", cfg.seed, &cfg.hidden_sizes).unwrap();
    let report_lr = prep.evaluate(&cfg, SurrogateKind::Linear).unwrap();
    let lr_stability = report_lr.stability.unwrap().mean;
    let constant = stability(|_seed| Ok(vec![0.3, -1.2, 2.0]), 7, 5).unwrap();
    let pass = lr_stability >= 0.95 && constant == Some(1.0);
    report(
        8,
        "stability sanity",
        pass,
        &format!("Iris LR stability {lr_stability:.4}, deterministic explainer {constant:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        datasets: vec!["iris".into(), "friedman1".into()],
        synth_rows: 400,
        n_test_instances: 6,
        n_repeats: 3,
        n_dataset_seeds: 2,
        ..Default::default()
    };
    let run = |sub: &str| {
        let cfg = ExperimentConfig {
            out: dir.path().join(sub),
            ..base.clone()
        };
        let manifest = run_table(&cfg).unwrap();
        assert!(manifest.is_ok(), "{:?}", manifest.errors);
        std::fs::read(dir.path().join(sub).join("table.csv")).unwrap()
    };
    let a = run("first");
    let b = run("second");
    let pass = !a.is_empty() && a == b;
    report(9, "determinism", pass, &format!("table.csv {} bytes, identical: {}", a.len(), a == b));
    assert!(pass);
}

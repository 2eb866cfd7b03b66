//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N ...: PASS|FAIL` line before asserting.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`; the
//! end-to-end benchmark (criterion 6) is ignored by default because it trains
//! ten full models.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use num_rational::Ratio;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use geowgan::config::RunConfig;
use geowgan::dataset::generate_dataset;
use geowgan::evaluation::{evaluate_checkpoint, nested_cv, ridge_fit, Matrix, RidgeOptions, RowLedger};
use geowgan::losses::{
    critic_loss, discriminator_loss, generator_loss, generator_loss_from_outputs, gradient_penalty, interpolate, semisup_task_loss,
    LossBreakdown, LossOptions,
};
use geowgan::models::{expand_first_layer, InitScheme};
use geowgan::seed;
use geowgan::tasks::{compute_weights, BinningScheme, TaskSpec};
use geowgan::training::{lr_at, train, TrainingConfig, METRICS_FILE};
use geowgan::{Graph, Tensor, Var};

fn report(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n} ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn constant(v: Var<'_, f64>, c: f64) -> Var<'_, f64> {
    v.scale(0.0).row_sum().add_scalar(c)
}

fn sum_critic(v: Var<'_, f64>) -> Var<'_, f64> {
    v.row_sum()
}

fn linear<'g>(x: Var<'g, f64>, w: Var<'g, f64>, n: usize) -> Var<'g, f64> {
    x.matmul(w, false, false).reshape(&[n])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn criterion_1_loss_arithmetic() {
    let started = Instant::now();
    let tol = 1e-10;
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if !close(got, want, tol) {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };

    let ones = Tensor::<f64>::full(&[2, 4], 1.0);
    let zeros = Tensor::<f64>::zeros(&[2, 4]);
    let mid = interpolate(&ones, &zeros, &[0.5, 0.5]).unwrap();
    check("midpoint", mid.max_abs_diff(&Tensor::full(&[2, 4], 0.5)), 0.0);
    check("eps=1", interpolate(&ones, &zeros, &[1.0, 1.0]).unwrap().max_abs_diff(&ones), 0.0);
    check("eps=0", interpolate(&ones, &zeros, &[0.0, 0.0]).unwrap().max_abs_diff(&zeros), 0.0);

    // linear critic with ||w|| = 5
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1));
    let w = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let critic = x.matmul(w, false, false).reshape(&[3]);
    check("linear penalty", gradient_penalty(&g, x, critic, 10.0).unwrap().value().item(), 160.0);

    let unit = g.constant(Tensor::new(vec![2, 1], vec![0.6, 0.8]).unwrap());
    let critic = x.matmul(unit, false, false).reshape(&[3]);
    check("unit-norm penalty", gradient_penalty(&g, x, critic, 10.0).unwrap().value().item(), 0.0);

    check("constant penalty", gradient_penalty(&g, x, constant(x, 2.5), 10.0).unwrap().value().item(), 10.0);

    let real = g.leaf(Tensor::full(&[2, 3], 0.7));
    let fake = g.leaf(Tensor::full(&[2, 3], -0.2));
    let pen = gradient_penalty(&g, real, constant(real, 2.5), 10.0).unwrap();
    check("constant critic loss", critic_loss(constant(real, 2.5), constant(fake, 2.5), pen).value().item(), 10.0);

    let real = g.leaf(Tensor::full(&[1, 2, 2, 1], 1.0));
    let fake = g.leaf(Tensor::zeros(&[1, 2, 2, 1]));
    let hat = g.leaf(interpolate(&real.value(), &fake.value(), &[0.4]).unwrap());
    let pen = gradient_penalty(&g, hat, sum_critic(hat), 10.0).unwrap();
    check("sum critic loss", critic_loss(sum_critic(real), sum_critic(fake), pen).value().item(), -4.0 + 10.0);
    let pen = gradient_penalty(&g, hat, sum_critic(hat), 10.0).unwrap();
    let same = critic_loss(sum_critic(real), sum_critic(real), pen).value().item() - pen.value().item();
    check("identical batches cancel", same, 0.0);

    let uniform = g.constant(Tensor::zeros(&[2, 4]));
    let terms = semisup_task_loss(Some((uniform, &[0, 2][..], &[1.0, 1.0][..])), Some(uniform), Some(uniform)).unwrap();
    check("labeled term", terms.labeled.unwrap().value().item(), 3f64.ln());
    check("unlabeled term", terms.unlabeled.unwrap().value().item(), -(0.75f64).ln());
    check("fake term", terms.fake.unwrap().value().item(), 4f64.ln());
    let confident = g.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 60.0]).unwrap());
    let terms = semisup_task_loss(None, None, Some(confident)).unwrap();
    check("confident fake", terms.fake.unwrap().value().item(), 0.0);
    let terms = semisup_task_loss(Some((uniform, &[0, 1][..], &[0.0, 0.0][..])), None, None).unwrap();
    check("zero weights", terms.labeled.unwrap().value().item(), 0.0);

    let names = vec!["a".to_string()];
    let c = g.constant(Tensor::full(&[2], 1.5));
    let (l, b) = generator_loss_from_outputs(c, &[uniform], &names, &[1.0], 0.0).unwrap();
    check("generator uniform", l.value().item(), (0.25f64).ln());
    check("generator breakdown", b.total, (0.25f64).ln());
    let (_, b) = generator_loss_from_outputs(c, &[uniform], &names, &[0.0], 1.0).unwrap();
    check("generator constant critic", b.wgan, -1.5);

    let two = vec![("a".to_string(), 1.0), ("b".to_string(), 2.0)];
    let b = LossBreakdown::assemble(3.0, two.clone(), &[0.5, 0.25], 1.0, 10.0);
    check("two-task total", b.total, 4.0);
    let b = LossBreakdown::assemble(3.0, two.clone(), &[0.5, 0.25], 0.0, 10.0);
    check("alpha=0", b.total, b.multitask);
    let b = LossBreakdown::assemble(3.0, two, &[0.0, 0.0], 0.7, 10.0);
    check("zero importance", b.total, 0.7 * 3.0);

    let d = common::tiny_discriminator();
    let bundle = common::tiny_bundle();
    let g = Graph::<f64>::new();
    let p = d.params.bind(&g, false);
    for alpha in [0.0, 1.0] {
        let opts = LossOptions {
            alpha,
            lambda: 10.0,
            semi_supervised: true,
        };
        let (l, b) = discriminator_loss(&g, &d, &p, &bundle, &[1.0], opts).unwrap();
        check("graph total = breakdown", l.value().item(), b.total);
        check("total = alpha wgan + multitask", b.total, alpha * b.wgan + b.multitask);
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 1.0;
    report(1, "loss arithmetic", pass, format!("{} failures {:?}, {secs:.3}s", failures.len(), failures));
}

/// `||a - n|| / max(||a||, ||n||)` over all parameters.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-300)
}

fn finite_differences(params: &geowgan::models::ParamSet<f64>, loss: impl Fn(&geowgan::models::ParamSet<f64>) -> f64) -> Vec<f64> {
    // a generator ReLU input sits within 1e-5 of its kink at this seed
    let h = 1e-6;
    let mut out = Vec::with_capacity(params.num_scalars());
    let mut p = params.clone();
    for t in 0..params.len() {
        for i in 0..params.entries[t].1.len() {
            let orig = p.entries[t].1.data()[i];
            p.entries[t].1.data_mut()[i] = orig + h;
            let up = loss(&p);
            p.entries[t].1.data_mut()[i] = orig - h;
            let down = loss(&p);
            p.entries[t].1.data_mut()[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn flatten(grads: Vec<Option<geowgan::Var<'_, f64>>>, params: &geowgan::models::ParamSet<f64>) -> Vec<f64> {
    grads
        .into_iter()
        .zip(params.tensors())
        .flat_map(|(g, t)| match g {
            Some(g) => g.value().data().to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect()
}

#[test]
fn criterion_2_gradient_checks() {
    let started = Instant::now();
    let d = common::tiny_discriminator();
    let gen = common::tiny_generator();
    let bundle = common::tiny_bundle();
    let opts = LossOptions {
        alpha: 1.0,
        lambda: 10.0,
        semi_supervised: true,
    };

    let d_loss = |params: &geowgan::models::ParamSet<f64>| {
        let mut dd = d.clone();
        dd.params = params.clone();
        let g = Graph::new();
        let p = dd.params.bind(&g, false);
        discriminator_loss(&g, &dd, &p, &bundle, &[1.0], opts).unwrap().0.value().item()
    };
    let g = Graph::new();
    let p = d.params.bind(&g, true);
    let (l, _) = discriminator_loss(&g, &d, &p, &bundle, &[1.0], opts).unwrap();
    let analytic_d = flatten(g.grad(l, &p, false), &d.params);
    let err_d = relative_error(&analytic_d, &finite_differences(&d.params, d_loss));

    let mut rng = seed::stream(9, "test-noise", &[]);
    let z = gen.sample_noise(4, &mut rng);
    let g_loss = |params: &geowgan::models::ParamSet<f64>| {
        let mut gg = gen.clone();
        gg.params = params.clone();
        let g = Graph::new();
        let gp = gg.params.bind(&g, false);
        let dp = d.params.bind(&g, false);
        generator_loss(&g, &gg, &gp, &d, &dp, z.clone(), &[1.0], 1.0).unwrap().0.value().item()
    };
    let g = Graph::new();
    let gp = gen.params.bind(&g, true);
    let dp = d.params.bind(&g, false);
    let (l, _) = generator_loss(&g, &gen, &gp, &d, &dp, z.clone(), &[1.0], 1.0).unwrap();
    let analytic_g = flatten(g.grad(l, &gp, false), &gen.params);
    let err_g = relative_error(&analytic_g, &finite_differences(&gen.params, g_loss));

    let secs = started.elapsed().as_secs_f64();
    let sizes = (d.params.num_scalars(), gen.params.num_scalars());
    let pass = err_d < 1e-4 && err_g < 1e-4 && sizes.0 <= 500 && sizes.1 <= 500 && secs < 60.0;
    report(
        2,
        "gradient checks",
        pass,
        format!("L_D rel err {err_d:.2e} ({} params), L_G rel err {err_g:.2e} ({} params), {secs:.1}s", sizes.0, sizes.1),
    );
}

#[test]
fn criterion_3_emd_sanity() {
    let started = Instant::now();
    let (a, b) = (0.0, 3.0);
    // the stationary point of w (b - a) - lambda (|w| - 1)^2 overshoots the
    // gap by (b - a)^2 / (2 lambda), so a stiff penalty keeps it under 10%
    let lambda = 50.0;
    let n = 8;
    let mut rng = seed::stream(2024, "emd", &[]);
    let mut w: f64 = rng.gen_range(-0.5..0.5);
    let real = Tensor::<f64>::full(&[n, 1], b);
    let fake = Tensor::<f64>::full(&[n, 1], a);
    let mut gap = 0.0;
    for _ in 0..2000 {
        let eps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let g = Graph::new();
        let wv = g.leaf(Tensor::new(vec![1, 1], vec![w]).unwrap());
        let critic = |x| linear(x, wv, n);
        let hat = g.leaf(interpolate(&real, &fake, &eps).unwrap());
        let pen = gradient_penalty(&g, hat, critic(hat), lambda).unwrap();
        let rc = critic(g.constant(real.clone()));
        let fc = critic(g.constant(fake.clone()));
        gap = rc.mean().value().item() - fc.mean().value().item();
        let loss = critic_loss(rc, fc, pen);
        let grad = g.grad(loss, &[wv], false)[0].unwrap().value().item();
        w -= 0.005 * grad;
    }
    let secs = started.elapsed().as_secs_f64();
    let target = (a - b).abs();
    let pass = (gap - target).abs() <= 0.1 * target && secs < 30.0;
    report(3, "EMD sanity", pass, format!("gap {gap:.4} vs |a-b| {target} (lambda {lambda}), {secs:.2}s"));
}

/// Gaussian elimination with partial pivoting on a dense system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Normal equations on `[1 | Z]` with Z the standardized design and an
/// unpenalized intercept column; returns (coef, intercept) on the raw scale.
fn oracle_ridge(rows: &[Vec<f64>], y: &[f64], k: f64) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let aug: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| std::iter::once(1.0).chain((0..d).map(|j| (r[j] - mu[j]) / sd[j])).collect())
        .collect();
    let mut ata = vec![vec![0.0; d + 1]; d + 1];
    let mut aty = vec![0.0; d + 1];
    for (row, &t) in aug.iter().zip(y) {
        for i in 0..=d {
            aty[i] += row[i] * t;
            for j in 0..=d {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, r) in ata.iter_mut().enumerate().skip(1) {
        r[i] += k;
    }
    let theta = solve(ata, aty);
    let coef: Vec<f64> = (0..d).map(|j| theta[j + 1] / sd[j]).collect();
    let intercept = theta[0] - (0..d).map(|j| coef[j] * mu[j]).sum::<f64>();
    (coef, intercept)
}

#[test]
fn criterion_4_ridge_oracle_and_cv_hygiene() {
    let started = Instant::now();
    let mut rng = seed::stream(77, "ridge-oracle", &[]);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = rng.gen_range(1..=5);
        let n = rng.gen_range(d + 2..=20);
        let scales: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.gen_range(-1.0..1.0))).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| scales.iter().map(|s| s * rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let k = if case % 4 == 0 { 0.0 } else { 10f64.powf(rng.gen_range(-3.0..2.0)) };
        let x = Matrix::from_rows(&rows).unwrap();
        let fit = ridge_fit(&x, &y, k, RidgeOptions::default()).unwrap();
        let (coef, intercept) = oracle_ridge(&rows, &y, k);
        for (a, b) in fit.coef.iter().zip(&coef).chain([(&fit.intercept, &intercept)]) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let mut ledger = RowLedger::default();
    let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[0] - 2.0 * r[1] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let grid = geowgan::config::log_grid(1e-4, 1e4, 9);
    let rep = nested_cv(&x, &y, &grid, 5, 4, 3, Some(&mut ledger)).unwrap();
    let leaks = ledger.leaks();
    let covered = ledger.test_rows.iter().map(Vec::len).sum::<usize>() == 60 && rep.predictions.iter().all(|p| p.is_finite());

    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-8 && leaks == 0 && covered && !ledger.events.is_empty() && secs < 30.0;
    report(
        4,
        "ridge oracle / nested-CV hygiene",
        pass,
        format!("max rel diff {worst:.2e} over 100 systems, {} ledger events, {leaks} leaks, {secs:.2}s", ledger.events.len()),
    );
}

#[test]
fn criterion_5_weighting_invariant() {
    let counts = [64031u64, 20050, 14639];
    let spec = TaskSpec::new("awi", BinningScheme::from_edges(vec![0.0, 1.0, 2.0, 3.0]).unwrap(), 1.0).unwrap();
    let map = HashMap::from([("awi".to_string(), counts.to_vec())]);

    let exact: geowgan::RationalWeightTable = compute_weights(std::slice::from_ref(&spec), &map).unwrap();
    let masses: Vec<Ratio<i128>> = exact.per_task[0]
        .1
        .iter()
        .zip(counts)
        .map(|(w, n)| w * Ratio::from_integer(n as i128))
        .collect();
    let exact_equal = masses.iter().all(|m| *m == masses[0]);

    let float: geowgan::WeightTable64 = compute_weights(&[spec], &map).unwrap();
    let m: Vec<f64> = float.per_task[0].1.iter().zip(counts).map(|(w, n)| w * n as f64).collect();
    let spread = m.iter().map(|v| (v - m[0]).abs() / m[0]).fold(0.0, f64::max);

    report(
        5,
        "weighting invariant",
        exact_equal && spread <= 1e-12,
        format!("rational masses equal: {exact_equal}; f64 relative spread {spread:.1e}; weights {:?}", float.per_task[0].1),
    );
}

#[test]
fn criterion_7_schedule_fidelity() {
    let cfg = TrainingConfig::from(&RunConfig::default());
    let e26 = 0.01 * 0.98f64.powf(26.0) / 5.0;
    let got = [lr_at(0, &cfg), lr_at(1, &cfg), lr_at(26, &cfg)];
    let pass = got == [0.01, 0.0098, e26];
    report(7, "schedule fidelity", pass, format!("lr at 0/1/26 = {got:?}"));
}

#[test]
fn criterion_8_determinism() {
    let (cfg, data) = common::tiny_dataset(21);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let texts: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            train::<f32>(&cfg, &data, d.path(), None).unwrap();
            std::fs::read(d.path().join(METRICS_FILE)).unwrap()
        })
        .collect();
    let rows = texts[0].iter().filter(|&&b| b == b'\n').count();
    report(8, "determinism", texts[0] == texts[1] && rows > 1, format!("{} bytes, {rows} lines, identical: {}", texts[0].len(), texts[0] == texts[1]));
}

#[test]
fn criterion_9_init_schemes() {
    let mut rng = seed::stream(31, "filter-bank", &[]);
    let normal = Normal::new(0.1, 0.3).unwrap();
    let bank = Tensor::<f64>::from_fn(&[32, 3, 7, 7], |_| normal.sample(&mut rng));
    let src = bank.data();
    let nb = src.len() as f64;
    let mean = src.iter().sum::<f64>() / nb;
    let std = (src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nb).sqrt();

    let same = expand_first_layer(&bank, 9, InitScheme::SameInit, 0).unwrap();
    let mut same_ok = true;
    for o in 0..32 {
        for c in 0..9 {
            for p in 0..49 {
                let got = same.data()[(o * 9 + c) * 49 + p];
                let want = if c < 3 {
                    src[(o * 3 + c) * 49 + p]
                } else {
                    (src[o * 147 + p] + src[o * 147 + 49 + p] + src[o * 147 + 98 + p]) / 3.0
                };
                same_ok &= got == want;
            }
        }
    }

    let rand = expand_first_layer(&bank, 9, InitScheme::RandomInit, 5).unwrap();
    let extra: Vec<f64> = (0..32)
        .flat_map(|o| rand.data()[(o * 9 + 3) * 49..(o * 9 + 9) * 49].to_vec())
        .collect();
    let copied = (0..32).all(|o| rand.data()[o * 441..o * 441 + 147] == src[o * 147..o * 147 + 147]);
    let n = extra.len() as f64;
    let m = extra.iter().sum::<f64>() / n;
    let s = (extra.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let bound = 4.0 * std / n.sqrt();
    let bounded = extra.iter().all(|v| (v - mean).abs() <= 2.0 * std / 0.879_625_661_034_239_8 + 1e-12);
    let pass = same_ok && copied && (m - mean).abs() <= bound && (s - std).abs() <= bound && bounded;
    report(
        9,
        "init schemes",
        pass,
        format!("same-init exact: {same_ok}; random-init mean {m:.4} vs {mean:.4}, std {s:.4} vs {std:.4}, bound {bound:.4} (n = {n})"),
    );
}

/// Benchmark settings; `GEOWGAN_BENCH_*` environment variables shrink the
/// run for smoke testing (the criterion is only meaningful at the defaults).
fn bench_config(seed_value: u64) -> RunConfig {
    let env = |k: &str| std::env::var(k).ok();
    let mut c = RunConfig {
        seed: seed_value,
        tiles: 10_000,
        tile_size: 32,
        bands: 9,
        labeled_fraction: 0.05,
        epochs: 30,
        ..RunConfig::default()
    };
    for kv in env("GEOWGAN_BENCH_SET").unwrap_or_default().split(';').filter(|s| !s.is_empty()) {
        c.set(kv).expect("valid GEOWGAN_BENCH_SET override");
    }
    c
}

fn bench_arm(cfg: &RunConfig, data: &geowgan::dataset::Dataset, dir: &Path) -> (f64, Option<f64>) {
    let summary = train::<f32>(cfg, data, dir, None).expect("training finishes");
    let (_, rep) = evaluate_checkpoint(&summary.final_checkpoint, data, cfg).expect("evaluation");
    (rep.pearson_r, rep.baseline_r)
}

#[test]
#[ignore = "trains ten models; run explicitly with --ignored"]
fn criterion_6_end_to_end_benchmark() {
    let seeds: u64 = std::env::var("GEOWGAN_BENCH_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let root = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in 0..seeds {
        let started = Instant::now();
        let cfg = bench_config(s);
        let data = generate_dataset(&cfg).unwrap();
        let (semi, baseline) = bench_arm(&cfg, &data, &root.path().join(format!("semi{s}")));
        let control_cfg = RunConfig {
            semi_supervised: false,
            alpha: 0.0,
            ..cfg.clone()
        };
        let (control, _) = bench_arm(&control_cfg, &data, &root.path().join(format!("ctrl{s}")));
        let baseline = baseline.unwrap_or(f64::NAN);
        let ok = semi >= baseline + 0.05 && semi > control;
        wins += ok as usize;
        let line = format!(
            "seed {s}: semi r {semi:.4}, control r {control:.4}, baseline r {baseline:.4} -> {} ({:.0}s)",
            if ok { "ok" } else { "miss" },
            started.elapsed().as_secs_f64()
        );
        eprintln!("{line}");
        lines.push(line);
    }
    let need = (4 * seeds).div_ceil(5) as usize;
    report(6, "end-to-end benchmark", wins >= need, format!("{wins}/{seeds} seeds pass; {}", lines.join("; ")));
}

//! Acceptance criteria, one test each. Every test writes a single
//! `[criterion N] PASS|FAIL ...` line to stderr, bypassing output capture so
//! the summary shows up in plain `cargo test` logs.

use std::io::Write;
use std::time::{Duration, Instant};

use hwbp::engine::{
    backprop_from_forward, exact_backprop, highway_bp, highway_from_forward, Algorithm, HighwayOptions,
    LossAttachment, PathSplit,
};
use hwbp::harness::{bench, preset_model, random_batch, train, TrainConfig, Trainer};
use hwbp::oracle::{brute_force_estimate, finite_diff_gradient, norm_profile};
use hwbp::{cumsumprod_par, cumsumprod_seq, rel_l2, KChain, ResidualJacobian, Rng, Vec64};
use rayon::prelude::*;

const KINDS: [&str; 5] = ["plain", "relu", "gamma", "gru", "lstm"];

fn report(n: usize, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!("[criterion {n}] {verdict} {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn finish(n: usize, passed: bool, detail: String) {
    report(n, passed, &detail);
    assert!(passed, "criterion {n}: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn attach(draw: u64) -> LossAttachment {
    if draw % 2 == 0 {
        LossAttachment::Every
    } else {
        LossAttachment::Final
    }
}

#[test]
fn criterion_01_exactness() {
    let started = Instant::now();
    let mut cases = Vec::new();
    for kind in KINDS {
        for l in [1, 2, 7, 16, 64] {
            for d in [1, 4, 16] {
                for draw in 0..20u64 {
                    cases.push((kind, l, d, draw));
                }
            }
        }
    }
    let errors: Vec<f64> = cases
        .par_iter()
        .map(|&(kind, l, d, draw)| {
            let seed = 1000 * l as u64 + 100 * d as u64 + draw;
            let model = preset_model(kind, l, d, attach(draw), seed).unwrap();
            let batch = random_batch(&model, 3, &mut Rng::new(seed).split(7));
            let hw = highway_bp(&model, &batch, l).unwrap();
            let bp = exact_backprop(&model, &batch).unwrap();
            rel_l2(&hw.grads.flatten(), &bp.grads.flatten())
        })
        .collect();
    let elapsed = started.elapsed();
    let w = worst(errors.iter().copied());
    let passed = w <= 1e-10 && elapsed < Duration::from_secs(120);
    finish(
        1,
        passed,
        format!("{} cases, worst rel err {w:.2e} (tol 1e-10), {} (limit 120s)", cases.len(), secs(elapsed)),
    );
}

#[test]
fn criterion_02_path_oracle() {
    let started = Instant::now();
    let mut cases = Vec::new();
    for kind in KINDS {
        for l in 1..=8 {
            for d in [1, 2, 4] {
                for draw in 0..2u64 {
                    cases.push((kind, l, d, draw));
                }
            }
        }
    }
    let errors: Vec<f64> = cases
        .par_iter()
        .map(|&(kind, l, d, draw)| {
            // lstm width is the cell width; keep its state within 4
            let d = if kind == "lstm" { d.min(2) } else { d };
            let seed = 31 * l as u64 + 7 * d as u64 + draw;
            let model = preset_model(kind, l, d, attach(draw), seed).unwrap();
            let batch = random_batch(&model, 2, &mut Rng::new(seed).split(3));
            let fwd = hwbp::run_forward(&model, &batch).unwrap();
            let hw = highway_from_forward(
                &model,
                &fwd,
                l,
                HighwayOptions {
                    split: PathSplit::Residual,
                    retain: true,
                },
            )
            .unwrap();
            let estimates = hw.estimates.unwrap();
            assert_eq!(estimates.len(), l + 1);
            worst(estimates.iter().enumerate().flat_map(|(k, est)| {
                let bf = brute_force_estimate(&model, &fwd, k).unwrap();
                bf.w.iter()
                    .zip(&est.w)
                    .map(|(a, b)| rel_l2(a.as_slice(), b.as_slice()))
                    .collect::<Vec<_>>()
            }))
        })
        .collect();
    let elapsed = started.elapsed();
    let w = worst(errors);
    let passed = w <= 1e-12 && elapsed < Duration::from_secs(300);
    finish(
        2,
        passed,
        format!("{} models, every (i, k), worst rel err {w:.2e} (tol 1e-12), {} (limit 300s)", cases.len(), secs(elapsed)),
    );
}

fn random_k(rng: &mut Rng, dim: usize) -> ResidualJacobian {
    match rng.below(4) {
        0 => ResidualJacobian::identity(dim),
        1 => ResidualJacobian::zero(dim),
        2 => ResidualJacobian::scalar(dim, 0.5 + rng.uniform()),
        _ => ResidualJacobian::diagonal(Vec64::new((0..dim).map(|_| 0.5 + rng.uniform()).collect()).unwrap()),
    }
}

fn ceil_log2(n: usize) -> usize {
    (0..).find(|&m| 1usize << m >= n).unwrap()
}

#[test]
fn criterion_03_scan() {
    let mut rng = Rng::new(2024);
    let mut worst_err: f64 = 0.0;
    let mut levels_ok = true;
    for _ in 0..200 {
        let n = 1 + rng.below(129);
        let dim = 1 + rng.below(6);
        let a: Vec<Vec64> = (0..n).map(|_| rng.normal(dim, 1.0)).collect();
        let chain = KChain::new((0..n).map(|_| random_k(&mut rng, dim)).collect()).unwrap();
        let seq = cumsumprod_seq(&a, &chain).unwrap();
        let par = cumsumprod_par(a, &chain).unwrap();
        let flat = |v: &[Vec64]| v.iter().flat_map(|x| x.as_slice().to_vec()).collect::<Vec<_>>();
        worst_err = worst_err.max(rel_l2(&flat(&par.values), &flat(&seq)));
        levels_ok &= par.levels == ceil_log2(n);
    }
    let passed = worst_err <= 1e-12 && levels_ok;
    finish(
        3,
        passed,
        format!("200 chains, worst rel err {worst_err:.2e} (tol 1e-12), level counts exact: {levels_ok}"),
    );
}

#[test]
fn criterion_04_finite_differences() {
    let mut rows = Vec::new();
    for kind in KINDS {
        for (l, d, draw) in [(3, 3, 0u64), (6, 4, 1), (10, 2, 2)] {
            let model = preset_model(kind, l, d, attach(draw), 40 + draw).unwrap();
            let params = model.params.num_scalars();
            assert!(params <= 2000, "{kind}: {params} parameters");
            let batch = random_batch(&model, 2, &mut Rng::new(draw).split(4));
            let fd = finite_diff_gradient(&model, &batch, 1e-6).unwrap().flatten();
            let bp = exact_backprop(&model, &batch).unwrap().grads.flatten();
            let hw = highway_bp(&model, &batch, l).unwrap().grads.flatten();
            rows.push(rel_l2(&bp, &fd).max(rel_l2(&hw, &fd)));
        }
    }
    let w = worst(rows.iter().copied());
    finish(
        4,
        w <= 1e-5,
        format!("{} models, worst rel err vs central differences {w:.2e} (tol 1e-5)", rows.len()),
    );
}

#[test]
fn criterion_05_fpi_truncation() {
    let mut errors = Vec::new();
    for kind in ["gru", "lstm"] {
        for (l, seed) in [(1, 0u64), (5, 1), (17, 2), (32, 3)] {
            let model = preset_model(kind, l, 3, LossAttachment::Final, seed).unwrap();
            let batch = random_batch(&model, 2, &mut Rng::new(seed).split(5));
            let fwd = hwbp::run_forward(&model, &batch).unwrap();
            let bp = backprop_from_forward(&model, &fwd).unwrap();
            for k in 0..=l {
                let fpi = highway_from_forward(
                    &model,
                    &fwd,
                    k,
                    HighwayOptions {
                        split: PathSplit::FixedPoint,
                        retain: false,
                    },
                )
                .unwrap();
                for i in 0..=l {
                    let got = fpi.cotangents.w[i].as_slice();
                    errors.push(if i + k >= l {
                        rel_l2(got, bp.cotangents.w[i].as_slice())
                    } else {
                        norm(got)
                    });
                }
            }
        }
    }
    let w = worst(errors.iter().copied());
    finish(
        5,
        w <= 1e-12,
        format!("{} cotangents checked, worst deviation {w:.2e} (tol 1e-12)", errors.len()),
    );
}

fn small_config(model: &str, task: &str, algorithm: &str, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
[model]
{model}
[task]
kind = "{task}"
batch_size = 8
[algorithm]
{algorithm}
[optimizer]
name = "adam"
lr = 0.003
[schedule]
steps = {steps}
[run]
seed = {seed}
log_every = 50
"#
    ))
    .unwrap()
}

#[test]
fn criterion_06_cosine_endpoint() {
    let mut results = Vec::new();
    for (model, task, l) in [
        ("kind = \"gru\"\nlayers = 16\nwidth = 8", "adding", 16),
        ("kind = \"plain\"\nlayers = 12\nwidth = 6", "teacher", 12),
        ("kind = \"lstm\"\nlayers = 10\nwidth = 4", "copy", 10),
    ] {
        let mut t = Trainer::new(small_config(model, task, "name = \"backprop\"", 500, 5)).unwrap();
        let at_init = t.probe(Algorithm::Highway(l)).unwrap().cos_sim;
        for _ in 0..500 {
            t.step().unwrap();
        }
        let trained = t.probe(Algorithm::Highway(l)).unwrap().cos_sim;
        results.push(at_init);
        results.push(trained);
    }
    let w = worst(results.iter().map(|c| (c - 1.0).abs()));
    finish(
        6,
        w <= 1e-9,
        format!("3 models at init and after 500 steps, worst |cos - 1| = {w:.2e} (tol 1e-9)"),
    );
}

fn trend_config(algorithm: &str, seed: u64) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        r#"
[model]
kind = "gru"
layers = 128
width = 64
forget_bias = 1.0
[task]
kind = "adding"
batch_size = 32
eval_batches = 8
[algorithm]
{algorithm}
[optimizer]
name = "adam"
lr = 0.01
[schedule]
steps = 2000
[run]
seed = {seed}
log_every = 500
"#
    ))
    .unwrap()
}

#[test]
fn criterion_07_training_trend() {
    let started = Instant::now();
    let algorithms = [
        ("backprop", "name = \"backprop\""),
        ("fpi(2)", "name = \"fpi\"\nk = 2"),
        ("highway(0)", "name = \"highway\"\nk = 0"),
        ("highway(2)", "name = \"highway\"\nk = 2"),
        ("highway(8)", "name = \"highway\"\nk = 8"),
    ];
    let jobs: Vec<(usize, u64)> = (0..algorithms.len()).flat_map(|a| (0..3).map(move |s| (a, s))).collect();
    let finals: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let r = train(trend_config(algorithms[a].1, seed), None).unwrap();
            (a, r.final_eval_loss.unwrap())
        })
        .collect();
    let elapsed = started.elapsed();
    let mean = |a: usize| {
        let v: Vec<f64> = finals.iter().filter(|f| f.0 == a).map(|f| f.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let [bp, fpi2, hw0, hw2, hw8] = [0, 1, 2, 3, 4].map(mean);
    let ordering = fpi2 > hw0 && hw0 >= hw2 && hw2 >= hw8;
    let close = (hw8 - bp).abs() <= 0.1 * bp;
    let in_time = elapsed < Duration::from_secs(20 * 60);
    let detail = format!(
        "mean final loss backprop {bp:.3e}, fpi(2) {fpi2:.3e}, highway(0) {hw0:.3e}, highway(2) {hw2:.3e}, \
         highway(8) {hw8:.3e}; ordering {ordering}, highway(8) within 10% of backprop {close}, {} (limit 1200s)",
        secs(elapsed)
    );
    finish(7, ordering && close && in_time, detail);
}

#[test]
fn criterion_08_exact_k_training() {
    let mut worst_gap: f64 = 0.0;
    for (model, task, l) in [
        ("kind = \"gru\"\nlayers = 12\nwidth = 6", "adding", 12),
        ("kind = \"relu\"\nlayers = 8\nwidth = 5", "teacher", 8),
    ] {
        let hw = train(small_config(model, task, &format!("name = \"highway\"\nk = {l}"), 200, 9), None).unwrap();
        let bp = train(small_config(model, task, "name = \"backprop\"", 200, 9), None).unwrap();
        assert_eq!(hw.losses.len(), 200);
        for (a, b) in hw.losses.iter().zip(&bp.losses) {
            worst_gap = worst_gap.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    finish(
        8,
        worst_gap <= 1e-8,
        format!("2 runs x 200 steps, worst loss gap {worst_gap:.2e} (tol 1e-8)"),
    );
}

#[test]
fn criterion_09_cost_counters() {
    let cfg = small_config("kind = \"gru\"\nlayers = 64\nwidth = 32", "adding", "name = \"backprop\"", 10, 0);
    let ks = [0, 1, 2, 5, 10];
    let rows = bench(&cfg, &ks, 5).unwrap();
    let l = 64;
    let mut counters_ok = true;
    let mut times = Vec::new();
    for r in &rows {
        let expect = match r.algorithm {
            Algorithm::Backprop => l,
            Algorithm::Highway(k) | Algorithm::Fpi(k) => k * l,
        };
        counters_ok &= r.vjp_block_calls == expect;
        if let Algorithm::Highway(k) = r.algorithm {
            times.push(format!("k={k}: {:.1}ms", r.median_ms));
        }
    }
    let trend = hwbp::harness::highway_time_nondecreasing(&rows);
    finish(
        9,
        counters_ok,
        format!(
            "vjp_block counters exact: {counters_ok}; highway step times {} (non-decreasing: {trend}, reported only)",
            times.join(", ")
        ),
    );
}

#[test]
fn criterion_10_norm_profile() {
    let mut ok = true;
    let mut checked = 0;
    for (kind, draw) in KINDS.iter().flat_map(|k| [(k, 0u64), (k, 1)]) {
        let l = 5;
        let model = preset_model(kind, l, 3, attach(draw), draw).unwrap();
        let batch = random_batch(&model, 2, &mut Rng::new(draw).split(6));
        let fwd = hwbp::run_forward(&model, &batch).unwrap();
        let hw = highway_from_forward(
            &model,
            &fwd,
            l + 4,
            HighwayOptions {
                split: PathSplit::Residual,
                retain: true,
            },
        )
        .unwrap();
        let profile = norm_profile(hw.estimates.as_deref().unwrap()).unwrap();
        ok &= profile[0] > 0.0 && profile[l + 1..].iter().all(|&v| v == 0.0);
        checked += 1;
    }
    // the same through a training run's diagnostics
    let mut cfg = small_config("kind = \"gru\"\nlayers = 6\nwidth = 4", "adding", "name = \"highway\"\nk = 9", 20, 1);
    cfg.run.diag_every = 5;
    let r = train(cfg, None).unwrap();
    for p in r.rows.iter().filter_map(|row| row.norm_profile.as_ref()) {
        ok &= p.len() == 10 && p[0] > 0.0 && p[7..].iter().all(|&v| v == 0.0);
        checked += 1;
    }
    finish(
        10,
        ok,
        format!("{checked} profiles: entries beyond L exactly 0 and k=0 entry positive: {ok}"),
    );
}

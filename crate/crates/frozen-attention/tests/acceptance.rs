//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output. The
//! constructive criteria are exact statements about the built networks and
//! fail the run when violated; the trained criteria are desk-scale
//! reproductions whose outcome is reported either way.
//!
//! `ACCEPTANCE_ONLY=<substring>` restricts the run to matching criteria.
//! `AMES_CSV=<path>` points at the housing data (default
//! `data/AmesHousing.csv` under the workspace root).

use std::path::PathBuf;
use std::time::Instant;

use frozen_attention::algorithms::{
    curvature, gd_multi, gd_step, gd_step_emulated, linear_regression, regression_emulated, ridge_regression,
    AlgorithmKind, AlgorithmParams, AlgorithmSpec, FBounds, GdLayer, Loss, Pair, ScalarFn, f_emulator_for, f_map_oracle,
    plan_f,
};
use frozen_attention::emulator::{build, build_for_library, measure_against_prompt, swap_algorithm, Construction, TargetHead};
use frozen_attention::experiments::{
    hardmax_property, head_cell, run_ames, run_construct_sweep, run_frozen_vs_baseline, run_sim_f, truncated_linear_property,
    ExperimentConfig, ExperimentKind,
};
use frozen_attention::grid::{plan_with_heads, HardmaxCase};
use frozen_attention::hopfield::{
    build_hopfield_function_approx, build_hopfield_gd, function_approx_state, hopfield_forward, plan_hopfield_approx,
};
use frozen_attention::linalg::{sup_norm_diff, Matrix};
use frozen_attention::rng::Rng;
use frozen_attention::trainer::{gradient_check, Architecture, FrontEnd, TrainableModel};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, half: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-half, half))
}

fn dim(rng: &mut Rng) -> usize {
    2 + rng.index(5)
}

fn random_pairs(rng: &mut Rng, n: usize, d: usize) -> Vec<Pair> {
    let w: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1 * rng.normal();
            (x, y)
        })
        .collect()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The interpolation construction spreads each truncated-linear head over
/// `n − 2` grid slots, so it needs at least three tokens; the
/// coordinate-grid construction takes the full range.
fn constructive(construction: Construction, limit_secs: f64, stream: u64) -> Outcome {
    let eps = 0.05;
    let min_n = match construction {
        Construction::Interpolation => 3,
        Construction::CoordinateGrid => 2,
    };
    let mut rng = Rng::substream(2024, stream);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for trial in 0..50 {
        let (d, n, d_h, d_o) = (dim(&mut rng), dim(&mut rng).max(min_n), dim(&mut rng), dim(&mut rng));
        let x = uniform_matrix(&mut rng, d, n, 0.5);
        let target = TargetHead::new(
            uniform_matrix(&mut rng, d_h, d, 0.5),
            uniform_matrix(&mut rng, d_h, d, 0.5),
            uniform_matrix(&mut rng, d_o, d, 0.5),
        )
        .expect("valid target");
        let report = build(construction, &x, &target, eps)
            .and_then(|emu| measure_against_prompt(&emu, &emu.prompt_for(&x, &target)?));
        match report {
            Ok(r) => {
                if r.measured_error > eps || r.measured_error > r.theoretical_budget {
                    return outcome(
                        false,
                        format!("trial {trial} (d={d}, n={n}, d_h={d_h}): error {:.3e}, budget {:.3e}", r.measured_error, r.theoretical_budget),
                    );
                }
                worst = worst.max(r.measured_error);
                worst_ratio = worst_ratio.max(r.measured_error / r.theoretical_budget);
            }
            Err(e) => return outcome(false, format!("trial {trial} (d={d}, n={n}, d_h={d_h}): {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < limit_secs,
        format!("50 targets (n >= {min_n}), worst error {worst:.3e}, worst error/budget {worst_ratio:.3}, {secs:.1} s (limit {limit_secs} s)"),
    )
}

fn hardmax_suite() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for case in [HardmaxCase::UniqueMax, HardmaxCase::TwoLargest] {
        let o = hardmax_property(case, 8, 0.05, 1.0, 1000, 0).expect("property runs");
        passed &= o.violations == 0;
        details.push(format!("{case:?}: {} violations, worst {:.3e}", o.violations, o.worst_error));
    }
    outcome(passed, details.join("; "))
}

fn truncated_linear() -> Outcome {
    let o = truncated_linear_property(8, 3, 0.05, 500, 0).expect("property runs");
    let mut halving = true;
    for h in [1, 2, 3, 4, 6, 8] {
        let one = plan_with_heads(-1.0, 1.0, 8, h, 0.01).expect("plan");
        let two = plan_with_heads(-1.0, 1.0, 8, 2 * h, 0.01).expect("plan");
        halving &= (two.interpolation * 2.0 - one.interpolation).abs() <= 1e-15 * one.interpolation;
    }
    outcome(
        o.violations == 0 && halving,
        format!("500 instances, {} violations, worst {:.3e}; interpolation term halves: {halving}", o.violations, o.worst_error),
    )
}

fn head_trend() -> Outcome {
    let cfg = ExperimentConfig::desk(ExperimentKind::ConstructSweep);
    let rec = run_construct_sweep(&cfg).expect("sweep runs");
    let rows: Vec<(usize, f64, f64, f64)> = rec
        .table
        .iter()
        .map(|r| {
            let g = |k: &str| r[k].as_f64().expect("numeric field");
            (g("heads") as usize, g("measured"), g("interpolation"), g("leakage"))
        })
        .collect();
    let mut passed = rec.passed == Some(true);
    let mut pairs = 0;
    for &(h, m, interp, leak) in &rows {
        if let Some(&(_, m2, interp2, _)) = rows.iter().find(|r| r.0 == 2 * h) {
            pairs += 1;
            passed &= (2.0 * interp2 - interp).abs() <= 1e-15 * interp;
            passed &= m2 <= m + 2.0 * leak;
        }
    }
    let measured: Vec<String> = rows.iter().map(|r| format!("H={}:{:.3e}", r.0, r.1)).collect();
    outcome(passed && pairs >= 3, format!("{pairs} doublings; measured {}", measured.join(" ")))
}

fn gd_emulation() -> Outcome {
    let eps = 0.01;
    let mut rng = Rng::substream(7, 1);
    let mut single = 0.0f64;
    for _ in 0..100 {
        let (n, d) = (3 + rng.index(4), 1 + rng.index(3));
        let pairs = random_pairs(&mut rng, n, d);
        let w: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let exact = gd_step(&pairs, &w, 0.1, Loss::Squared, 0.0).expect("oracle");
        let emulated = match gd_step_emulated(&pairs, &w, 0.1, Loss::Squared, eps) {
            Ok(v) => v,
            Err(e) => return outcome(false, format!("single step: {e}")),
        };
        single = single.max(sup(&exact, &emulated));
    }
    let mut stacked_ok = true;
    let mut worst_stack_ratio = 0.0f64;
    for _ in 0..10 {
        let (n, d) = (4 + rng.index(3), 2);
        let pairs = random_pairs(&mut rng, n, d);
        let eta = 1.0 / curvature(&pairs, 0.0).expect("curvature").smooth;
        let w_star_norm = 3.0;
        let layer = GdLayer::plan(&pairs, Loss::Squared, eta, 0.0, w_star_norm, eps).expect("plan");
        let trace = layer.run(&pairs, &[0.0; 2], Loss::Squared, 10).expect("run");
        let exact = gd_multi(&pairs, &[0.0; 2], eta, Loss::Squared, 0.0, 10).expect("oracle");
        for l in 1..=10 {
            let dev = sup(&trace.iterates[l], &exact.iterates[l]);
            stacked_ok &= dev <= l as f64 * eps;
            worst_stack_ratio = worst_stack_ratio.max(dev / (l as f64 * eps));
        }
    }
    let mut contraction_ok = true;
    let mut worst_factor = 0.0f64;
    for _ in 0..50 {
        let (n, d) = (6 + rng.index(5), 2 + rng.index(2));
        let pairs = random_pairs(&mut rng, n, d);
        let lambda = 0.5;
        let lambda_mean = lambda / n as f64;
        let curv = curvature(&pairs, lambda_mean).expect("curvature");
        let w_star = ridge_regression(&pairs, lambda).expect("oracle");
        let trace = gd_multi(&pairs, &vec![0.0; d], 1.0 / curv.smooth, Loss::Squared, lambda_mean, 40).expect("gd");
        let start: f64 = w_star.iter().map(|v| v * v).sum();
        for (t, w) in trace.iterates.iter().enumerate() {
            let dist: f64 = w.iter().zip(&w_star).map(|(a, b)| (a - b) * (a - b)).sum();
            let predicted = (-(t as f64) / curv.kappa()).exp() * start;
            if predicted > 1e-20 {
                let factor = dist / predicted;
                worst_factor = worst_factor.max(factor);
                contraction_ok &= factor <= 1.5;
            }
        }
    }
    outcome(
        single <= eps && stacked_ok && contraction_ok,
        format!(
            "single-step worst {single:.3e} (eps {eps}); stacked worst deviation/(l*eps) {worst_stack_ratio:.3}; contraction worst measured/predicted {worst_factor:.3}"
        ),
    )
}

fn regression_equivalence() -> Outcome {
    let mut rng = Rng::substream(11, 2);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let (n, d) = (6 + rng.index(5), 2 + rng.index(2));
        let pairs = random_pairs(&mut rng, n, d);
        let lambda = if trial % 2 == 0 { 0.0 } else { 1.0 };
        let oracle = if lambda == 0.0 { linear_regression(&pairs) } else { ridge_regression(&pairs, lambda) }.expect("oracle");
        match regression_emulated(&pairs, lambda, 1e-3) {
            Ok(r) => worst = worst.max(sup(&r.w, &oracle)),
            Err(e) => return outcome(false, format!("trial {trial}: {e}")),
        }
    }
    outcome(worst <= 1e-3, format!("50 instances (linear and ridge), worst sup-norm {worst:.3e}"))
}

fn algorithm_swapping() -> Outcome {
    let eps = 0.05;
    let mut rng = Rng::substream(13, 3);
    let x = uniform_matrix(&mut rng, 3, 4, 0.5);
    let library: Vec<AlgorithmSpec> = (0..3)
        .map(|i| AlgorithmSpec {
            name: Some(format!("head{i}")),
            kind: AlgorithmKind::TargetHead,
            params: AlgorithmParams {
                weights: Some(
                    TargetHead::new(uniform_matrix(&mut rng, 2, 3, 0.5), uniform_matrix(&mut rng, 2, 3, 0.5), uniform_matrix(&mut rng, 2, 3, 0.5))
                        .expect("target"),
                ),
                ..Default::default()
            },
        })
        .collect();
    let heads: Vec<TargetHead> = library.iter().map(|s| s.target_head().expect("head")).collect();
    let result = build_for_library(Construction::Interpolation, &x, &heads, eps).and_then(|emu| {
        let before = emu.checksum();
        let reports = swap_algorithm(&emu, &library, &x)?;
        Ok((before, emu.checksum(), reports))
    });
    match result {
        Ok((before, after, reports)) => {
            let worst = reports.iter().map(|r| r.measured_error).fold(0.0, f64::max);
            let same = before == after && reports.iter().all(|r| r.weight_checksum == before);
            outcome(worst <= eps && same, format!("3 members, worst error {worst:.3e}, checksum unchanged: {same}"))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn hopfield_suite() -> Outcome {
    let eps = 0.05;
    let mut rng = Rng::substream(17, 4);
    let tanh = ScalarFn::tanh();
    let mut approx_ok = true;
    let mut worst_ratio = 0.0f64;
    for _ in 0..200 {
        let dz = 1 + rng.index(3);
        let a: Vec<f64> = (0..dz).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b = rng.uniform_in(-0.5, 0.5);
        let z = uniform_matrix(&mut rng, dz, 5, 1.0);
        let reach = a.iter().map(|v| v.abs()).sum::<f64>() + b.abs();
        let plan = plan_hopfield_approx(&[tanh], -reach, reach, eps).expect("plan");
        let layer = build_hopfield_function_approx(&a, b, &[tanh], &plan.grid, plan.beta).expect("layer");
        let out = hopfield_forward(&layer, &function_approx_state(&z)).expect("forward");
        let exact = Matrix::from_fn(1, z.cols(), |_, c| ((0..dz).map(|r| a[r] * z.get(r, c)).sum::<f64>() + b).tanh());
        let err = sup_norm_diff(&out, &exact).expect("shapes");
        approx_ok &= err <= plan.bound && plan.bound <= eps;
        worst_ratio = worst_ratio.max(err / plan.bound);
    }
    let mut agree = 0.0f64;
    for _ in 0..50 {
        let (n, d) = (3 + rng.index(3), 1 + rng.index(2));
        let pairs = random_pairs(&mut rng, n, d);
        let w: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let plan = plan_f(&tanh, FBounds::measure(&pairs, &w), n, eps).expect("plan");
        let (layer, state) = build_hopfield_gd(&pairs, &w, &tanh, &plan).expect("layer");
        let hop = hopfield_forward(&layer, &state).expect("forward");
        let att = f_emulator_for(&tanh, &pairs, &w, eps).and_then(|e| e.apply(&pairs, &w)).expect("attention");
        let oracle = f_map_oracle(&pairs, &w, &tanh).expect("oracle");
        agree = agree.max(sup_norm_diff(&hop, &att).expect("shapes"));
        approx_ok &= sup_norm_diff(&hop, &oracle).expect("shapes") <= plan.bound;
    }
    outcome(
        approx_ok && agree <= 2.0 * eps,
        format!("200 function instances, worst error/budget {worst_ratio:.3}; Hopfield vs attention GD worst {agree:.3e} (limit {})", 2.0 * eps),
    )
}

fn gradient_suite() -> Outcome {
    let mut rng = Rng::substream(19, 5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..20 {
        let tokens = 2 + rng.index(3);
        let input_dim = 3 + rng.index(3);
        let front = match i % 4 {
            0 => FrontEnd::Identity,
            1 => FrontEnd::Linear { emb: 2 + rng.index(4) },
            2 => FrontEnd::Slots {
                slots: 1 + rng.index(3),
                emb: 2 + rng.index(3),
                local: false,
                key_rows: None,
            },
            _ => FrontEnd::Slots {
                slots: 1 + rng.index(3),
                emb: 2 + rng.index(3),
                local: true,
                key_rows: Some(1 + rng.index(input_dim - 1)),
            },
        };
        let arch = Architecture {
            input_dim,
            tokens,
            front,
            heads: 1 + rng.index(3),
            head_dim: 1 + rng.index(3),
            output_dim: 1 + rng.index(3),
            beta: rng.uniform_in(0.3, 1.5),
        };
        let model = TrainableModel::init(arch, &mut rng).expect("model");
        let xs: Vec<Matrix> = (0..3).map(|_| uniform_matrix(&mut rng, input_dim, tokens, 1.0)).collect();
        let ys: Vec<Matrix> = (0..3).map(|_| uniform_matrix(&mut rng, model.arch().output_dim, tokens, 1.0)).collect();
        let report = gradient_check(&model, &xs, &ys, 1e-5, 1e-4).expect("check");
        if !report.passed {
            return outcome(false, format!("model {i}: {} relative error {:.3e}", report.worst_param, report.max_relative_error));
        }
        worst = worst.max(report.max_relative_error);
        checked += report.entries_checked;
    }
    outcome(true, format!("20 models, {checked} entries, worst relative error {worst:.3e}"))
}

fn sim_f() -> Outcome {
    let cfg = ExperimentConfig::desk(ExperimentKind::SimF);
    let rec = run_sim_f(&cfg).expect("runs");
    let m = rec.metric("test_mse").expect("metric");
    let hits = m.values.iter().filter(|v| **v <= 0.01).count();
    let values: Vec<String> = m.values.iter().map(|v| format!("{v:.4}")).collect();
    outcome(
        hits >= 4,
        format!("{hits}/5 seeds at test MSE <= 0.01; per-seed test MSE [{}]; flags {:?}", values.join(", "), rec.flags),
    )
}

fn trained_heads() -> Outcome {
    let cfg = ExperimentConfig::desk(ExperimentKind::SimAttentionHeads);
    let mut means = Vec::new();
    for h in [1, 8] {
        let values: Vec<f64> = cfg.seeds.iter().map(|&s| head_cell(&cfg, h, s).expect("cell").emulation_mse).collect();
        means.push(values.iter().sum::<f64>() / values.len() as f64);
    }
    outcome(
        means[1] * 2.0 <= means[0],
        format!("mean emulation MSE: 1 head {:.4}, 8 heads {:.4} (ratio {:.2})", means[0], means[1], means[0] / means[1]),
    )
}

fn frozen_vs_baseline() -> Outcome {
    let rec = run_frozen_vs_baseline(&ExperimentConfig::desk(ExperimentKind::FrozenVsBaseline)).expect("runs");
    let parts: Vec<String> = ["lasso", "ridge", "linear"]
        .iter()
        .map(|t| {
            let f = rec.metric(&format!("frozen_{t}")).unwrap().mean;
            let b = rec.metric(&format!("baseline_{t}")).unwrap().mean;
            format!("{t}: frozen {f:.4} / baseline {b:.4}")
        })
        .collect();
    outcome(rec.passed == Some(true), parts.join("; "))
}

fn ames_path() -> PathBuf {
    std::env::var_os("AMES_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/AmesHousing.csv"))
}

fn ames() -> Option<Outcome> {
    let path = ames_path();
    if !path.exists() {
        return None;
    }
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Ames);
    cfg.seeds = vec![0, 1, 2];
    let rec = match run_ames(&cfg, &path) {
        Ok(r) => r,
        Err(e) => return Some(outcome(false, e.to_string())),
    };
    let rows = rec.table[0]["rows"].as_u64().unwrap_or(0);
    let within = rec.passed == Some(true);
    Some(outcome(rows == 2930 && within, format!("{rows} rows, frozen within 2x baseline on every task: {within}")))
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    type Check = fn() -> Outcome;
    let exact: Vec<(&str, Check)> = vec![
        ("constructive emulation, interpolation path", || constructive(Construction::Interpolation, 60.0, 1)),
        ("constructive emulation, coordinate-grid path", || constructive(Construction::CoordinateGrid, 120.0, 2)),
        ("hardmax suite", hardmax_suite),
        ("truncated-linear bound", truncated_linear),
        ("1/H trend of the constructive budget", head_trend),
        ("GD emulation", gd_emulation),
        ("regression equivalence", regression_equivalence),
        ("algorithm swapping", algorithm_swapping),
        ("Hopfield suite", hopfield_suite),
        ("gradient check", gradient_suite),
    ];
    let trained: Vec<(&str, Check)> = vec![
        ("trained sim-f", sim_f),
        ("trained head-count trend", trained_heads),
        ("frozen vs baseline (synthetic)", frozen_vs_baseline),
    ];
    let wanted = |name: &str| only.as_deref().map_or(true, |o| name.contains(o));
    let mut exact_failures = 0;
    let report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        o.passed
    };
    for (name, check) in exact.into_iter().filter(|c| wanted(c.0)) {
        let start = Instant::now();
        let o = check();
        let passed = report(name, Outcome { detail: format!("{} [{:.1} s]", o.detail, start.elapsed().as_secs_f64()), ..o });
        exact_failures += usize::from(!passed);
    }
    for (name, check) in trained.into_iter().filter(|c| wanted(c.0)) {
        let start = Instant::now();
        let o = check();
        report(name, Outcome { detail: format!("{} [{:.1} s]", o.detail, start.elapsed().as_secs_f64()), ..o });
    }
    if wanted("ames") {
        match ames() {
            Some(o) => {
                report("ames", o);
            }
            None => println!("SKIP ames: no data at {} (set AMES_CSV to run)", ames_path().display()),
        }
    }
    if exact_failures > 0 {
        eprintln!("{exact_failures} constructive criteria failed");
        std::process::exit(1);
    }
}

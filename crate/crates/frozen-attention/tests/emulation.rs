//! Emulator soundness, GD emulation and Hopfield constructions on random
//! instances, checked against independent oracles.

use frozen_attention::algorithms::{
    curvature, gd_multi, lasso_oracle, linear_regression, per_sample_gradients, per_sample_gradients_emulated,
    ridge_gradient, ridge_regression, Loss, Pair, ScalarFn,
};
use frozen_attention::attention::forward_head;
use frozen_attention::emulator::{build, measure_against_prompt, readout_head, Construction, TargetHead};
use frozen_attention::hopfield::{
    build_hopfield_function_approx, function_approx_state, hopfield_forward, plan_hopfield_approx, HopfieldLayer,
};
use frozen_attention::linalg::{matmul, stack_rows, sup_norm_diff, Matrix};
use frozen_attention::rng::Rng;

fn uniform(rng: &mut Rng, rows: usize, cols: usize, half: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-half, half))
}

fn pairs(rng: &mut Rng, n: usize, d: usize) -> Vec<Pair> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let y = rng.uniform_in(-1.0, 1.0);
            (x, y)
        })
        .collect()
}

#[test]
fn emulation_error_stays_within_the_budget() {
    let mut rng = Rng::substream(1, 10);
    for construction in [Construction::Interpolation, Construction::CoordinateGrid] {
        for _ in 0..100 {
            let d = 2 + rng.index(5);
            let n = 3 + rng.index(4);
            let d_h = 2 + rng.index(5);
            let x = uniform(&mut rng, d, n, 0.5);
            let t = TargetHead::new(uniform(&mut rng, d_h, d, 0.5), uniform(&mut rng, d_h, d, 0.5), uniform(&mut rng, d, d, 0.5)).unwrap();
            let emu = build(construction, &x, &t, 0.05).unwrap();
            let report = measure_against_prompt(&emu, &emu.prompt_for(&x, &t).unwrap()).unwrap();
            assert!(report.measured_error <= report.theoretical_budget, "{construction:?}: {report:?}");
            assert!(report.intermediate_error.unwrap() <= report.eps0);
        }
    }
}

#[test]
fn readout_of_the_exact_stack_is_the_target() {
    let mut rng = Rng::substream(2, 10);
    for _ in 0..100 {
        let (d, n, d_h, d_o) = (1 + rng.index(5), 1 + rng.index(6), 1 + rng.index(4), 1 + rng.index(4));
        let x = uniform(&mut rng, d, n, 2.0);
        let t = TargetHead::new(uniform(&mut rng, d_h, d, 1.0), uniform(&mut rng, d_h, d, 1.0), uniform(&mut rng, d_o, d, 1.0)).unwrap();
        let stack = stack_rows(&[&matmul(&t.w_k, &x).unwrap(), &matmul(&t.w_q, &x).unwrap(), &matmul(&t.w_v, &x).unwrap()]).unwrap();
        let out = forward_head(&readout_head(d_h, d_o).unwrap(), &stack).unwrap();
        assert!(sup_norm_diff(&out, &t.forward(&x).unwrap()).unwrap() <= 1e-12);
    }
}

#[test]
fn per_sample_gradients_within_eps() {
    let mut rng = Rng::substream(3, 10);
    let eps = 0.02;
    for loss in [Loss::Squared, Loss::LogCosh] {
        for _ in 0..100 {
            let (n, d) = (2 + rng.index(4), 1 + rng.index(3));
            let ps = pairs(&mut rng, n, d);
            let w: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let exact = per_sample_gradients(&ps, &w, &loss.grad()).unwrap();
            let emulated = per_sample_gradients_emulated(&ps, &w, loss, eps).unwrap();
            let err = sup_norm_diff(&exact, &emulated).unwrap();
            assert!(err <= eps, "{loss:?}: {err}");
        }
    }
}

#[test]
fn closed_form_oracles_are_stationary() {
    let mut rng = Rng::substream(4, 10);
    for _ in 0..50 {
        let (n, d) = (6 + rng.index(5), 2 + rng.index(3));
        let ps = pairs(&mut rng, n, d);
        let w = linear_regression(&ps).unwrap();
        assert!(ridge_gradient(&ps, &w, 0.0).iter().all(|g| g.abs() <= 1e-8));
        let w = ridge_regression(&ps, 0.7).unwrap();
        assert!(ridge_gradient(&ps, &w, 0.7).iter().all(|g| g.abs() <= 1e-8));
        // Lasso: the subgradient condition of ½Σ(wᵀx − y)² + λ‖w‖₁.
        let lambda = 0.3;
        let w = lasso_oracle(&ps, lambda).unwrap();
        let grad = ridge_gradient(&ps, &w, 0.0);
        for (g, wi) in grad.iter().zip(&w) {
            if *wi == 0.0 {
                assert!(g.abs() <= lambda + 1e-6);
            } else {
                assert!((g + lambda * wi.signum()).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn gd_contracts_at_the_strong_convexity_rate() {
    let mut rng = Rng::substream(5, 10);
    for _ in 0..50 {
        let (n, d) = (5 + rng.index(6), 2 + rng.index(2));
        let ps = pairs(&mut rng, n, d);
        let lambda_mean = 0.1;
        let curv = curvature(&ps, lambda_mean).unwrap();
        let w_star = ridge_regression(&ps, lambda_mean * n as f64).unwrap();
        let w0 = vec![0.0; d];
        let trace = gd_multi(&ps, &w0, 1.0 / curv.smooth, Loss::Squared, lambda_mean, 30).unwrap();
        let dist = |w: &[f64]| w.iter().zip(&w_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let start = dist(&w0);
        for (t, w) in trace.iterates.iter().enumerate() {
            assert!(dist(w) <= (-(t as f64) / curv.kappa()).exp() * start * (1.0 + 1e-9) + 1e-24);
        }
    }
}

#[test]
fn hopfield_weights_are_distributions_and_concentrate() {
    let mut rng = Rng::substream(6, 10);
    for _ in 0..20 {
        let keys = uniform(&mut rng, 3, 6, 1.0);
        let values = uniform(&mut rng, 2, 6, 1.0);
        let r = uniform(&mut rng, 3, 4, 1.0);
        let mut last: Option<Vec<f64>> = None;
        for beta in [10.0, 100.0, 1000.0] {
            let layer = HopfieldLayer::from_parts(keys.clone(), values.clone(), Matrix::identity(3), beta).unwrap();
            let weights = layer.weights(&r).unwrap();
            for c in 0..weights.cols() {
                assert!((weights.col(c).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            // Mass on the best-scoring stored pattern of each state pattern.
            let top: Vec<f64> = (0..weights.cols())
                .map(|c| {
                    let scores: Vec<f64> = (0..keys.cols()).map(|j| (0..3).map(|i| keys.get(i, j) * r.get(i, c)).sum()).collect();
                    let best = (0..scores.len()).max_by(|a, b| scores[*a].total_cmp(&scores[*b])).unwrap();
                    weights.get(best, c)
                })
                .collect();
            if let Some(prev) = &last {
                for (now, before) in top.iter().zip(prev) {
                    assert!(*now >= before - 1e-12, "{now} < {before}");
                }
            }
            last = Some(top);
        }
    }
}

#[test]
fn hopfield_function_approximation_within_budget() {
    let mut rng = Rng::substream(7, 10);
    let f = ScalarFn::tanh();
    for _ in 0..200 {
        let dz = 1 + rng.index(3);
        let a: Vec<f64> = (0..dz).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b = rng.uniform_in(-0.5, 0.5);
        let reach = a.iter().map(|v| v.abs()).sum::<f64>() + b.abs();
        let eps = rng.uniform_in(0.01, 0.1);
        let plan = plan_hopfield_approx(&[f], -reach, reach, eps).unwrap();
        assert!(plan.bound <= eps);
        let layer = build_hopfield_function_approx(&a, b, &[f], &plan.grid, plan.beta).unwrap();
        let z = uniform(&mut rng, dz, 4, 1.0);
        let out = hopfield_forward(&layer, &function_approx_state(&z)).unwrap();
        let exact = Matrix::from_fn(1, 4, |_, c| ((0..dz).map(|r| a[r] * z.get(r, c)).sum::<f64>() + b).tanh());
        assert!(sup_norm_diff(&out, &exact).unwrap() <= plan.bound);
    }
}

use super::*;
use crate::geometry::PolytopeKind;
use crate::objectives::{make_blobs, quadratic, Activation, FnObjective, MlpLoss, Smoothness, TinyMlp};
use crate::rng::seeded;
use crate::schedule::Schedule;
use std::ops::ControlFlow;
use std::sync::Arc as StdArc;

fn cfg() -> OptimizerConfig {
    OptimizerConfig::default()
}

fn norm_sq(theta: &[f64]) -> f64 {
    theta.iter().map(|x| x * x).sum()
}

#[test]
fn quadratic_from_far_start_converges() {
    let d = 8;
    let loss = FnObjective::new(d, norm_sq);
    let config = OptimizerConfig { epsilon: Schedule::inverse_sqrt(4.0), step_radius: Schedule::flat(2.0), ..cfg() };
    let res = run(&config, &loss, &vec![10.0; d], RunOptions::new(Budget::steps(200))).unwrap();
    let initial = res.loss_trace[0];
    assert_eq!(initial, 800.0);
    assert!(res.final_loss < 0.01 * initial, "{}", res.final_loss);
}

#[test]
fn constant_landscape_gives_exact_zero_step_with_orthoplex() {
    let flat = FnObjective::new(2, |_: &[f64]| 3.0).with_smoothness(Smoothness::PiecewiseConstant);
    let theta0 = [0.3, -1.7];
    for seed in 0..20 {
        let mut s = OptimizerState::new(OptimizerConfig { seed, eta_max: 0.05, ..cfg() }, &flat, &theta0).unwrap();
        s.step(&flat).unwrap();
        assert_eq!(s.params(), theta0.to_vec());
    }
    let mut s = OptimizerState::new(OptimizerConfig { polytope: PolytopeKind::Simplex, ..cfg() }, &flat, &theta0).unwrap();
    s.step(&flat).unwrap();
    assert_ne!(s.params(), theta0.to_vec());
}

#[test]
fn each_solve_adds_pvk_evaluations() {
    let loss = quadratic(7, None);
    for (dp, kind, k) in [(2, PolytopeKind::Orthoplex, 1), (4, PolytopeKind::Simplex, 3), (2, PolytopeKind::Cube, 2)] {
        let config = OptimizerConfig { dp, polytope: kind, probes: k, ..cfg() };
        let mut s = OptimizerState::new(config, &loss, &[1.0; 7]).unwrap();
        let per = s.evals_per_solve();
        let v = polytope_vertices(kind, dp).unwrap().n_vertices() as u64;
        assert_eq!(per, 7usize.div_ceil(dp) as u64 * v * k as u64);
        for t in 1..=5 {
            let m = s.step(&loss).unwrap();
            assert_eq!(m.evals, t * per);
        }
        assert_eq!(s.loss_evals(), 6);
    }
}

#[test]
fn padding_stays_zero_and_hidden() {
    let loss = quadratic(5, Some(&[1.0, 2.0, 3.0, 4.0, 5.0]));
    let mut s = OptimizerState::new(OptimizerConfig { dp: 4, ..cfg() }, &loss, &[0.0; 5]).unwrap();
    assert_eq!(s.particles(), 2);
    for _ in 0..10 {
        s.step(&loss).unwrap();
        assert!(s.x[5..8].iter().all(|&v| v == 0.0));
        assert_eq!(s.params().len(), 5);
    }
}

#[test]
fn amortized_cadence() {
    let loss = quadratic(6, None);
    let config = OptimizerConfig { amortize_steps: 3, epsilon: Schedule::flat(0.05), ..cfg() };
    let mut s = OptimizerState::new(config, &loss, &[1.0; 6]).unwrap();
    let per = s.evals_per_solve();
    let mut solved = Vec::new();
    for t in 0..9 {
        let m = s.step(&loss).unwrap();
        assert!(!m.gate_tripped);
        if !m.amortized {
            solved.push(t);
        }
    }
    assert_eq!(solved, vec![0, 3, 6]);
    assert_eq!(s.evals(), 3 * per);
}

#[test]
fn loss_gate_forces_a_solve() {
    let loss = quadratic(4, None);
    let config = OptimizerConfig { amortize_steps: 3, ..cfg() };
    let mut s = OptimizerState::new(config, &loss, &[1.0; 4]).unwrap();
    s.step(&loss).unwrap();
    assert!(!s.next_step_solves());
    s.prev_loss = 1.0;
    s.loss = 2.0;
    assert!(s.next_step_solves());
    s.loss = 1.4;
    assert!(!s.next_step_solves());
    // negative losses: a jump from -10 to -4 is more than half of |prev|
    s.prev_loss = -10.0;
    s.loss = -4.0;
    assert!(s.next_step_solves());
}

#[test]
fn full_ema_freezes_the_reused_plan() {
    let loss = quadratic(6, Some(&[3.0; 6]));
    let config = OptimizerConfig { amortize_steps: 2, amortize_ema: 1.0, ..cfg() };
    let mut s = OptimizerState::new(config, &loss, &[0.0; 6]).unwrap();
    s.step(&loss).unwrap();
    let first = s.amortized.as_ref().unwrap().weights.clone();
    for _ in 0..5 {
        s.step(&loss).unwrap();
        assert_eq!(s.amortized.as_ref().unwrap().weights, first);
    }
}

#[test]
fn blend_rows_renormalizes() {
    let b = blend_rows(&[1.0, 0.0, 0.5, 0.5], &[0.0, 1.0, 0.2, 0.8], 0.25, 2);
    assert!((b[0] - 0.25).abs() < 1e-15 && (b[1] - 0.75).abs() < 1e-15);
    assert!((b[2] + b[3] - 1.0).abs() < 1e-15);
}

#[test]
fn replay_is_bit_identical() {
    let loss = quadratic(10, Some(&[1.5; 10]));
    for solver in [SolverKind::Softmax, SolverKind::Sinkhorn, SolverKind::KlSoftmax] {
        let config = OptimizerConfig {
            solver,
            eta_max: 0.05,
            biased_rotation: true,
            momentum: Schedule::flat(0.5),
            solver_options: SolverOptions { lambda: 1.0, ..Default::default() },
            seed: 3,
            ..cfg()
        };
        let a = run(&config, &loss, &[0.0; 10], RunOptions::new(Budget::steps(30))).unwrap();
        let b = run(&config, &loss, &[0.0; 10], RunOptions::new(Budget::steps(30))).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
        let c = run(&OptimizerConfig { seed: 4, ..config }, &loss, &[0.0; 10], RunOptions::new(Budget::steps(30))).unwrap();
        assert_ne!(a.loss_trace, c.loss_trace);
    }
}

#[test]
fn zero_budget_returns_start() {
    let loss = quadratic(3, None);
    let theta0 = [1.0, 2.0, 3.0];
    let res = run(&cfg(), &loss, &theta0, RunOptions::new(Budget::evals(0))).unwrap();
    assert_eq!(res.params, theta0.to_vec());
    assert_eq!(res.steps, 0);
    assert_eq!(res.evals, 0);
    assert!(run(&cfg(), &loss, &theta0, RunOptions::new(Budget::default())).is_err());
}

#[test]
fn evaluation_budget_is_never_exceeded() {
    let loss = quadratic(9, None);
    let res = run(&cfg(), &loss, &[1.0; 9], RunOptions::new(Budget::evals(100))).unwrap();
    // 5 particles x 4 vertices per solve
    assert_eq!(res.evals, 100);
    assert_eq!(res.steps, 5);
    assert_eq!(res.eval_trace.len(), res.loss_trace.len());
}

#[test]
fn best_checkpoint_survives_a_bad_finish() {
    // a large constant step keeps jumping over the minimum
    let loss = quadratic(2, None);
    let config = OptimizerConfig { step_radius: Schedule::flat(3.0), epsilon: Schedule::flat(1.0), ..cfg() };
    let res = run(&config, &loss, &[0.5, 0.5], RunOptions::new(Budget::steps(40))).unwrap();
    assert!(res.final_loss > res.best_loss);
    assert_eq!(loss.eval(&res.params), res.best_loss);
    assert!(res.loss_trace.iter().all(|&l| l >= res.best_loss));
}

#[test]
fn external_checkpoint_metric_and_callback() {
    let loss = quadratic(4, None);
    let metric = |theta: &[f64]| (theta[0] - 0.25).abs();
    let mut seen = 0;
    let opts = RunOptions::new(Budget::steps(50)).with_checkpoint_metric(&metric).with_callback(|m, _| {
        seen += 1;
        if m.step == 9 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    let res = run(&cfg(), &loss, &[1.0; 4], opts).unwrap();
    assert!(res.stopped_early);
    assert_eq!(res.steps, 10);
    assert_eq!(seen, 10);
    assert_eq!(res.best_metric, Some(metric(&res.params)));
}

#[test]
fn failed_step_leaves_state_untouched() {
    let trap = FnObjective::new(2, |t: &[f64]| if t == [1.0, 1.0] { 0.0 } else { f64::NAN });
    let mut s = OptimizerState::new(cfg(), &trap, &[1.0, 1.0]).unwrap();
    let err = s.step(&trap).unwrap_err();
    assert!(matches!(err, Error::NonFiniteCost { particle: 0, .. }), "{err}");
    assert_eq!(s.step_count(), 0);
    assert_eq!(s.evals(), 0);
    assert_eq!(s.params(), vec![1.0, 1.0]);
    // the same draw is replayed once the objective is healthy again
    let ok = quadratic(2, None);
    let mut fresh = OptimizerState::new(cfg(), &trap, &[1.0, 1.0]).unwrap();
    s.step(&ok).unwrap();
    fresh.step(&ok).unwrap();
    assert_eq!(s.params(), fresh.params());

    let bad_start = FnObjective::new(1, |_: &[f64]| f64::INFINITY);
    assert!(matches!(OptimizerState::new(cfg(), &bad_start, &[0.0]), Err(Error::NonFiniteLoss(_))));
}

fn blobs_loss(activation: Activation) -> (MlpLoss, Vec<f64>) {
    let mut rng = seeded(1);
    let data = StdArc::new(make_blobs(3, 30, 0.3, &mut rng));
    let model = TinyMlp::new(&[2, 16, 3], activation);
    let theta0 = model.init_params(&mut rng);
    let n = data.len();
    (MlpLoss::new(model, data, (0..n).collect()).unwrap(), theta0)
}

#[test]
fn blockwise_solves_each_layer_separately() {
    let (loss, theta0) = blobs_loss(Activation::Relu);
    let config = OptimizerConfig { blockwise: true, solver: SolverKind::Sinkhorn, ..cfg() };
    let mut s = OptimizerState::new(config, &loss, &theta0).unwrap();
    // 2x16 weights, 16 biases, 16x3 weights, 3 biases at width 2
    assert_eq!(s.blocks.len(), 4);
    assert_eq!(s.particles(), 16 + 8 + 24 + 2);
    let before = s.loss();
    for _ in 0..30 {
        s.step(&loss).unwrap();
    }
    assert!(s.loss() < before);
    let dumps = s.solve_dumps();
    assert_eq!(dumps.len(), 4);
    for d in &dumps {
        assert!(d.plan.col_violation() < 1e-6);
    }
    let dense = OptimizerState::new(cfg(), &loss, &theta0).unwrap();
    assert_eq!(dense.blocks.len(), 1);
    assert_eq!(dense.particles(), 50);
}

#[test]
fn subspace_modes_make_progress() {
    let (loss, theta0) = blobs_loss(Activation::Relu);
    for (mode, rank) in [
        (SubspaceMode::Hybrid, 2),
        (SubspaceMode::Linear, 12),
        (SubspaceMode::SparseLinear, 12),
        (SubspaceMode::Adaptive, 12),
    ] {
        let config = OptimizerConfig { subspace: mode, rank, epsilon: Schedule::flat(0.3), ..cfg() };
        let res = run(&config, &loss, &theta0, RunOptions::new(Budget::steps(40))).unwrap();
        assert!(res.best_loss < 0.9 * res.loss_trace[0], "{mode:?}: {} -> {}", res.loss_trace[0], res.best_loss);
        assert_eq!(loss.eval(&res.params), res.best_loss, "{mode:?}");
    }
}

#[test]
fn hybrid_particle_count_follows_subspace() {
    let (loss, theta0) = blobs_loss(Activation::Relu);
    let config = OptimizerConfig { subspace: SubspaceMode::Hybrid, rank: 4, ..cfg() };
    let s = OptimizerState::new(config, &loss, &theta0).unwrap();
    // (16 + 2) 2 + 16 + (3 + 16) 3 + 3
    assert_eq!(s.search_dim(), 36 + 16 + 57 + 3);
    assert_eq!(s.particles(), 56);
    assert!(OptimizerState::new(
        OptimizerConfig { subspace: SubspaceMode::Hybrid, ..cfg() },
        &quadratic(4, None),
        &[0.0; 4]
    )
    .is_err());
}

#[test]
fn solver_variants_descend() {
    let loss = quadratic(12, Some(&[2.0; 12]));
    for solver in [SolverKind::Softmax, SolverKind::Sinkhorn, SolverKind::KlSoftmax, SolverKind::Greedy, SolverKind::TopKMean] {
        let config = OptimizerConfig {
            solver,
            dp: 4,
            solver_options: SolverOptions { lambda: 0.5, anderson_depth: 3, ..Default::default() },
            ..cfg()
        };
        let res = run(&config, &loss, &[0.0; 12], RunOptions::new(Budget::steps(60))).unwrap();
        assert!(res.best_loss < 0.2 * res.loss_trace[0], "{solver:?}: {}", res.best_loss);
    }
}

#[test]
fn sinkhorn_reports_iterations_and_warm_starts() {
    let loss = quadratic(16, Some(&[1.0; 16]));
    let config = OptimizerConfig { solver: SolverKind::Sinkhorn, epsilon: Schedule::flat(0.3), ..cfg() };
    let mut s = OptimizerState::new(config, &loss, &[0.0; 16]).unwrap();
    let first = s.step(&loss).unwrap();
    assert!(first.solver_iterations > 0);
    assert!(first.solver_converged);
    assert!(s.duals[0].is_some());
    assert!(first.transport_cost.is_some());
}

#[test]
fn momentum_carries_previous_displacement() {
    // on a flat landscape with an orthoplex the fresh step is zero, so
    // the whole move comes from the velocity buffer
    let flat = FnObjective::new(2, |_: &[f64]| 1.0);
    let config = OptimizerConfig { momentum: Schedule::flat(0.5), ..cfg() };
    let mut s = OptimizerState::new(config, &flat, &[0.0, 0.0]).unwrap();
    s.velocity = vec![1.0, -2.0];
    s.step(&flat).unwrap();
    assert_eq!(s.params(), vec![0.5, -1.0]);
    s.step(&flat).unwrap();
    assert_eq!(s.params(), vec![0.75, -1.5]);
}

#[test]
fn mean_step_aligns_with_negative_gradient() {
    let d = 16;
    let mut rng = seeded(5);
    let target: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let loss = quadratic(d, Some(&target));
    let theta0 = vec![0.0; d];
    let grad = loss.gradient(&theta0);
    let config = OptimizerConfig { epsilon: Schedule::flat(0.1), step_radius: Schedule::flat(0.1), probe_radius: Schedule::flat(0.1), ..cfg() };
    let mut mean = vec![0.0; d];
    let draws = 1000;
    for seed in 0..draws {
        let mut s = OptimizerState::new(OptimizerConfig { seed, ..config.clone() }, &loss, &theta0).unwrap();
        s.step(&loss).unwrap();
        for (m, p) in mean.iter_mut().zip(s.params()) {
            *m += p / draws as f64;
        }
    }
    let dot: f64 = mean.iter().zip(&grad).map(|(a, b)| -a * b).sum();
    let cos = dot / (norm_sq(&mean).sqrt() * norm_sq(&grad).sqrt());
    assert!(cos > 0.9, "{cos}");
}

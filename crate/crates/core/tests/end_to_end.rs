use std::sync::Arc;

use polystep::baselines::{run_baseline, BaselineConfig, BaselineKind};
use polystep::geometry::PolytopeKind;
use polystep::maxsat::{generate_random_3sat, SatObjective};
use polystep::objectives::{make_blobs, quadratic, sphere_indicator, staircase1d, Activation, MlpLoss, Objective, Split, TinyMlp};
use polystep::optimizer::{run, Budget, OptimizerConfig, OptimizerState, RunOptions};
use polystep::rng::seeded;
use polystep::schedule::Schedule;

fn steps(n: usize) -> RunOptions<'static> {
    RunOptions::new(Budget::steps(n))
}

#[test]
fn descends_a_staircase() {
    let loss = staircase1d(0.1);
    let config = OptimizerConfig { dp: 2, step_radius: Schedule::flat(1.0), ..Default::default() };
    let res = run(&config, &loss, &[3.05], steps(200)).unwrap();
    assert!(res.best_loss <= 5.0, "best {}", res.best_loss);
    assert_eq!(loss.eval(&res.params), res.best_loss);
}

#[test]
fn reaches_an_indicator_ball() {
    let loss = sphere_indicator(&[1.0, 0.0, 0.0, 0.0], 0.5);
    let config = OptimizerConfig { dp: 4, polytope: PolytopeKind::Simplex, probe_radius: Schedule::flat(4.0), ..Default::default() };
    let hit = (0..20).filter(|&s| {
        let c = OptimizerConfig { seed: s, ..config.clone() };
        run(&c, &loss, &[0.0; 4], steps(300)).unwrap().best_loss == 0.0
    });
    assert!(hit.count() >= 10);
}

#[test]
fn sign_network_learns_blobs() {
    let mut rng = seeded(7);
    let data = Arc::new(make_blobs(3, 30, 0.4, &mut rng));
    let model = TinyMlp::new(&[2, 16, 3], Activation::Sign);
    let theta0 = model.init_params(&mut rng);
    let loss = MlpLoss::on_split(model, data, Split::Train).unwrap();
    let config = OptimizerConfig { epsilon: Schedule::flat(0.5), momentum: Schedule::flat(0.9), ..Default::default() };
    let res = run(&config, &loss, &theta0, steps(150)).unwrap();
    assert!(res.best_loss < 0.6 * res.loss_trace[0], "{} -> {}", res.loss_trace[0], res.best_loss);
}

#[test]
fn maxsat_runs_on_the_delta_path() {
    let cnf = generate_random_3sat(300, 4.27, &mut seeded(3)).unwrap();
    let sat = SatObjective::new(cnf);
    let theta0: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
    let config = OptimizerConfig { step_radius: Schedule::flat(50.0), ..Default::default() };
    let res = run(&config, &sat, &theta0, steps(60)).unwrap();
    assert!(res.best_loss < res.loss_trace[0]);
    let counters = sat.counters();
    assert!(counters.delta_visits > 0);
    assert!(counters.total() < counters.probes * sat.instance.clause_count() as u64);
}

#[test]
fn baselines_and_polystep_share_an_eval_budget() {
    let q = quadratic(10, None);
    let ps = run(&OptimizerConfig::default(), &q, &[1.0; 10], steps(25)).unwrap();
    for kind in [BaselineKind::Spsa, BaselineKind::IsotropicEs, BaselineKind::RandomSearch] {
        let config = BaselineConfig { kind, ..Default::default() };
        let res = run_baseline(&config, &q, &[1.0; 10], Budget::evals(ps.evals)).unwrap();
        assert!(res.evals <= ps.evals);
        assert!(res.evals + 64 > ps.evals, "{kind:?} used {} of {}", res.evals, ps.evals);
        assert_eq!(res.loss_trace.len(), res.eval_trace.len());
    }
}

#[test]
fn config_round_trips_through_json() {
    let config = OptimizerConfig { dp: 8, epsilon: Schedule::cosine(2.0, 0.1, 50), seed: 9, ..Default::default() };
    let text = serde_json::to_string(&config).unwrap();
    let back: OptimizerConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, config);
    assert!(serde_json::from_str::<OptimizerConfig>(r#"{"dq": 4}"#).is_err());
}

#[test]
fn stepping_by_hand_matches_run() {
    let q = quadratic(6, None);
    let config = OptimizerConfig { seed: 11, ..Default::default() };
    let res = run(&config, &q, &[0.7; 6], steps(15)).unwrap();
    let mut state = OptimizerState::new(config, &q, &[0.7; 6]).unwrap();
    let mut trace = vec![q.eval(&[0.7; 6])];
    for _ in 0..15 {
        trace.push(state.step(&q).unwrap().loss);
    }
    assert_eq!(trace, res.loss_trace);
}

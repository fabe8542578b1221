//! Tuned configurations for the bundled benchmarks.

use polystep::assignment::SolverKind;
use polystep::objectives::Activation;
use polystep::optimizer::{Budget, OptimizerConfig};
use polystep::rlenv::Precision;
use polystep::schedule::Schedule;
use polystep::subspace::SubspaceMode;

use crate::config::{ExperimentConfig, Method, TaskConfig};

pub const MAXSAT_STEPS: usize = 600;
pub const CARTPOLE_STEPS: usize = 200;
pub const BLOBS_STEPS: usize = 200;

/// Wide-radius MAX-SAT recipe: the step radius starts large enough to flip
/// a sizeable share of variables and shrinks with the square root of `n`.
pub fn maxsat_optimizer(n_vars: usize, steps: usize) -> OptimizerConfig {
    let k = (n_vars as f64 / 1e5).sqrt();
    OptimizerConfig {
        epsilon: Schedule::cosine(5.0, 0.3, steps),
        step_radius: Schedule::cosine(2000.0 * k, 400.0 * k, steps),
        probe_radius: Schedule::flat(1.0),
        momentum: Schedule::linear(0.5, 0.95, steps),
        amortize_steps: 3,
        ..Default::default()
    }
}

pub fn maxsat(n_vars: usize, ratio: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(TaskConfig::MaxSat { n_vars, ratio, dimacs: None }, Method::Polystep, Budget::steps(MAXSAT_STEPS));
    c.optimizer = maxsat_optimizer(n_vars, MAXSAT_STEPS);
    c
}

pub fn cartpole_optimizer(steps: usize) -> OptimizerConfig {
    OptimizerConfig {
        dp: 4,
        probes: 3,
        epsilon: Schedule::cosine(1.0, 0.1, steps),
        step_radius: Schedule::flat(0.5),
        probe_radius: Schedule::flat(1.0),
        parallel: true,
        ..Default::default()
    }
}

/// CartPole policy search, three seeds, stopping once every training
/// rollout reaches the horizon.
pub fn cartpole(precision: Precision) -> ExperimentConfig {
    let task = TaskConfig::CartPole { precision, rollouts: 4, eval_episodes: 20 };
    let mut c = ExperimentConfig::new(task, Method::Polystep, Budget::steps(CARTPOLE_STEPS));
    c.optimizer = cartpole_optimizer(CARTPOLE_STEPS);
    c.seeds = vec![42, 123, 456];
    c
}

pub fn blobs_task(activation: Activation) -> TaskConfig {
    TaskConfig::Blobs { activation, hidden: 16, per_class: 50, spread: 0.5 }
}

/// Update-rule ablation setting on the 2-16-3 blobs MLP.
pub fn solver_ablation(solver: SolverKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(blobs_task(Activation::Relu), Method::Polystep, Budget::steps(BLOBS_STEPS));
    c.optimizer = OptimizerConfig {
        solver,
        subspace: SubspaceMode::Hybrid,
        rank: 4,
        epsilon: Schedule::flat(2.0),
        step_radius: Schedule::flat(10.0),
        probe_radius: Schedule::flat(1.0),
        ..Default::default()
    };
    c
}

/// Flat or cosine temperature on the blobs MLP, otherwise identical.
pub fn fragility(cosine: bool) -> ExperimentConfig {
    let mut c = solver_ablation(SolverKind::Softmax);
    c.optimizer.epsilon = if cosine { Schedule::cosine(2.0, 0.05, BLOBS_STEPS) } else { Schedule::flat(0.5) };
    c.seeds = vec![42, 123, 456];
    c
}

/// PolyStep side of the equal-budget baseline comparison.
pub fn baseline_comparison(activation: Activation) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(blobs_task(activation), Method::Polystep, Budget::steps(BLOBS_STEPS));
    c.optimizer = OptimizerConfig {
        epsilon: Schedule::flat(0.5),
        step_radius: Schedule::flat(1.0),
        momentum: Schedule::flat(0.95),
        ..Default::default()
    };
    c
}

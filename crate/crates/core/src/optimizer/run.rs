use std::ops::ControlFlow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, OptimizerState, StepMetrics};
use crate::error::{invalid, Result};
use crate::objectives::Objective;

/// Stopping rule. A run ends when any set limit would be exceeded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub max_steps: Option<usize>,
    /// Probe evaluations; a fresh solve is only started if it fits.
    pub max_evals: Option<u64>,
}

impl Budget {
    pub fn steps(n: usize) -> Self {
        Self { max_steps: Some(n), max_evals: None }
    }

    pub fn evals(n: u64) -> Self {
        Self { max_steps: None, max_evals: Some(n) }
    }
}

pub type Callback<'a> = Box<dyn FnMut(&StepMetrics, &OptimizerState) -> ControlFlow<()> + 'a>;

#[derive(Default)]
pub struct RunOptions<'a> {
    pub budget: Budget,
    /// Lower-is-better score used for checkpointing instead of the training
    /// loss, e.g. a held-out error rate.
    pub checkpoint_metric: Option<&'a dyn Fn(&[f64]) -> f64>,
    /// Called after every step; `Break` ends the run early.
    pub callback: Option<Callback<'a>>,
}

impl<'a> RunOptions<'a> {
    pub fn new(budget: Budget) -> Self {
        Self { budget, ..Default::default() }
    }

    pub fn with_callback(mut self, f: impl FnMut(&StepMetrics, &OptimizerState) -> ControlFlow<()> + 'a) -> Self {
        self.callback = Some(Box::new(f));
        self
    }

    pub fn with_checkpoint_metric(mut self, f: &'a dyn Fn(&[f64]) -> f64) -> Self {
        self.checkpoint_metric = Some(f);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub crate_version: String,
}

impl EnvironmentInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Outcome of one optimizer or baseline run; `C` is the method's config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult<C = OptimizerConfig> {
    pub config: C,
    pub seed: u64,
    /// Loss before the first step followed by the loss after every step.
    pub loss_trace: Vec<f64>,
    /// Cumulative probe evaluations aligned with `loss_trace`.
    pub eval_trace: Vec<u64>,
    pub best_loss: f64,
    pub final_loss: f64,
    /// Best checkpoint score under the external metric, when one was given.
    pub best_metric: Option<f64>,
    pub steps: usize,
    pub evals: u64,
    pub loss_evals: u64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
    pub environment: EnvironmentInfo,
    /// Restored best checkpoint.
    pub params: Vec<f64>,
    /// Iterate at termination.
    pub last_params: Vec<f64>,
}

/// Runs PolyStep from `theta0` until the budget is spent, then restores the
/// best checkpoint.
pub fn run(config: &OptimizerConfig, objective: &dyn Objective, theta0: &[f64], mut opts: RunOptions<'_>) -> Result<RunResult> {
    if opts.budget.max_steps.is_none() && opts.budget.max_evals.is_none() {
        return Err(invalid("a run needs a step or evaluation budget"));
    }
    let start = Instant::now();
    let mut state = OptimizerState::new(config.clone(), objective, theta0)?;
    let mut loss_trace = vec![state.loss()];
    let mut eval_trace = vec![0];
    let mut best_metric = opts.checkpoint_metric.map(|m| (m(theta0), theta0.to_vec()));
    let mut stopped_early = false;
    loop {
        if opts.budget.max_steps.is_some_and(|n| state.step_count() >= n) {
            break;
        }
        if let Some(limit) = opts.budget.max_evals {
            if state.next_step_solves() && state.evals() + state.evals_per_solve() > limit {
                break;
            }
        }
        let metrics = state.step(objective)?;
        loss_trace.push(metrics.loss);
        eval_trace.push(metrics.evals);
        if let (Some(metric), Some(best)) = (opts.checkpoint_metric, best_metric.as_mut()) {
            let params = state.params();
            let score = metric(&params);
            if score < best.0 {
                *best = (score, params);
            }
        }
        if let Some(cb) = opts.callback.as_mut() {
            if cb(&metrics, &state).is_break() {
                stopped_early = true;
                break;
            }
        }
    }
    let last_params = state.params();
    let (params, best_score) = match best_metric {
        Some((score, params)) => (params, Some(score)),
        None => (state.best_params().to_vec(), None),
    };
    Ok(RunResult {
        config: config.clone(),
        seed: config.seed,
        best_loss: state.best_loss(),
        final_loss: state.loss(),
        best_metric: best_score,
        steps: state.step_count(),
        evals: state.evals(),
        loss_evals: state.loss_evals(),
        stopped_early,
        wall_seconds: start.elapsed().as_secs_f64(),
        environment: EnvironmentInfo::current(),
        params,
        last_params,
        loss_trace,
        eval_trace,
    })
}

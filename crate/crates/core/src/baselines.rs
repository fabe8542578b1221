//! Reference gradient-free optimizers: SPSA, isotropic evolution strategies
//! and random search.
//!
//! All three consume the same [`Objective`] and [`Budget`] as PolyStep and
//! report the same [`RunResult`] layout, so equal-budget comparisons only
//! differ in the method. Per-step probe costs are exact: SPSA uses 2
//! evaluations, ES uses `population`, random search uses 1.
//!
//! ```
//! use polystep::baselines::{run_baseline, BaselineConfig, BaselineKind};
//! use polystep::objectives::quadratic;
//! use polystep::optimizer::Budget;
//!
//! let q = quadratic(4, None);
//! let config = BaselineConfig { kind: BaselineKind::Spsa, ..Default::default() };
//! let res = run_baseline(&config, &q, &[1.0; 4], Budget::steps(50)).unwrap();
//! assert_eq!(res.evals, 100);
//! assert!(res.best_loss < res.loss_trace[0]);
//! ```

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::Objective;
use crate::optimizer::{Budget, EnvironmentInfo, RunResult};
use crate::rng::{seeded, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Spsa,
    IsotropicEs,
    RandomSearch,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "spsa" => Ok(Self::Spsa),
            "es" | "isotropic_es" | "openai_es" => Ok(Self::IsotropicEs),
            "random" | "random_search" => Ok(Self::RandomSearch),
            _ => Err(invalid(format!("unknown baseline '{s}'"))),
        }
    }
}

/// Settings for every baseline; each kind reads only its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// SPSA step gain.
    pub a: f64,
    /// SPSA perturbation size.
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// SPSA stability offset as a fraction of the step budget.
    pub stability_fraction: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub population: usize,
    pub antithetic: bool,
    pub rank_shaping: bool,
    pub radius: f64,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Spsa,
            a: 0.1,
            c: 0.1,
            alpha: 0.602,
            gamma: 0.101,
            stability_fraction: 0.1,
            sigma: 0.1,
            learning_rate: 0.05,
            population: 20,
            antithetic: true,
            rank_shaping: true,
            radius: 0.1,
            parallel: false,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("a", self.a), ("c", self.c), ("sigma", self.sigma), ("learning_rate", self.learning_rate)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(invalid(format!("radius must be non-negative, got {}", self.radius)));
        }
        if self.stability_fraction < 0.0 {
            return Err(invalid("stability_fraction must be non-negative"));
        }
        if self.population < 2 {
            return Err(invalid("population must be at least 2"));
        }
        if self.antithetic && self.population % 2 != 0 {
            return Err(invalid(format!("antithetic sampling needs an even population, got {}", self.population)));
        }
        Ok(())
    }

    /// Probe evaluations per step.
    pub fn evals_per_step(&self) -> u64 {
        match self.kind {
            BaselineKind::Spsa => 2,
            BaselineKind::IsotropicEs => self.population as u64,
            BaselineKind::RandomSearch => 1,
        }
    }
}

fn finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss(value))
    }
}

/// One SPSA update in place. Returns the gradient estimate.
pub fn spsa_step(theta: &mut [f64], objective: &dyn Objective, a_t: f64, c_t: f64, rng: &mut Rng64) -> Result<Vec<f64>> {
    if !(c_t > 0.0) {
        return Err(invalid(format!("c_t must be positive, got {c_t}")));
    }
    let delta: Vec<f64> = (0..theta.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let shifted = |sign: f64| theta.iter().zip(&delta).map(|(t, d)| t + sign * c_t * d).collect::<Vec<_>>();
    let plus = finite(objective.eval(&shifted(1.0)))?;
    let minus = finite(objective.eval(&shifted(-1.0)))?;
    let diff = (plus - minus) / (2.0 * c_t);
    let grad: Vec<f64> = delta.iter().map(|d| diff / d).collect();
    theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= a_t * g);
    Ok(grad)
}

/// Centered ranks in `[-0.5, 0.5]`, lowest loss first. Ties share their
/// average rank, so a constant input maps to all zeros.
pub fn rank_weights(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && losses[order[end]] == losses[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        order[start..end].iter().for_each(|&i| ranks[i] = avg);
        start = end;
    }
    ranks.iter().map(|r| r / (n - 1) as f64 - 0.5).collect()
}

/// Population settings for [`es_step`].
#[derive(Clone, Copy, Debug)]
pub struct EsParams {
    pub sigma: f64,
    pub learning_rate: f64,
    pub population: usize,
    pub antithetic: bool,
    pub rank_shaping: bool,
    pub parallel: bool,
}

/// One ES update in place: `theta -= lr / (pop sigma) * sum_i w_i eps_i`,
/// with `w` the (optionally rank-shaped) losses. Returns the raw losses.
pub fn es_step(theta: &mut [f64], objective: &dyn Objective, p: EsParams, rng: &mut Rng64) -> Result<Vec<f64>> {
    if p.population < 2 || (p.antithetic && p.population % 2 != 0) {
        return Err(invalid(format!("invalid ES population {}", p.population)));
    }
    let d = theta.len();
    let draws = if p.antithetic { p.population / 2 } else { p.population };
    let mut noise: Vec<Vec<f64>> = (0..draws).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    if p.antithetic {
        let mirrored: Vec<Vec<f64>> = noise.iter().map(|e| e.iter().map(|x| -x).collect()).collect();
        noise.extend(mirrored);
    }
    let eval = |eps: &Vec<f64>| {
        let candidate: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + p.sigma * e).collect();
        objective.eval(&candidate)
    };
    let losses: Vec<f64> = if p.parallel { noise.par_iter().map(eval).collect() } else { noise.iter().map(eval).collect() };
    for &l in &losses {
        finite(l)?;
    }
    let weights = if p.rank_shaping {
        rank_weights(&losses)
    } else {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        losses.iter().map(|l| l - mean).collect()
    };
    let scale = p.learning_rate / (p.population as f64 * p.sigma);
    for (w, eps) in weights.iter().zip(&noise) {
        theta.iter_mut().zip(eps).for_each(|(t, e)| *t -= scale * w * e);
    }
    Ok(losses)
}

/// Proposes `theta + radius u` with `u` uniform on the sphere and keeps it
/// only if the loss improves. Returns whether the move was accepted.
pub fn random_search_step(theta: &mut [f64], loss: &mut f64, objective: &dyn Objective, radius: f64, rng: &mut Rng64) -> Result<bool> {
    let mut u: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x *= radius / norm.max(f64::MIN_POSITIVE));
    let candidate: Vec<f64> = theta.iter().zip(&u).map(|(t, x)| t + x).collect();
    let value = finite(objective.eval(&candidate))?;
    if value < *loss {
        theta.copy_from_slice(&candidate);
        *loss = value;
        return Ok(true);
    }
    Ok(false)
}

/// Runs a baseline under `budget`, tracking the best iterate.
pub fn run_baseline(config: &BaselineConfig, objective: &dyn Objective, theta0: &[f64], budget: Budget) -> Result<RunResult<BaselineConfig>> {
    config.validate()?;
    if theta0.len() != objective.dim() {
        return Err(invalid(format!("theta0 has length {}, objective expects {}", theta0.len(), objective.dim())));
    }
    let per_step = config.evals_per_step();
    let max_steps = match (budget.max_steps, budget.max_evals) {
        (Some(s), Some(e)) => s.min((e / per_step) as usize),
        (Some(s), None) => s,
        (None, Some(e)) => (e / per_step) as usize,
        (None, None) => return Err(invalid("a run needs a step or evaluation budget")),
    };
    let start = Instant::now();
    let mut rng = seeded(config.seed);
    let mut theta = theta0.to_vec();
    let mut loss = finite(objective.eval(&theta))?;
    let mut loss_evals = 1u64;
    let (mut best_loss, mut best_params) = (loss, theta.clone());
    let mut loss_trace = vec![loss];
    let mut eval_trace = vec![0];
    let stability = config.stability_fraction * max_steps as f64;
    let es = EsParams {
        sigma: config.sigma,
        learning_rate: config.learning_rate,
        population: config.population,
        antithetic: config.antithetic,
        rank_shaping: config.rank_shaping,
        parallel: config.parallel,
    };
    for t in 0..max_steps {
        match config.kind {
            BaselineKind::Spsa => {
                let a_t = config.a / (t as f64 + 1.0 + stability).powf(config.alpha);
                let c_t = config.c / (t as f64 + 1.0).powf(config.gamma);
                spsa_step(&mut theta, objective, a_t, c_t, &mut rng)?;
            }
            BaselineKind::IsotropicEs => {
                es_step(&mut theta, objective, es, &mut rng)?;
            }
            BaselineKind::RandomSearch => {
                random_search_step(&mut theta, &mut loss, objective, config.radius, &mut rng)?;
            }
        }
        if config.kind != BaselineKind::RandomSearch {
            loss = finite(objective.eval(&theta))?;
            loss_evals += 1;
        }
        if loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(&theta);
        }
        loss_trace.push(loss);
        eval_trace.push((t as u64 + 1) * per_step);
    }
    Ok(RunResult {
        config: config.clone(),
        seed: config.seed,
        best_loss,
        final_loss: loss,
        best_metric: None,
        steps: max_steps,
        evals: max_steps as u64 * per_step,
        loss_evals,
        stopped_early: false,
        wall_seconds: start.elapsed().as_secs_f64(),
        environment: EnvironmentInfo::current(),
        params: best_params,
        last_params: theta,
        loss_trace,
        eval_trace,
    })
}

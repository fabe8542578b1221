//! CartPole balancing with quantized policies and batched rollout costs.
//!
//! Dynamics follow the classic cart-pole equations with Euler integration.
//! Each episode starts from a state drawn uniformly in `[-0.05, 0.05]^4`
//! from its seed, so one seed always produces one trajectory for one policy.
//! Candidates are compared on common random numbers: rollout `m` of every
//! candidate uses seed `base + m`.
//!
//! ```
//! use polystep::rlenv::{hoeffding_radius, CartPole};
//!
//! let mut env = CartPole::new(7);
//! let (reward, done) = env.step(1);
//! assert_eq!((reward, done), (1.0, false));
//! let r = hoeffding_radius(64, 8, 500, 1.0, 0.05).unwrap();
//! assert!((r - 700.4).abs() < 0.1);
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::{Activation, Objective, Smoothness, TinyMlp};
use crate::rng::seeded;
use crate::subspace::LayerShape;

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const MAX_STEPS: usize = 500;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;

/// Cart-pole state `(x, x_dot, theta, theta_dot)` with a step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPole {
    pub state: [f64; 4],
    pub steps: usize,
    pub done: bool,
}

impl CartPole {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut state = [0.0; 4];
        state.iter_mut().for_each(|s| *s = rng.random_range(-0.05..=0.05));
        Self::from_state(state)
    }

    pub fn from_state(state: [f64; 4]) -> Self {
        Self { state, steps: 0, done: false }
    }

    /// Applies action 0 (push left) or 1 (push right). The terminating step
    /// still earns its reward.
    pub fn step(&mut self, action: usize) -> (f64, bool) {
        if self.done {
            return (0.0, true);
        }
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { FORCE } else { -FORCE };
        let total_mass = CART_MASS + POLE_MASS;
        let pm_length = POLE_MASS * HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pm_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
        let x_acc = temp - pm_length * theta_acc * cos / total_mass;
        self.state = [x + TAU * x_dot, x_dot + TAU * x_acc, theta + TAU * theta_dot, theta_dot + TAU * theta_acc];
        self.steps += 1;
        let fallen = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        self.done = fallen || self.steps >= MAX_STEPS;
        (1.0, self.done)
    }
}

/// Numeric regime of the hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Plain ReLU.
    Float32,
    /// ReLU with symmetric 8-bit rounding.
    Int8,
    /// `sign` activations.
    Binary,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "float32" | "fp32" | "float" => Ok(Self::Float32),
            "int8" => Ok(Self::Int8),
            "binary" | "sign" => Ok(Self::Binary),
            _ => Err(invalid(format!("unknown precision '{s}'"))),
        }
    }
}

/// 4-16-2 MLP policy; the action is the argmax logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub precision: Precision,
    pub net: TinyMlp,
}

impl Policy {
    pub fn new(precision: Precision) -> Self {
        Self::with_hidden(precision, 16)
    }

    pub fn with_hidden(precision: Precision, hidden: usize) -> Self {
        let activation = match precision {
            Precision::Float32 => Activation::Relu,
            Precision::Int8 => Activation::Int8Round,
            Precision::Binary => Activation::Sign,
        };
        Self { precision, net: TinyMlp::new(&[4, hidden, 2], activation) }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn act(&self, theta: &[f64], obs: &[f64; 4], a: &mut Vec<f64>, b: &mut Vec<f64>) -> usize {
        let logits = self.net.forward(theta, obs, a, b);
        // ties go to the lower action, like the MLP argmax
        usize::from(logits[1] > logits[0])
    }
}

/// Undiscounted return of one episode.
pub fn rollout(policy: &Policy, theta: &[f64], seed: u64) -> f64 {
    let mut env = CartPole::new(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    while !env.done {
        let action = policy.act(theta, &env.state, &mut a, &mut b);
        total += env.step(action).0;
    }
    total
}

/// One episode with every visited state, for debugging dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub seed: u64,
    pub states: Vec<[f64; 4]>,
    pub actions: Vec<usize>,
    pub total: f64,
}

pub fn rollout_trace(policy: &Policy, theta: &[f64], seed: u64) -> RolloutTrace {
    let mut env = CartPole::new(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut trace = RolloutTrace { seed, states: vec![env.state], actions: Vec::new(), total: 0.0 };
    while !env.done {
        let action = policy.act(theta, &env.state, &mut a, &mut b);
        trace.total += env.step(action).0;
        trace.actions.push(action);
        trace.states.push(env.state);
    }
    trace
}

/// Negative mean returns of a candidate batch under shared seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutEstimate {
    pub costs: Vec<f64>,
    pub rollouts: usize,
    pub horizon: usize,
    pub r_max: f64,
    pub crn_seeds: Vec<u64>,
}

pub fn batched_cost(policy: &Policy, candidates: &[Vec<f64>], rollouts: usize, crn_base_seed: u64) -> Result<RolloutEstimate> {
    if rollouts == 0 {
        return Err(invalid("at least one rollout per candidate is required"));
    }
    let seeds: Vec<u64> = (0..rollouts as u64).map(|m| crn_base_seed.wrapping_add(m)).collect();
    let costs = candidates.par_iter().map(|theta| -mean_return(policy, theta, &seeds)).collect();
    Ok(RolloutEstimate { costs, rollouts, horizon: MAX_STEPS, r_max: 1.0, crn_seeds: seeds })
}

fn mean_return(policy: &Policy, theta: &[f64], seeds: &[u64]) -> f64 {
    seeds.iter().map(|&s| rollout(policy, theta, s)).sum::<f64>() / seeds.len() as f64
}

/// `2 H R_max sqrt(ln(2N / delta) / (2M))`, the uniform deviation bound for
/// `N` candidates estimated from `M` rollouts each.
pub fn hoeffding_radius(n: usize, m: usize, horizon: usize, r_max: f64, delta: f64) -> Result<f64> {
    if n == 0 || m == 0 || horizon == 0 || !(r_max > 0.0) {
        return Err(invalid("candidates, rollouts, horizon and reward bound must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(2.0 * horizon as f64 * r_max * ((2.0 * n as f64 / delta).ln() / (2.0 * m as f64)).sqrt())
}

/// Policy-search loss: negative mean return over a fixed seed set.
#[derive(Clone, Debug)]
pub struct PolicyCost {
    pub policy: Policy,
    pub seeds: Vec<u64>,
}

impl PolicyCost {
    pub fn new(policy: Policy, rollouts: usize, crn_base_seed: u64) -> Result<Self> {
        if rollouts == 0 {
            return Err(invalid("at least one rollout is required"));
        }
        Ok(Self { policy, seeds: (0..rollouts as u64).map(|m| crn_base_seed.wrapping_add(m)).collect() })
    }

    /// Mean return over `episodes` seeds disjoint from the training set.
    pub fn held_out_return(&self, theta: &[f64], episodes: usize, base: u64) -> f64 {
        let seeds: Vec<u64> = (0..episodes as u64).map(|m| base.wrapping_add(m)).collect();
        mean_return(&self.policy, theta, &seeds)
    }
}

impl Objective for PolicyCost {
    fn dim(&self) -> usize {
        self.policy.param_count()
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        -mean_return(&self.policy, theta, &self.seeds)
    }

    fn name(&self) -> String {
        format!("cartpole_{:?}", self.policy.precision).to_lowercase()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::PiecewiseConstant
    }

    fn layers(&self) -> Option<Vec<LayerShape>> {
        Some(self.policy.net.layers())
    }
}

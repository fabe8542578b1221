//! The PolyStep outer loop.
//!
//! One step reshapes the search coordinates into particles, probes the loss
//! along rotated polytope directions around every particle, turns the probe
//! costs into a transport plan and moves each particle to the plan-weighted
//! barycenter of its step vertices. Momentum, plan amortization, biased
//! rotations and per-layer blocking sit on top of that core.
//!
//! ```
//! use polystep::objectives::quadratic;
//! use polystep::optimizer::{OptimizerConfig, OptimizerState};
//!
//! let loss = quadratic(4, None);
//! let mut state = OptimizerState::new(OptimizerConfig::default(), &loss, &[1.0; 4]).unwrap();
//! let before = state.loss();
//! for _ in 0..20 {
//!     state.step(&loss).unwrap();
//! }
//! assert!(state.loss() < before);
//! assert_eq!(state.evals(), 20 * 2 * 4);
//! ```

mod config;
mod run;

pub use config::OptimizerConfig;
pub use run::{run, Budget, EnvironmentInfo, RunOptions, RunResult};

use std::ops::Range;
use std::sync::Arc;

use serde::Serialize;

use crate::assignment::{
    build_cost_matrix, degenerate_plan, kl_softmax_plan, sinkhorn_plan, softmax_plan, transport_cost, uniform,
    CostMatrix, DegenerateRule, DualState, ProbeSet, SolveDump, SolverKind, SolverOptions, TransportPlan,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    polytope_vertices, probe_points, rotated_directions, sample_biased_rotation, sample_rotation, PolytopeTemplate,
    Rotation,
};
use crate::objectives::Objective;
use crate::rng::{self, streams, Rng64};
use crate::schedule::sample_jitter;
use crate::subspace::{project_loss, SubspaceMode, SubspaceProjection};

/// Contiguous run of search coordinates reshaped into its own particles.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    coords: Range<usize>,
    rows: Range<usize>,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Loss after the update.
    pub loss: f64,
    /// `<C, T>` summed over blocks; `None` on amortized steps.
    pub transport_cost: Option<f64>,
    pub epsilon: f64,
    pub step_radius: f64,
    pub probe_radius: f64,
    pub momentum: f64,
    pub eta: f64,
    /// Cumulative probe evaluations.
    pub evals: u64,
    pub solver_iterations: usize,
    pub solver_converged: bool,
    pub amortized: bool,
    pub gate_tripped: bool,
    /// Norm of the applied update in search coordinates.
    pub displacement_norm: f64,
}

/// Plan kept between fresh solves.
#[derive(Clone, Debug)]
struct Amortized {
    /// Row-stochastic `P x V` weights blended across solves.
    weights: Vec<f64>,
    rotations: Vec<Rotation>,
    since_solve: usize,
}

/// Mutable optimizer state. Owns the search coordinates, the subspace map and
/// all random streams, so a state replays exactly from its config.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    template: PolytopeTemplate,
    projection: Arc<SubspaceProjection>,
    /// Full-space anchor; the parameters are `base + P z`.
    base: Vec<f64>,
    blocks: Vec<Block>,
    /// Particle matrix `P x d_p`, padding entries held at zero.
    x: Vec<f64>,
    velocity: Vec<f64>,
    duals: Vec<Option<DualState>>,
    amortized: Option<Amortized>,
    step: usize,
    loss: f64,
    prev_loss: f64,
    best_loss: f64,
    best_params: Vec<f64>,
    evals: u64,
    loss_evals: u64,
    rotation_rng: Rng64,
    jitter_rng: Rng64,
    last_cost: Option<CostMatrix>,
    last_plans: Vec<(TransportPlan, Option<DualState>)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, objective: &dyn Objective, theta0: &[f64]) -> Result<Self> {
        config.validate()?;
        let d = objective.dim();
        if theta0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: theta0.len() });
        }
        let layers = objective.layers();
        let projection = match config.subspace {
            SubspaceMode::Full => SubspaceProjection::full(d),
            SubspaceMode::Hybrid => {
                let layers = layers.as_deref().ok_or_else(|| invalid("hybrid subspace needs an objective with layer shapes"))?;
                SubspaceProjection::hybrid(layers, config.rank, config.seed, config.max_subspace_dim)?
            }
            SubspaceMode::Linear | SubspaceMode::SparseLinear => {
                SubspaceProjection::linear(d, config.rank.min(d), config.subspace == SubspaceMode::SparseLinear, config.seed)?
            }
            SubspaceMode::Adaptive => {
                SubspaceProjection::adaptive(d, config.rank.min(d), config.adaptive_ema, config.adaptive_refresh, config.seed)?
            }
        };
        if projection.d_full != d {
            return Err(Error::DimensionMismatch { expected: d, got: projection.d_full });
        }
        let ranges = if config.blockwise { projection.block_ranges(layers.as_deref()) } else { vec![0..projection.d_sub] };
        let mut blocks = Vec::with_capacity(ranges.len());
        let mut row = 0;
        for coords in ranges {
            let rows = coords.len().div_ceil(config.dp);
            blocks.push(Block { coords, rows: row..row + rows });
            row += rows;
        }
        let template = polytope_vertices(config.polytope, config.dp)?;
        let (z, base) = if config.subspace == SubspaceMode::Full {
            (theta0.to_vec(), Vec::new())
        } else {
            (vec![0.0; projection.d_sub], theta0.to_vec())
        };
        let mut state = Self {
            template,
            base,
            x: vec![0.0; row * config.dp],
            velocity: vec![0.0; row * config.dp],
            duals: vec![None; blocks.len()],
            blocks,
            amortized: None,
            step: 0,
            loss: f64::NAN,
            prev_loss: f64::NAN,
            best_loss: f64::INFINITY,
            best_params: theta0.to_vec(),
            evals: 0,
            loss_evals: 0,
            rotation_rng: rng::stream(config.seed, streams::ROTATION),
            jitter_rng: rng::stream(config.seed, streams::JITTER),
            last_cost: None,
            last_plans: Vec::new(),
            projection: Arc::new(projection),
            config,
        };
        state.x = state.coords_to_particles(&z);
        let loss = state.eval_coords(objective, &z)?;
        state.loss = loss;
        state.prev_loss = loss;
        state.best_loss = loss;
        Ok(state)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn particles(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.rows.end)
    }

    /// Probe evaluations per fresh solve, `P V K`.
    pub fn evals_per_solve(&self) -> u64 {
        (self.particles() * self.template.n_vertices() * self.config.probes) as u64
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    /// Plain loss evaluations used for tracking, not counted in [`Self::evals`].
    pub fn loss_evals(&self) -> u64 {
        self.loss_evals
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn best_params(&self) -> &[f64] {
        &self.best_params
    }

    pub fn search_dim(&self) -> usize {
        self.projection.d_sub
    }

    pub fn projection(&self) -> &SubspaceProjection {
        &self.projection
    }

    /// Current search coordinates `z` (the parameters themselves in full mode).
    pub fn coords(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.projection.d_sub];
        let dp = self.config.dp;
        for b in &self.blocks {
            for (r, row) in b.rows.clone().enumerate() {
                let start = b.coords.start + r * dp;
                let end = (start + dp).min(b.coords.end);
                z[start..end].copy_from_slice(&self.x[row * dp..row * dp + end - start]);
            }
        }
        z
    }

    /// Current full parameter vector.
    pub fn params(&self) -> Vec<f64> {
        self.full_params(&self.coords())
    }

    /// Replaces the tracked best with an externally scored checkpoint.
    pub fn offer_checkpoint(&mut self, score: f64, params: &[f64]) {
        if score < self.best_loss {
            self.best_loss = score;
            self.best_params = params.to_vec();
        }
    }

    /// Cost matrix and per-block plans of the last fresh solve.
    pub fn solve_dumps(&self) -> Vec<SolveDump<'_>> {
        let Some(cost) = &self.last_cost else { return Vec::new() };
        self.last_plans
            .iter()
            .map(|(plan, duals)| SolveDump {
                step: self.step.saturating_sub(1),
                epsilon: self.config.epsilon.eval(self.step.saturating_sub(1)),
                cost,
                plan,
                duals: duals.as_ref(),
            })
            .collect()
    }

    fn full_params(&self, z: &[f64]) -> Vec<f64> {
        if self.base.is_empty() {
            return z.to_vec();
        }
        let mut theta = self.base.clone();
        self.projection.add_columns(0, z, &mut theta);
        theta
    }

    fn coords_to_particles(&self, z: &[f64]) -> Vec<f64> {
        let dp = self.config.dp;
        let mut x = vec![0.0; self.particles() * dp];
        for b in &self.blocks {
            for (r, row) in b.rows.clone().enumerate() {
                let start = b.coords.start + r * dp;
                let end = (start + dp).min(b.coords.end);
                x[row * dp..row * dp + end - start].copy_from_slice(&z[start..end]);
            }
        }
        x
    }

    /// Coordinate offset and live width of particle `row`.
    fn particle_span(&self, row: usize) -> (usize, usize) {
        let b = &self.blocks[self.blocks.partition_point(|b| b.rows.end <= row)];
        let start = b.coords.start + (row - b.rows.start) * self.config.dp;
        (start, (b.coords.end - start).min(self.config.dp))
    }

    fn eval_coords(&mut self, objective: &dyn Objective, z: &[f64]) -> Result<f64> {
        self.loss_evals += 1;
        let value = objective.eval(&self.full_params(z));
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteLoss(value))
        }
    }

    /// One optimizer step. On error the state is left as it was.
    pub fn step(&mut self, objective: &dyn Objective) -> Result<StepMetrics> {
        let mut next = self.clone();
        let metrics = next.advance(objective)?;
        *self = next;
        Ok(metrics)
    }

    fn advance(&mut self, objective: &dyn Objective) -> Result<StepMetrics> {
        let t = self.step;
        let cfg = &self.config;
        let dp = cfg.dp;
        let n_vert = self.template.n_vertices();
        let n_part = self.particles();
        let eps = cfg.epsilon.eval(t);
        let r_s = cfg.step_radius.eval(t);
        let r_p = cfg.probe_radius.eval(t);
        let m = cfg.momentum.eval(t);
        let eta = sample_jitter(cfg.eta_max, &mut self.jitter_rng);

        let (reuse, gate_tripped) = self.plan_reuse();

        let rotations = if reuse {
            self.amortized.as_ref().map(|a| a.rotations.clone()).unwrap_or_default()
        } else {
            self.sample_rotations()?
        };
        let dirs: Vec<Vec<f64>> = rotations.iter().map(|r| rotated_directions(r, &self.template)).collect();

        let mut metrics = StepMetrics {
            step: t,
            loss: f64::NAN,
            transport_cost: None,
            epsilon: eps,
            step_radius: r_s,
            probe_radius: r_p,
            momentum: m,
            eta,
            evals: 0,
            solver_iterations: 0,
            solver_converged: true,
            amortized: reuse,
            gate_tripped,
            displacement_norm: 0.0,
        };

        let weights = if reuse {
            let a = self.amortized.as_mut().expect("reuse implies a stored plan");
            a.since_solve += 1;
            a.weights.clone()
        } else {
            let z = self.coords();
            let cost = self.cost_matrix(objective, &z, &rotations, r_p * (1.0 + eta) * eps)?;
            self.evals += cost.evaluations();
            let (fresh, tc, iters, converged) = self.solve(&cost, eps)?;
            metrics.transport_cost = Some(tc);
            metrics.solver_iterations = iters;
            metrics.solver_converged = converged;
            self.last_cost = Some(cost);
            let blended = match self.amortized.take() {
                Some(prev) if self.config.amortize_steps > 1 => blend_rows(&prev.weights, &fresh, self.config.amortize_ema, n_vert),
                _ => fresh.clone(),
            };
            self.amortized = Some(Amortized { weights: blended, rotations: rotations.clone(), since_solve: 1 });
            fresh
        };

        // displacement in offset form: x + s sum_j w_j d_j, so that symmetric
        // vertex sets cancel exactly under uniform weights
        let scale = r_s * eps;
        let mut step_disp = vec![0.0; n_part * dp];
        for i in 0..n_part {
            let w = &weights[i * n_vert..(i + 1) * n_vert];
            let out = &mut step_disp[i * dp..(i + 1) * dp];
            for (wj, d) in w.iter().zip(dirs[i].chunks_exact(dp)) {
                if *wj == 0.0 {
                    continue;
                }
                for (o, dk) in out.iter_mut().zip(d) {
                    *o += wj * dk;
                }
            }
            out.iter_mut().for_each(|o| *o *= scale);
        }
        let mut sq = 0.0;
        for i in 0..n_part {
            let (_, live) = self.particle_span(i);
            for k in 0..dp {
                let idx = i * dp + k;
                if k >= live {
                    self.velocity[idx] = 0.0;
                    continue;
                }
                let v = m * self.velocity[idx] + step_disp[idx];
                self.velocity[idx] = v;
                self.x[idx] += v;
                sq += v * v;
            }
        }
        metrics.displacement_norm = sq.sqrt();

        let z = self.coords();
        let loss = self.eval_coords(objective, &z)?;
        self.prev_loss = self.loss;
        self.loss = loss;
        self.step += 1;
        metrics.loss = loss;
        metrics.evals = self.evals;
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_params = self.full_params(&z);
        }
        if self.config.subspace == SubspaceMode::Adaptive {
            self.rebase_adaptive(&z);
        }
        Ok(metrics)
    }

    /// Whether the next step reuses the amortized plan, and whether the loss
    /// gate forced a fresh solve.
    fn plan_reuse(&self) -> (bool, bool) {
        let cfg = &self.config;
        let Some(a) = &self.amortized else { return (false, false) };
        if cfg.amortize_steps == 1 {
            return (false, false);
        }
        // multiplicative on positive losses, and the same relative jump
        // measured against |prev| when losses are negative
        let gate = self.loss - self.prev_loss > (cfg.loss_gate_factor - 1.0) * self.prev_loss.abs();
        (a.since_solve < cfg.amortize_steps && !gate, gate)
    }

    pub fn next_step_solves(&self) -> bool {
        !self.plan_reuse().0
    }

    fn sample_rotations(&mut self) -> Result<Vec<Rotation>> {
        let dp = self.config.dp;
        let n = self.particles();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let rot = if self.config.biased_rotation {
                let prev = &self.velocity[i * dp..(i + 1) * dp];
                let norm = prev.iter().map(|v| v * v).sum::<f64>().sqrt();
                let bias: Option<Vec<f64>> = (norm > 0.0).then(|| prev.iter().map(|v| v / norm).collect());
                sample_biased_rotation(dp, bias.as_deref(), self.config.bias_strength, &mut self.rotation_rng)?
            } else {
                sample_rotation(dp, &mut self.rotation_rng)?
            };
            out.push(rot);
        }
        Ok(out)
    }

    fn cost_matrix(&self, objective: &dyn Objective, z: &[f64], rotations: &[Rotation], probe_scale: f64) -> Result<CostMatrix> {
        let dp = self.config.dp;
        let k = self.config.probes;
        let n_vert = self.template.n_vertices();
        let mut points = Vec::with_capacity(self.particles() * n_vert * k * dp);
        for (i, rot) in rotations.iter().enumerate() {
            // probe_points multiplies r_p (1 + eta) eps, pre-folded into probe_scale
            points.extend(probe_points(&self.x[i * dp..(i + 1) * dp], rot, probe_scale, 1.0, 0.0, k, &self.template));
        }
        let probes = ProbeSet { particles: self.particles(), vertices: n_vert, per_vertex: k, dim: dp, points };
        let sub;
        let obj: &dyn Objective = if self.base.is_empty() {
            objective
        } else {
            sub = project_loss(&self.projection, &self.base, objective)?;
            &sub
        };
        let evaluator = obj.probe_evaluator(z);
        build_cost_matrix(
            &probes,
            |i, pts, out| {
                let (offset, _) = self.particle_span(i);
                evaluator.eval_variants(offset, dp, pts, out);
            },
            self.config.parallel,
        )
    }

    /// Solves every block; returns row-stochastic weights, the transport cost,
    /// the summed solver iterations and whether all solves converged.
    fn solve(&mut self, cost: &CostMatrix, eps: f64) -> Result<(Vec<f64>, f64, usize, bool)> {
        let n_vert = cost.cols;
        let mut weights = Vec::with_capacity(cost.entries.len());
        let (mut tc, mut iters, mut converged) = (0.0, 0, true);
        self.last_plans.clear();
        for (bi, block) in self.blocks.iter().enumerate() {
            let rows = block.rows.len();
            let sub = CostMatrix {
                rows,
                cols: n_vert,
                entries: cost.entries[block.rows.start * n_vert..block.rows.end * n_vert].to_vec(),
                probes: cost.probes,
            };
            let a = uniform(rows);
            let b = uniform(n_vert);
            let opts = SolverOptions { epsilon: eps, ..self.config.solver_options.clone() };
            let (plan, duals) = match self.config.solver {
                SolverKind::Softmax => (softmax_plan(&sub, eps, &a), None),
                SolverKind::Greedy => (degenerate_plan(&sub, &a, DegenerateRule::Greedy)?, None),
                SolverKind::TopKMean => (degenerate_plan(&sub, &a, DegenerateRule::TopKMean(self.config.top_k.min(n_vert)))?, None),
                SolverKind::KlSoftmax => {
                    let (p, d) = kl_softmax_plan(&sub, eps, opts.lambda, &a, &b, opts.max_iter, opts.tolerance)?;
                    (p, Some(d))
                }
                SolverKind::Sinkhorn => {
                    let (p, d) = sinkhorn_plan(&sub, &a, &b, &opts, self.duals[bi].as_ref())?;
                    self.duals[bi] = Some(d.clone());
                    (p, Some(d))
                }
            };
            if let Some(d) = &duals {
                iters += d.iterations_used;
                converged &= d.converged;
            }
            tc += transport_cost(&sub, &plan);
            for (i, row) in plan.weights.chunks_exact(n_vert).enumerate() {
                let mass = plan.row_marginal[i];
                weights.extend(row.iter().map(|w| w / mass));
            }
            self.last_plans.push((plan, duals));
        }
        Ok((weights, tc, iters, converged))
    }

    /// Folds the current coordinates into the anchor after the adaptive map
    /// moved; momentum and plans are tied to the old map and are dropped.
    fn rebase_adaptive(&mut self, z: &[f64]) {
        let mut delta = vec![0.0; self.projection.d_full];
        let dz: Vec<f64> = z.to_vec();
        self.projection.add_columns(0, &dz, &mut delta);
        if Arc::make_mut(&mut self.projection).note_displacement(&delta) {
            for (b, d) in self.base.iter_mut().zip(&delta) {
                *b += d;
            }
            self.x.iter_mut().for_each(|v| *v = 0.0);
            self.velocity.iter_mut().for_each(|v| *v = 0.0);
            self.amortized = None;
            self.duals.iter_mut().for_each(|d| *d = None);
        }
    }
}

/// `ema * prev + (1 - ema) * fresh`, renormalized per row.
fn blend_rows(prev: &[f64], fresh: &[f64], ema: f64, cols: usize) -> Vec<f64> {
    if ema == 1.0 {
        return prev.to_vec();
    }
    let mut out: Vec<f64> = prev.iter().zip(fresh).map(|(p, f)| ema * p + (1.0 - ema) * f).collect();
    for row in out.chunks_exact_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    out
}

#[cfg(test)]
mod tests;

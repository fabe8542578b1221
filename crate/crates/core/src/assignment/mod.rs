//! Soft assignment of particles to polytope vertices.
//!
//! Every solver turns a `P x V` cost matrix into a nonnegative plan whose row
//! `i` sums to `a_i`. The barycentric step then replaces each particle by the
//! plan-weighted mean of its step vertices.
//!
//! * [`softmax_plan`] enforces rows only, in one pass.
//! * [`kl_softmax_plan`] adds a KL penalty of weight `lambda` on the column
//!   marginal and interpolates between softmax and Sinkhorn.
//! * [`sinkhorn_plan`] enforces both marginals (entropic optimal transport).
//! * [`degenerate_plan`] holds the hard greedy and top-k rules kept for
//!   ablations.

mod kl;
mod sinkhorn;

pub use kl::{kl_divergence, kl_softmax_plan};
pub use sinkhorn::sinkhorn_plan;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major `P x V` matrix of averaged probe losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
    /// Probes averaged per cell.
    pub probes: usize,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: entries.len() });
        }
        if let Some(pos) = entries.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCost {
                particle: pos / cols,
                vertex: pos % cols,
                probe: 0,
                value: entries[pos],
            });
        }
        Ok(Self { rows, cols, entries, probes: 1 })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// Number of loss evaluations that produced this matrix.
    pub fn evaluations(&self) -> u64 {
        (self.rows * self.cols * self.probes) as u64
    }
}

/// Probe points for every particle, ordered particle, vertex, probe.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub particles: usize,
    pub vertices: usize,
    pub per_vertex: usize,
    pub dim: usize,
    pub points: Vec<f64>,
}

impl ProbeSet {
    pub fn particle(&self, i: usize) -> &[f64] {
        let n = self.vertices * self.per_vertex * self.dim;
        &self.points[i * n..(i + 1) * n]
    }
}

/// Averages probe losses into a cost matrix.
///
/// `loss(i, points, out)` receives the `V K` probe points of particle `i` and
/// writes one loss per point into `out`. When `parallel` is set particles are
/// evaluated on the rayon pool; results are identical either way.
pub fn build_cost_matrix<F>(probes: &ProbeSet, loss: F, parallel: bool) -> Result<CostMatrix>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let per_particle = probes.vertices * probes.per_vertex;
    let mut raw = vec![0.0; probes.particles * per_particle];
    if parallel {
        raw.par_chunks_mut(per_particle.max(1))
            .enumerate()
            .for_each(|(i, out)| loss(i, probes.particle(i), out));
    } else {
        for (i, out) in raw.chunks_mut(per_particle.max(1)).enumerate() {
            loss(i, probes.particle(i), out);
        }
    }
    if let Some(pos) = raw.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost {
            particle: pos / per_particle,
            vertex: pos % per_particle / probes.per_vertex,
            probe: pos % probes.per_vertex,
            value: raw[pos],
        });
    }
    let k = probes.per_vertex;
    let entries = if k == 1 {
        raw
    } else {
        raw.chunks_exact(k).map(|c| c.iter().sum::<f64>() / k as f64).collect()
    };
    Ok(CostMatrix { rows: probes.particles, cols: probes.vertices, entries, probes: k })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Softmax,
    KlSoftmax,
    Sinkhorn,
    Greedy,
    TopKMean,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "softmax" => Ok(Self::Softmax),
            "kl_softmax" | "klsoftmax" | "kl" => Ok(Self::KlSoftmax),
            "sinkhorn" | "ot" => Ok(Self::Sinkhorn),
            "greedy" => Ok(Self::Greedy),
            "topk" | "top_k" | "topkmean" | "top_k_mean" => Ok(Self::TopKMean),
            _ => Err(invalid(format!("unknown solver '{s}'"))),
        }
    }
}

/// Row-major `P x V` soft assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Option<Vec<f64>>,
    pub kind: SolverKind,
    /// False when an iterative solver ran out of iterations.
    pub converged: bool,
}

impl TransportPlan {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.cols];
        for r in self.weights.chunks_exact(self.cols) {
            for (qj, w) in q.iter_mut().zip(r) {
                *qj += w;
            }
        }
        q
    }

    /// Largest absolute deviation of the row sums from `a`.
    pub fn row_violation(&self) -> f64 {
        max_abs_diff(&self.row_sums(), &self.row_marginal)
    }

    /// Largest absolute deviation of the column sums from `b`, zero when no
    /// column marginal is attached.
    pub fn col_violation(&self) -> f64 {
        self.col_marginal.as_ref().map_or(0.0, |b| max_abs_diff(&self.col_sums(), b))
    }
}

/// Dual potentials of the log-domain solvers.
///
/// The plan is `exp((f_i + g_v - C_iv) / eps)`. `df`/`dg` hold the change of
/// the potentials over the last solve and feed the dual momentum blend.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub df: Vec<f64>,
    pub dg: Vec<f64>,
    pub iterations_used: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when divergence forced a fallback to plain iteration.
    pub fell_back: bool,
}

/// Options shared by the iterative solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub epsilon: f64,
    /// Over-relaxation factor in `[0.5, 1.95]`.
    pub omega: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    /// History depth for Anderson extrapolation, 0 disables it.
    pub anderson_depth: usize,
    /// Residual-driven adjustment of `omega` inside `[1.0, 1.8]`.
    pub adaptive_omega: bool,
    pub cost_mean_init: bool,
    /// Weight of the previous dual change added to a warm start, in `[0, 1)`.
    pub dual_momentum: f64,
    /// Column penalty for KL-softmax. `0` is softmax, `f64::INFINITY` is
    /// Sinkhorn. Serialized as `null` when infinite.
    #[serde(with = "infinite_as_null")]
    pub lambda: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            omega: 1.0,
            max_iter: 1000,
            tolerance: 1e-6,
            anderson_depth: 0,
            adaptive_omega: false,
            cost_mean_init: true,
            dual_momentum: 0.0,
            lambda: f64::INFINITY,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.5..=1.95).contains(&self.omega) {
            return Err(invalid(format!("omega must lie in [0.5, 1.95], got {}", self.omega)));
        }
        if !(0.0..1.0).contains(&self.dual_momentum) {
            return Err(invalid(format!("dual momentum must lie in [0, 1), got {}", self.dual_momentum)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.tolerance <= 0.0 {
            return Err(invalid("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Uniform marginal of length `n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `a_i * softmax(-C_i / eps)` row by row, with max subtraction.
pub fn softmax_plan(c: &CostMatrix, eps: f64, a: &[f64]) -> TransportPlan {
    let mut weights = vec![0.0; c.entries.len()];
    for (i, out) in weights.chunks_exact_mut(c.cols).enumerate() {
        row_softmax(c.row(i), eps, a[i], out);
    }
    TransportPlan {
        rows: c.rows,
        cols: c.cols,
        weights,
        row_marginal: a.to_vec(),
        col_marginal: None,
        kind: SolverKind::Softmax,
        converged: true,
    }
}

/// Writes `mass * softmax(-row / eps)` into `out`.
pub(crate) fn row_softmax(row: &[f64], eps: f64, mass: f64, out: &mut [f64]) {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(row) {
        *o = (-(c - min) / eps).exp();
        z += *o;
    }
    let s = mass / z;
    out.iter_mut().for_each(|o| *o *= s);
}

/// Hard assignment rules used only in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerateRule {
    /// All mass on the cheapest vertex, lowest index on ties.
    Greedy,
    /// Mass `a_i / k` on each of the `k` cheapest vertices.
    TopKMean(usize),
}

pub fn degenerate_plan(c: &CostMatrix, a: &[f64], rule: DegenerateRule) -> Result<TransportPlan> {
    let k = match rule {
        DegenerateRule::Greedy => 1,
        DegenerateRule::TopKMean(k) => k,
    };
    if k == 0 || k > c.cols {
        return Err(invalid(format!("top-k needs 1 <= k <= {}, got {k}", c.cols)));
    }
    let mut weights = vec![0.0; c.entries.len()];
    let mut order: Vec<usize> = Vec::with_capacity(c.cols);
    for (i, out) in weights.chunks_exact_mut(c.cols).enumerate() {
        let row = c.row(i);
        order.clear();
        order.extend(0..c.cols);
        // stable sort keeps the lowest index first among ties
        order.sort_by(|&x, &y| row[x].total_cmp(&row[y]));
        for &j in &order[..k] {
            out[j] = a[i] / k as f64;
        }
    }
    Ok(TransportPlan {
        rows: c.rows,
        cols: c.cols,
        weights,
        row_marginal: a.to_vec(),
        col_marginal: None,
        kind: match rule {
            DegenerateRule::Greedy => SolverKind::Greedy,
            DegenerateRule::TopKMean(_) => SolverKind::TopKMean,
        },
        converged: true,
    })
}

/// New particle positions `(1 / a_i) sum_v T_iv v_iv`.
///
/// `vertices` holds the step vertices of every particle, row-major
/// `P x V x d_p`. The result is row-major `P x d_p`.
pub fn barycentric_step(plan: &TransportPlan, vertices: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; plan.rows * dim];
    for (i, x) in out.chunks_exact_mut(dim).enumerate() {
        barycenter_row(plan.row(i), plan.row_marginal[i], &vertices[i * plan.cols * dim..(i + 1) * plan.cols * dim], x);
    }
    out
}

pub(crate) fn barycenter_row(weights: &[f64], mass: f64, vertices: &[f64], out: &mut [f64]) {
    let dim = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (w, v) in weights.iter().zip(vertices.chunks_exact(dim)) {
        if *w == 0.0 {
            continue;
        }
        let s = w / mass;
        for (o, vj) in out.iter_mut().zip(v) {
            *o += s * vj;
        }
    }
}

/// Frobenius product `<C, T>`.
pub fn transport_cost(c: &CostMatrix, plan: &TransportPlan) -> f64 {
    c.entries.iter().zip(&plan.weights).map(|(c, t)| c * t).sum()
}

/// One solver snapshot for JSON diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct SolveDump<'a> {
    pub step: usize,
    pub epsilon: f64,
    pub cost: &'a CostMatrix,
    pub plan: &'a TransportPlan,
    pub duals: Option<&'a DualState>,
}

pub(crate) fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `log sum exp` of `xs`, stable for large magnitudes.
#[inline]
pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

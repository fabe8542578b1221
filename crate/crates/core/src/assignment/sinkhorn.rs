use std::collections::VecDeque;

use super::{CostMatrix, DualState, SolverKind, SolverOptions, TransportPlan};
use crate::error::{invalid, Error, Result};

/// Checks of a growing residual in a row that trigger the plain fallback.
const DIVERGENCE_CHECKS: usize = 10;
const OMEGA_BOUNDS: (f64, f64) = (1.0, 1.8);
const ANDERSON_MAX_COND: f64 = 1e12;

/// Entropic optimal transport plan with row marginal `a` and column
/// marginal `b`, solved by over-relaxed log-domain Sinkhorn iterations.
///
/// Each iteration updates
/// `f_i <- (1 - w) f_i + w eps (log a_i - lse_v((g_v - C_iv) / eps))`
/// and then `g` symmetrically from the new `f`. Convergence is declared when
/// the plan with exactly normalized rows has every column sum within
/// `tolerance` of `b`. The returned plan always has exact rows.
///
/// Without a warm start the potentials are centered on the mean cost when
/// `cost_mean_init` is set. A warm start reuses the previous duals, plus
/// `dual_momentum` times their last change. Anderson extrapolation and the
/// adaptive `omega` rule are applied when enabled. A residual that grows for
/// ten consecutive checks switches to plain iteration with `omega = 1` and
/// sets `fell_back`. Running out of iterations returns the current plan with
/// `converged = false`.
///
/// ```
/// use polystep::assignment::{sinkhorn_plan, uniform, CostMatrix, SolverOptions};
///
/// let c = CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
/// let (plan, duals) = sinkhorn_plan(&c, &uniform(2), &uniform(2), &SolverOptions::default(), None).unwrap();
/// assert!(duals.converged);
/// assert!(plan.col_violation() < 1e-6);
/// ```
pub fn sinkhorn_plan(
    c: &CostMatrix,
    a: &[f64],
    b: &[f64],
    opts: &SolverOptions,
    warm: Option<&DualState>,
) -> Result<(TransportPlan, DualState)> {
    opts.validate()?;
    let (p, v) = (c.rows, c.cols);
    if a.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: a.len() });
    }
    if b.len() != v {
        return Err(Error::DimensionMismatch { expected: v, got: b.len() });
    }
    if a.iter().chain(b).any(|&m| !(m > 0.0)) {
        return Err(invalid("marginals must be strictly positive"));
    }
    let eps = opts.epsilon;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let (mut f, mut g) = initial_duals(c, opts, warm);
    let (f0, g0) = (f.clone(), g.clone());

    let mut omega = if opts.adaptive_omega {
        opts.omega.clamp(OMEGA_BOUNDS.0, OMEGA_BOUNDS.1)
    } else {
        opts.omega
    };
    let mut adaptive = opts.adaptive_omega;
    let mut anderson = (opts.anderson_depth > 0).then(|| Anderson::new(opts.anderson_depth));

    let mut f_exact = vec![0.0; p];
    let mut lse = vec![0.0; p];
    let mut q = vec![0.0; v];
    let mut col_max = vec![0.0; v];
    let mut col_sum = vec![0.0; v];

    let mut prev_res = f64::INFINITY;
    let mut rising = 0;
    let mut fell_back = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual;

    loop {
        // rows normalized exactly against the current g
        q.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..p {
            let row = c.row(i);
            let m = row.iter().zip(&g).map(|(cv, gv)| (gv - cv) / eps).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().zip(&g).map(|(cv, gv)| ((gv - cv) / eps - m).exp()).sum();
            lse[i] = m + s.ln();
            f_exact[i] = eps * (log_a[i] - lse[i]);
            for ((qv, cv), gv) in q.iter_mut().zip(row).zip(&g) {
                *qv += a[i] * ((gv - cv) / eps - lse[i]).exp();
            }
        }
        residual = q.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if residual < opts.tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }

        if residual > prev_res {
            rising += 1;
        } else {
            rising = 0;
        }
        if rising >= DIVERGENCE_CHECKS && !fell_back {
            log::warn!("sinkhorn residual rising for {DIVERGENCE_CHECKS} checks, falling back to omega = 1");
            fell_back = true;
            omega = 1.0;
            adaptive = false;
            anderson = None;
            rising = 0;
        }
        if adaptive && prev_res.is_finite() && prev_res > 0.0 {
            let ratio = residual / prev_res;
            if ratio < 0.5 {
                omega *= 1.05;
            } else if ratio > 0.95 {
                omega *= 0.9;
            }
            omega = omega.clamp(OMEGA_BOUNDS.0, OMEGA_BOUNDS.1);
        }
        if let Some(aa) = anderson.as_mut() {
            if residual > prev_res && aa.last_was_extrapolated {
                aa.restart();
            }
        }
        prev_res = residual;

        let x_prev = anderson.as_ref().map(|_| concat(&f, &g));
        for i in 0..p {
            f[i] = (1.0 - omega) * f[i] + omega * f_exact[i];
        }
        col_max.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        for i in 0..p {
            for (mx, cv) in col_max.iter_mut().zip(c.row(i)) {
                *mx = mx.max((f[i] - cv) / eps);
            }
        }
        col_sum.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..p {
            for ((s, cv), mx) in col_sum.iter_mut().zip(c.row(i)).zip(&col_max) {
                *s += ((f[i] - cv) / eps - mx).exp();
            }
        }
        for j in 0..v {
            let g_exact = eps * (log_b[j] - (col_max[j] + col_sum[j].ln()));
            g[j] = (1.0 - omega) * g[j] + omega * g_exact;
        }
        if let (Some(aa), Some(x)) = (anderson.as_mut(), x_prev) {
            let gx = concat(&f, &g);
            let next = aa.step(&x, &gx);
            if next.iter().all(|z| z.is_finite()) {
                f.copy_from_slice(&next[..p]);
                g.copy_from_slice(&next[p..]);
            } else {
                aa.restart();
            }
        }
        iterations += 1;
    }

    let mut weights = vec![0.0; p * v];
    for i in 0..p {
        for ((w, cv), gv) in weights[i * v..(i + 1) * v].iter_mut().zip(c.row(i)).zip(&g) {
            *w = a[i] * ((gv - cv) / eps - lse[i]).exp();
        }
    }
    let df = f_exact.iter().zip(&f0).map(|(x, y)| x - y).collect();
    let dg = g.iter().zip(&g0).map(|(x, y)| x - y).collect();
    let plan = TransportPlan {
        rows: p,
        cols: v,
        weights,
        row_marginal: a.to_vec(),
        col_marginal: Some(b.to_vec()),
        kind: SolverKind::Sinkhorn,
        converged,
    };
    let duals = DualState {
        f: f_exact,
        g,
        df,
        dg,
        iterations_used: iterations,
        residual,
        converged,
        fell_back,
    };
    Ok((plan, duals))
}

fn initial_duals(c: &CostMatrix, opts: &SolverOptions, warm: Option<&DualState>) -> (Vec<f64>, Vec<f64>) {
    let (p, v) = (c.rows, c.cols);
    if let Some(w) = warm.filter(|w| w.f.len() == p && w.g.len() == v) {
        let mut f = w.f.clone();
        let mut g = w.g.clone();
        if opts.dual_momentum > 0.0 && w.df.len() == p && w.dg.len() == v {
            for (x, d) in f.iter_mut().zip(&w.df) {
                *x += opts.dual_momentum * d;
            }
            for (x, d) in g.iter_mut().zip(&w.dg) {
                *x += opts.dual_momentum * d;
            }
        }
        return (f, g);
    }
    if !opts.cost_mean_init {
        return (vec![0.0; p], vec![0.0; v]);
    }
    let f: Vec<f64> = (0..p).map(|i| c.row(i).iter().sum::<f64>() / v as f64).collect();
    let mut g = vec![0.0; v];
    for i in 0..p {
        for (gj, cv) in g.iter_mut().zip(c.row(i)) {
            *gj += (cv - f[i]) / p as f64;
        }
    }
    (f, g)
}

fn concat(f: &[f64], g: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(f.len() + g.len());
    x.extend_from_slice(f);
    x.extend_from_slice(g);
    x
}

/// Type-II Anderson mixing over the last `depth` fixed-point residuals.
struct Anderson {
    depth: usize,
    gs: VecDeque<Vec<f64>>,
    rs: VecDeque<Vec<f64>>,
    last_was_extrapolated: bool,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, gs: VecDeque::new(), rs: VecDeque::new(), last_was_extrapolated: false }
    }

    fn restart(&mut self) {
        self.gs.clear();
        self.rs.clear();
        self.last_was_extrapolated = false;
    }

    /// Given `x` and its image `gx`, returns the next iterate.
    fn step(&mut self, x: &[f64], gx: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = gx.iter().zip(x).map(|(a, b)| a - b).collect();
        self.gs.push_back(gx.to_vec());
        self.rs.push_back(r);
        if self.gs.len() > self.depth + 1 {
            self.gs.pop_front();
            self.rs.pop_front();
        }
        let m = self.gs.len() - 1;
        self.last_was_extrapolated = false;
        if m == 0 {
            return gx.to_vec();
        }
        let n = gx.len();
        let dr: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|k| self.rs[j + 1][k] - self.rs[j][k]).collect()).collect();
        let dg: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|k| self.gs[j + 1][k] - self.gs[j][k]).collect()).collect();
        let rk = &self.rs[m];
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                gram[i * m + j] = dot(&dr[i], &dr[j]);
            }
            rhs[i] = dot(&dr[i], rk);
        }
        let Some(gamma) = solve_spd(&mut gram, &mut rhs, m) else {
            // keep only the newest pair
            let (g_last, r_last) = (self.gs.pop_back().unwrap(), self.rs.pop_back().unwrap());
            self.restart();
            self.gs.push_back(g_last);
            self.rs.push_back(r_last);
            return gx.to_vec();
        };
        let mut next = gx.to_vec();
        for (j, gj) in gamma.iter().enumerate() {
            for (z, d) in next.iter_mut().zip(&dg[j]) {
                *z -= gj * d;
            }
        }
        self.last_was_extrapolated = true;
        next
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Cholesky solve of a small symmetric system; `None` when the pivot ratio
/// suggests a condition number above the restart threshold.
fn solve_spd(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    let scale = (0..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let mut l = vec![0.0; m * m];
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= l[j * m + k] * l[j * m + k];
        }
        if !(d > 0.0) {
            return None;
        }
        min_pivot = min_pivot.min(d);
        max_pivot = max_pivot.max(d);
        let ljj = d.sqrt();
        l[j * m + j] = ljj;
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            l[i * m + j] = s / ljj;
        }
    }
    if max_pivot / min_pivot > ANDERSON_MAX_COND {
        return None;
    }
    let mut y = vec![0.0; m];
    for i in 0..m {
        let s = b[i] - (0..i).map(|k| l[i * m + k] * y[k]).sum::<f64>();
        y[i] = s / l[i * m + i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let s = y[i] - (i + 1..m).map(|k| l[k * m + i] * x[k]).sum::<f64>();
        x[i] = s / l[i * m + i];
    }
    Some(x)
}

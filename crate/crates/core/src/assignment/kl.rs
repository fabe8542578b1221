use super::{row_softmax, sinkhorn_plan, softmax_plan, CostMatrix, DualState, SolverKind, SolverOptions, TransportPlan};
use crate::error::{invalid, Error, Result};

/// Plan of the one-sided problem with a KL penalty `lambda` on the column
/// marginal.
///
/// With `alpha = lambda / (lambda + eps)` and `h = g / eps`, every iteration
/// is one row softmax pass followed by the scaling update
/// `h_j <- alpha (h_j + log b_j - log q_j)`, where `q` holds the column sums
/// of the current plan. `h` is kept centered since a constant shift leaves
/// the plan unchanged. Iteration stops when `h` moves by less than `tol`.
///
/// `lambda = 0` returns the softmax plan exactly and `lambda = inf` defers to
/// [`sinkhorn_plan`]. Running out of iterations is reported through
/// `converged = false`.
///
/// ```
/// use polystep::assignment::{kl_softmax_plan, softmax_plan, uniform, CostMatrix};
///
/// let c = CostMatrix::new(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.8]).unwrap();
/// let (p, _) = kl_softmax_plan(&c, 0.5, 0.0, &uniform(2), &uniform(3), 100, 1e-10).unwrap();
/// assert_eq!(p.weights, softmax_plan(&c, 0.5, &uniform(2)).weights);
/// ```
pub fn kl_softmax_plan(
    c: &CostMatrix,
    eps: f64,
    lambda: f64,
    a: &[f64],
    b: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(TransportPlan, DualState)> {
    if !(eps > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let (p, v) = (c.rows, c.cols);
    if a.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: a.len() });
    }
    if b.len() != v {
        return Err(Error::DimensionMismatch { expected: v, got: b.len() });
    }
    if lambda == f64::INFINITY {
        let opts = SolverOptions { epsilon: eps, max_iter, tolerance: tol, ..Default::default() };
        let (mut plan, duals) = sinkhorn_plan(c, a, b, &opts, None)?;
        plan.kind = SolverKind::KlSoftmax;
        return Ok((plan, duals));
    }
    if lambda == 0.0 {
        let mut plan = softmax_plan(c, eps, a);
        plan.kind = SolverKind::KlSoftmax;
        plan.col_marginal = Some(b.to_vec());
        let duals = DualState {
            f: row_potentials(c, eps, a, &vec![0.0; v]),
            g: vec![0.0; v],
            converged: true,
            ..Default::default()
        };
        return Ok((plan, duals));
    }
    if b.iter().any(|&m| !(m > 0.0)) {
        return Err(invalid("column marginal must be strictly positive"));
    }

    let alpha = lambda / (lambda + eps);
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut h = vec![0.0; v];
    let mut shifted = vec![0.0; v];
    let mut weights = vec![0.0; p * v];
    let mut q = vec![0.0; v];
    let mut iterations = 0;
    let mut change = f64::INFINITY;

    fill_plan(c, eps, a, &h, &mut shifted, &mut weights);
    while iterations < max_iter {
        q.iter_mut().for_each(|x| *x = 0.0);
        for row in weights.chunks_exact(v) {
            for (qj, w) in q.iter_mut().zip(row) {
                *qj += w;
            }
        }
        let mut next: Vec<f64> = (0..v).map(|j| alpha * (h[j] + log_b[j] - q[j].ln())).collect();
        let mean = next.iter().sum::<f64>() / v as f64;
        next.iter_mut().for_each(|x| *x -= mean);
        change = next.iter().zip(&h).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        h = next;
        iterations += 1;
        fill_plan(c, eps, a, &h, &mut shifted, &mut weights);
        if change < tol {
            break;
        }
    }
    let converged = change < tol;
    let g: Vec<f64> = h.iter().map(|x| eps * x).collect();
    let plan = TransportPlan {
        rows: p,
        cols: v,
        weights,
        row_marginal: a.to_vec(),
        col_marginal: Some(b.to_vec()),
        kind: SolverKind::KlSoftmax,
        converged,
    };
    let duals = DualState {
        f: row_potentials(c, eps, a, &g),
        g,
        iterations_used: iterations,
        residual: change,
        converged,
        ..Default::default()
    };
    Ok((plan, duals))
}

/// Row softmax of `h - C / eps`, computed as a softmax of `C - eps h`.
fn fill_plan(c: &CostMatrix, eps: f64, a: &[f64], h: &[f64], shifted: &mut [f64], weights: &mut [f64]) {
    for (i, out) in weights.chunks_exact_mut(c.cols).enumerate() {
        for ((s, cv), hj) in shifted.iter_mut().zip(c.row(i)).zip(h) {
            *s = cv - eps * hj;
        }
        row_softmax(shifted, eps, a[i], out);
    }
}

fn row_potentials(c: &CostMatrix, eps: f64, a: &[f64], g: &[f64]) -> Vec<f64> {
    (0..c.rows)
        .map(|i| {
            let lse = super::logsumexp(c.row(i).iter().zip(g).map(|(cv, gv)| (gv - cv) / eps));
            eps * (a[i].ln() - lse)
        })
        .collect()
}

/// `KL(q || b)` for positive vectors.
pub fn kl_divergence(q: &[f64], b: &[f64]) -> f64 {
    q.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
}

//! Polytope templates, random rotations and particle reshaping.
//!
//! A flat parameter vector of length `d` is cut into `P = ceil(d / d_p)`
//! particles of dimension `d_p`. Around every particle the optimizer places a
//! randomly rotated polytope: step vertices at radius `r_s * eps` and probe
//! points along the same directions at a fraction of `r_p * eps`.
//!
//! ```
//! use polystep::geometry::{polytope_vertices, PolytopeKind, Rotation, step_vertices};
//!
//! let t = polytope_vertices(PolytopeKind::Orthoplex, 2).unwrap();
//! let v = step_vertices(&[0.0, 0.0], &Rotation::identity(2), 1.0, 1.0, &t);
//! assert_eq!(v, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
//! ```

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest cube dimension accepted; the vertex count is `2^d_p`.
pub const MAX_CUBE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolytopeKind {
    /// Cross-polytope `{±e_j}`, `2 d_p` vertices.
    Orthoplex,
    /// Corner simplex `{0, e_1, .., e_dp}`, `d_p + 1` vertices.
    Simplex,
    /// Hypercube corners scaled to unit norm, `2^d_p` vertices.
    Cube,
}

impl std::str::FromStr for PolytopeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "orthoplex" | "cross" => Ok(Self::Orthoplex),
            "simplex" => Ok(Self::Simplex),
            "cube" | "hypercube" => Ok(Self::Cube),
            _ => Err(invalid(format!("unknown polytope '{s}'"))),
        }
    }
}

/// Vertex directions of a polytope, stored row-major as `V x d_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolytopeTemplate {
    pub kind: PolytopeKind,
    pub dim: usize,
    pub vertices: Vec<f64>,
}

impl PolytopeTemplate {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn vertex(&self, j: usize) -> &[f64] {
        &self.vertices[j * self.dim..(j + 1) * self.dim]
    }

    pub fn vertex_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        for v in self.vertices.chunks_exact(self.dim) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        sum
    }
}

/// Builds the vertex set of a template.
pub fn polytope_vertices(kind: PolytopeKind, dp: usize) -> Result<PolytopeTemplate> {
    if dp < 2 {
        return Err(invalid(format!("particle dimension must be at least 2, got {dp}")));
    }
    let vertices = match kind {
        PolytopeKind::Orthoplex => {
            let mut v = vec![0.0; 2 * dp * dp];
            for j in 0..dp {
                v[(2 * j) * dp + j] = 1.0;
                v[(2 * j + 1) * dp + j] = -1.0;
            }
            v
        }
        PolytopeKind::Simplex => {
            let mut v = vec![0.0; (dp + 1) * dp];
            for j in 0..dp {
                v[(j + 1) * dp + j] = 1.0;
            }
            v
        }
        PolytopeKind::Cube => {
            if dp > MAX_CUBE_DIM {
                return Err(Error::Capacity(format!(
                    "cube template limited to d_p <= {MAX_CUBE_DIM}, got {dp}"
                )));
            }
            let s = 1.0 / (dp as f64).sqrt();
            let n = 1usize << dp;
            let mut v = Vec::with_capacity(n * dp);
            for mask in 0..n {
                for j in 0..dp {
                    v.push(if mask >> j & 1 == 1 { -s } else { s });
                }
            }
            v
        }
    };
    Ok(PolytopeTemplate { kind, dim: dp, vertices })
}

/// Proper rotation in `SO(d_p)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    pub dim: usize,
    pub matrix: Vec<f64>,
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self { dim, matrix }
    }

    /// Planar rotation by `angle` radians.
    pub fn planar(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { dim: 2, matrix: vec![c, -s, s, c] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.dim + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.get(r, c)).collect()
    }

    /// `out = R v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// Largest entry of `|R^T R - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| self.get(k, i) * self.get(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        DMatrix::from_row_slice(self.dim, self.dim, &self.matrix).determinant()
    }

    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut matrix = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for c in 0..dim {
                matrix.push(m[(r, c)]);
            }
        }
        Self { dim, matrix }
    }
}

/// Haar-distributed rotation.
///
/// `d_p = 2` uses an angle drawn uniformly from `[0, 2pi)`. Larger dimensions
/// take the QR factor of a Gaussian matrix, fix column signs by `sign(diag R)`
/// and flip the first column when the determinant is negative.
pub fn sample_rotation<R: Rng + ?Sized>(dp: usize, rng: &mut R) -> Result<Rotation> {
    if dp < 2 {
        return Err(invalid(format!("rotation dimension must be at least 2, got {dp}")));
    }
    if dp == 2 {
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        return Ok(Rotation::planar(angle));
    }
    let g = DMatrix::<f64>::from_fn(dp, dp, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dp {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Ok(Rotation::from_dmatrix(&q))
}

/// Rotation whose first column is pulled toward `bias`.
///
/// A Haar rotation `Q` is drawn and its first column `u` is moved along the
/// great circle toward `bias` by the fraction `strength`, giving `w`. The
/// Householder reflection `H` taking `u` to `w` is applied and the second
/// column is negated to restore a positive determinant. `strength = 0`, an
/// absent bias or a zero bias return `Q` unchanged.
pub fn sample_biased_rotation<R: Rng + ?Sized>(
    dp: usize,
    bias: Option<&[f64]>,
    strength: f64,
    rng: &mut R,
) -> Result<Rotation> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(invalid(format!("bias strength must lie in [0, 1], got {strength}")));
    }
    let q = sample_rotation(dp, rng)?;
    let Some(bias) = bias else { return Ok(q) };
    if bias.len() != dp {
        return Err(Error::DimensionMismatch { expected: dp, got: bias.len() });
    }
    let norm = bias.iter().map(|x| x * x).sum::<f64>().sqrt();
    if strength == 0.0 || norm == 0.0 || !norm.is_finite() {
        return Ok(q);
    }
    let b: Vec<f64> = bias.iter().map(|x| x / norm).collect();
    let u = q.column(0);
    let w = slerp(&u, &b, strength);

    let diff: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
    let dn = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if dn < 1e-15 {
        return Ok(q);
    }
    let n: Vec<f64> = diff.iter().map(|x| x / dn).collect();
    let mut m = vec![0.0; dp * dp];
    for r in 0..dp {
        for c in 0..dp {
            // (I - 2 n n^T) Q
            let nq: f64 = (0..dp).map(|k| n[k] * q.get(k, c)).sum();
            m[r * dp + c] = q.get(r, c) - 2.0 * n[r] * nq;
        }
    }
    for r in 0..dp {
        m[r * dp + 1] = -m[r * dp + 1];
        m[r * dp] = w[r];
    }
    Ok(Rotation { dim: dp, matrix: m })
}

/// Spherical interpolation between unit vectors, `t = 1` lands on `b` exactly.
fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    if t == 1.0 {
        return b.to_vec();
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut perp: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - cos * x).collect();
    let sin = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sin < 1e-12 {
        if cos > 0.0 {
            return a.to_vec();
        }
        // antipodal: any great circle through a reaches b
        perp = orthogonal_to(a);
    } else {
        perp.iter_mut().for_each(|x| *x /= sin);
    }
    let angle = t * sin.atan2(cos);
    let (s, c) = angle.sin_cos();
    let mut w: Vec<f64> = a.iter().zip(&perp).map(|(x, p)| c * x + s * p).collect();
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter_mut().for_each(|x| *x /= n);
    w
}

fn orthogonal_to(a: &[f64]) -> Vec<f64> {
    let k = a
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut e = vec![0.0; a.len()];
    e[k] = 1.0;
    let dot = a[k];
    for (ei, ai) in e.iter_mut().zip(a) {
        *ei -= dot * ai;
    }
    let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    e.iter_mut().for_each(|x| *x /= n);
    e
}

/// Flat parameters viewed as `P` rows of width `d_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleMatrix {
    pub dim: usize,
    pub rows: usize,
    pub data: Vec<f64>,
    pub pad_count: usize,
    pub source_dim: usize,
}

impl ParticleMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn params_to_particles(theta: &[f64], dp: usize) -> ParticleMatrix {
    let rows = theta.len().div_ceil(dp);
    let mut data = Vec::with_capacity(rows * dp);
    data.extend_from_slice(theta);
    data.resize(rows * dp, 0.0);
    ParticleMatrix {
        dim: dp,
        rows,
        data,
        pad_count: rows * dp - theta.len(),
        source_dim: theta.len(),
    }
}

pub fn particles_to_params(x: &ParticleMatrix) -> Vec<f64> {
    x.data[..x.source_dim].to_vec()
}

/// Template directions rotated by `rot`, row-major `V x d_p`.
pub fn rotated_directions(rot: &Rotation, template: &PolytopeTemplate) -> Vec<f64> {
    let dp = template.dim;
    let mut out = vec![0.0; template.vertices.len()];
    for (v, o) in template.vertices.chunks_exact(dp).zip(out.chunks_exact_mut(dp)) {
        rot.apply(v, o);
    }
    out
}

/// `x + r_s * eps * R v_j` for every vertex, row-major `V x d_p`.
pub fn step_vertices(
    x: &[f64],
    rot: &Rotation,
    r_s: f64,
    eps: f64,
    template: &PolytopeTemplate,
) -> Vec<f64> {
    let dirs = rotated_directions(rot, template);
    offsets(x, &dirs, r_s * eps)
}

/// Probe fractions `k / (K + 1)` for `k = 1..=K`.
pub fn probe_fractions(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
}

/// Probe points `x + r_p (1 + eta) eps lambda_k R v_j`, ordered vertex-major
/// then by `k`, row-major `(V K) x d_p`.
pub fn probe_points(
    x: &[f64],
    rot: &Rotation,
    r_p: f64,
    eps: f64,
    eta: f64,
    k: usize,
    template: &PolytopeTemplate,
) -> Vec<f64> {
    let dirs = rotated_directions(rot, template);
    let dp = template.dim;
    let scale = r_p * (1.0 + eta) * eps;
    let lambdas = probe_fractions(k);
    let mut out = Vec::with_capacity(dirs.len() * k);
    for d in dirs.chunks_exact(dp) {
        for l in &lambdas {
            out.extend(x.iter().zip(d).map(|(xi, di)| xi + scale * l * di));
        }
    }
    out
}

pub(crate) fn offsets(x: &[f64], dirs: &[f64], scale: f64) -> Vec<f64> {
    let dp = x.len();
    let mut out = Vec::with_capacity(dirs.len());
    for d in dirs.chunks_exact(dp) {
        out.extend(x.iter().zip(d).map(|(xi, di)| xi + scale * di));
    }
    out
}

//! Linear maps from compressed coordinates `z` to parameter displacements.
//!
//! The optimizer searches over `z` and evaluates the loss at
//! `base + P z`, so the particle count follows `d_sub` rather than the model
//! size.
//!
//! | mode | `P` |
//! |------|-----|
//! | `Full` | identity |
//! | `Hybrid` | one dense Gaussian block per weight layer with `(d_out + d_in) r_l` columns, identity on biases |
//! | `Linear` | dense Gaussian, variance `1 / r` |
//! | `SparseLinear` | per-column density `1 / sqrt(d)`, entries `±1 / sqrt(nnz)` |
//! | `Adaptive` | first column follows recent displacements, the rest are periodically redrawn |
//!
//! ```
//! use polystep::subspace::{hybrid_dim, LayerShape};
//!
//! let mlp = [
//!     LayerShape::weight("fc1", 128, 784),
//!     LayerShape::bias("fc1.bias", 128),
//!     LayerShape::weight("fc2", 10, 128),
//!     LayerShape::bias("fc2.bias", 10),
//! ];
//! assert_eq!(hybrid_dim(&mlp, 8), 8538);
//! ```

use std::ops::Range;
use std::sync::OnceLock;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::ParticleMatrix;
use crate::objectives::{Objective, ProbeEvaluator, Smoothness};
use crate::rng::{self, Rng64};

/// Shape of one parameter tensor; biases have `d_in = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub is_bias: bool,
}

impl LayerShape {
    pub fn weight(name: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        assert!(d_out >= 1 && d_in >= 1, "weight layers need positive dimensions");
        Self { name: name.into(), d_out, d_in, is_bias: false }
    }

    pub fn bias(name: impl Into<String>, d_out: usize) -> Self {
        assert!(d_out >= 1, "bias needs at least one entry");
        Self { name: name.into(), d_out, d_in: 0, is_bias: true }
    }

    /// Convolution kernel flattened to `(c_out, c_in k^2)`.
    pub fn conv(name: impl Into<String>, c_out: usize, c_in: usize, kernel: usize) -> Self {
        Self::weight(name, c_out, c_in * kernel * kernel)
    }

    pub fn size(&self) -> usize {
        if self.is_bias {
            self.d_out
        } else {
            self.d_out * self.d_in
        }
    }

    /// Effective rank `min(rank, d_out, d_in)`.
    pub fn effective_rank(&self, rank: usize) -> usize {
        rank.min(self.d_out).min(self.d_in)
    }

    /// Subspace coordinates the hybrid map gives this layer.
    pub fn hybrid_cols(&self, rank: usize) -> usize {
        if self.is_bias {
            self.d_out
        } else {
            (self.d_out + self.d_in) * self.effective_rank(rank)
        }
    }
}

/// Hybrid subspace dimension, computed without building the projection.
pub fn hybrid_dim(layers: &[LayerShape], rank: usize) -> usize {
    layers.iter().map(|l| l.hybrid_cols(rank)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMode {
    Full,
    Hybrid,
    Linear,
    SparseLinear,
    Adaptive,
}

impl std::str::FromStr for SubspaceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "none" => Ok(Self::Full),
            "hybrid" => Ok(Self::Hybrid),
            "linear" | "dense" => Ok(Self::Linear),
            "sparse" | "sparse_linear" => Ok(Self::SparseLinear),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(invalid(format!("unknown subspace mode '{s}'"))),
        }
    }
}

/// Dense block of the hybrid map, drawn on first use from its own stream.
#[derive(Debug)]
struct HybridBlock {
    rows: Range<usize>,
    cols: Range<usize>,
    identity: bool,
    stream: u64,
    matrix: OnceLock<Vec<f64>>,
}

impl HybridBlock {
    /// Column-major `rows x cols`, variance `1 / cols`.
    fn matrix(&self, seed: u64) -> &[f64] {
        self.matrix.get_or_init(|| {
            let mut rng = rng::stream(seed, self.stream);
            let sd = 1.0 / (self.cols.len() as f64).sqrt();
            (0..self.rows.len() * self.cols.len()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
        })
    }
}

impl Clone for HybridBlock {
    fn clone(&self) -> Self {
        let matrix = OnceLock::new();
        if let Some(m) = self.matrix.get() {
            let _ = matrix.set(m.clone());
        }
        Self { rows: self.rows.clone(), cols: self.cols.clone(), identity: self.identity, stream: self.stream, matrix }
    }
}

#[derive(Clone, Debug)]
struct AdaptiveState {
    /// Column-major `d_full x r`.
    matrix: Vec<f64>,
    ema: Option<Vec<f64>>,
    decay: f64,
    refresh_every: usize,
    updates: usize,
    rng: Rng64,
}

#[derive(Clone, Debug)]
enum Inner {
    Identity,
    Hybrid(Vec<HybridBlock>),
    /// Column-major `d_full x r`.
    Dense(Vec<f64>),
    /// Per column: sorted `(row, value)` pairs.
    Sparse(Vec<Vec<(usize, f64)>>),
    Adaptive(AdaptiveState),
}

/// A fixed (or, for `Adaptive`, slowly changing) linear map `R^d_sub -> R^d_full`.
#[derive(Clone, Debug)]
pub struct SubspaceProjection {
    pub mode: SubspaceMode,
    pub d_full: usize,
    pub d_sub: usize,
    pub seed: u64,
    inner: Inner,
}

const HYBRID_STREAM_BASE: u64 = 1 << 32;

impl SubspaceProjection {
    pub fn full(d: usize) -> Self {
        Self { mode: SubspaceMode::Full, d_full: d, d_sub: d, seed: 0, inner: Inner::Identity }
    }

    /// Per-layer blocks with `n_l = (d_out + d_in) r_l` columns. When `cap`
    /// is set and the hybrid dimension exceeds it, every `r_l` is scaled
    /// down by the same factor (never below 1).
    pub fn hybrid(layers: &[LayerShape], rank: usize, seed: u64, cap: Option<usize>) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("hybrid rank must be at least 1"));
        }
        let ranks = capped_ranks(layers, rank, cap);
        let mut blocks = Vec::with_capacity(layers.len());
        let (mut row, mut col) = (0, 0);
        for (k, (layer, r)) in layers.iter().zip(&ranks).enumerate() {
            let n = if layer.is_bias { layer.d_out } else { (layer.d_out + layer.d_in) * r };
            blocks.push(HybridBlock {
                rows: row..row + layer.size(),
                cols: col..col + n,
                identity: layer.is_bias,
                stream: HYBRID_STREAM_BASE + k as u64,
                matrix: OnceLock::new(),
            });
            row += layer.size();
            col += n;
        }
        Ok(Self { mode: SubspaceMode::Hybrid, d_full: row, d_sub: col, seed, inner: Inner::Hybrid(blocks) })
    }

    /// Global dense Gaussian (variance `1 / r`) or sparse Rademacher map.
    pub fn linear(d_full: usize, r: usize, sparse: bool, seed: u64) -> Result<Self> {
        if r == 0 || r > d_full {
            return Err(invalid(format!("subspace rank must lie in [1, {d_full}], got {r}")));
        }
        let mut rng = rng::stream(seed, rng::streams::PROJECTION);
        if !sparse {
            let matrix = gaussian_columns(d_full, r, &mut rng);
            return Ok(Self { mode: SubspaceMode::Linear, d_full, d_sub: r, seed, inner: Inner::Dense(matrix) });
        }
        let density = 1.0 / (d_full as f64).sqrt();
        let binom = Binomial::new(d_full as u64, density).map_err(|e| invalid(e.to_string()))?;
        let cols = (0..r)
            .map(|_| {
                let nnz = (binom.sample(&mut rng) as usize).max(1);
                let scale = 1.0 / (nnz as f64).sqrt();
                let mut rows = index::sample(&mut rng, d_full, nnz).into_vec();
                rows.sort_unstable();
                rows.into_iter().map(|i| (i, if rng.random::<bool>() { scale } else { -scale })).collect()
            })
            .collect();
        Ok(Self { mode: SubspaceMode::SparseLinear, d_full, d_sub: r, seed, inner: Inner::Sparse(cols) })
    }

    /// Dense map whose first column tracks an EMA of displacement directions.
    /// The other columns are redrawn every `refresh_every` displacements.
    pub fn adaptive(d_full: usize, r: usize, ema_decay: f64, refresh_every: usize, seed: u64) -> Result<Self> {
        if r < 2 || r > d_full {
            return Err(invalid(format!("adaptive rank must lie in [2, {d_full}], got {r}")));
        }
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(invalid("ema decay must lie in [0, 1]"));
        }
        let mut rng = rng::stream(seed, rng::streams::ADAPTIVE);
        let matrix = gaussian_columns(d_full, r, &mut rng);
        let state = AdaptiveState { matrix, ema: None, decay: ema_decay, refresh_every: refresh_every.max(1), updates: 0, rng };
        Ok(Self { mode: SubspaceMode::Adaptive, d_full, d_sub: r, seed, inner: Inner::Adaptive(state) })
    }

    /// `P z` into a fresh vector.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_sub {
            return Err(Error::DimensionMismatch { expected: self.d_sub, got: z.len() });
        }
        let mut out = vec![0.0; self.d_full];
        self.add_columns(0, z, &mut out);
        Ok(out)
    }

    /// `out += P[:, start..start + coeffs.len()] coeffs`; columns past `d_sub`
    /// are ignored.
    pub fn add_columns(&self, start: usize, coeffs: &[f64], out: &mut [f64]) {
        let end = (start + coeffs.len()).min(self.d_sub);
        if start >= end {
            return;
        }
        let coeffs = &coeffs[..end - start];
        match &self.inner {
            Inner::Identity => {
                for (o, c) in out[start..end].iter_mut().zip(coeffs) {
                    *o += c;
                }
            }
            Inner::Hybrid(blocks) => {
                let first = blocks.partition_point(|b| b.cols.end <= start);
                for b in &blocks[first..] {
                    if b.cols.start >= end {
                        break;
                    }
                    let lo = start.max(b.cols.start);
                    let hi = end.min(b.cols.end);
                    if b.identity {
                        for j in lo..hi {
                            out[b.rows.start + (j - b.cols.start)] += coeffs[j - start];
                        }
                        continue;
                    }
                    let m = b.matrix(self.seed);
                    let nr = b.rows.len();
                    let dst = &mut out[b.rows.clone()];
                    for j in lo..hi {
                        let c = coeffs[j - start];
                        if c == 0.0 {
                            continue;
                        }
                        let col = &m[(j - b.cols.start) * nr..(j - b.cols.start + 1) * nr];
                        for (o, x) in dst.iter_mut().zip(col) {
                            *o += c * x;
                        }
                    }
                }
            }
            Inner::Dense(m) | Inner::Adaptive(AdaptiveState { matrix: m, .. }) => {
                let d = self.d_full;
                for j in start..end {
                    let c = coeffs[j - start];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, x) in out.iter_mut().zip(&m[j * d..(j + 1) * d]) {
                        *o += c * x;
                    }
                }
            }
            Inner::Sparse(cols) => {
                for j in start..end {
                    let c = coeffs[j - start];
                    for &(i, v) in &cols[j] {
                        out[i] += c * v;
                    }
                }
            }
        }
    }

    /// Column `j` as a dense vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d_full];
        self.add_columns(j, &[1.0], &mut out);
        out
    }

    /// Stored nonzeros of a sparse map, `None` for other modes.
    pub fn nnz(&self) -> Option<usize> {
        match &self.inner {
            Inner::Sparse(cols) => Some(cols.iter().map(Vec::len).sum()),
            _ => None,
        }
    }

    /// Ranges of subspace coordinates that form independent blocks: one per
    /// layer for hybrid maps, one per layer in full mode when `layers` is
    /// given, otherwise a single block.
    pub fn block_ranges(&self, layers: Option<&[LayerShape]>) -> Vec<Range<usize>> {
        match (&self.inner, layers) {
            (Inner::Hybrid(blocks), _) => blocks.iter().map(|b| b.cols.clone()).collect(),
            (Inner::Identity, Some(layers)) if layers.iter().map(LayerShape::size).sum::<usize>() == self.d_full => {
                let mut start = 0;
                layers
                    .iter()
                    .map(|l| {
                        start += l.size();
                        start - l.size()..start
                    })
                    .collect()
            }
            _ => vec![0..self.d_sub],
        }
    }

    /// Feeds a full-space displacement to an adaptive map. Returns true when
    /// the map changed in a way that invalidates existing coordinates.
    pub fn note_displacement(&mut self, delta: &[f64]) -> bool {
        let d = self.d_full;
        let Inner::Adaptive(state) = &mut self.inner else { return false };
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut changed = false;
        if norm > 0.0 && norm.is_finite() {
            let dir: Vec<f64> = delta.iter().map(|x| x / norm).collect();
            let ema = match state.ema.take() {
                None => dir,
                Some(prev) => prev.iter().zip(&dir).map(|(p, u)| state.decay * p + (1.0 - state.decay) * u).collect(),
            };
            let en = ema.iter().map(|x| x * x).sum::<f64>().sqrt();
            if en > 0.0 {
                // same expected norm as the Gaussian columns
                let scale = (d as f64 / self.d_sub as f64).sqrt() / en;
                for (m, e) in state.matrix[..d].iter_mut().zip(&ema) {
                    *m = scale * e;
                }
                changed = true;
            }
            state.ema = Some(ema);
        }
        state.updates += 1;
        if state.updates % state.refresh_every == 0 {
            let fresh = gaussian_columns(d, self.d_sub - 1, &mut state.rng);
            state.matrix[d..].copy_from_slice(&fresh);
            changed = true;
        }
        changed
    }

    /// Cosine between the first column and `u`, for adaptive diagnostics.
    pub fn first_column_alignment(&self, u: &[f64]) -> f64 {
        let c = self.column(0);
        let dot: f64 = c.iter().zip(u).map(|(a, b)| a * b).sum();
        let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (nc * nu)
    }
}

fn gaussian_columns<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Vec<f64> {
    let sd = 1.0 / (r as f64).sqrt();
    (0..d * r).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn capped_ranks(layers: &[LayerShape], rank: usize, cap: Option<usize>) -> Vec<usize> {
    let base: Vec<usize> = layers.iter().map(|l| if l.is_bias { 0 } else { l.effective_rank(rank) }).collect();
    let Some(cap) = cap else { return base };
    let total = hybrid_dim(layers, rank);
    if total <= cap {
        return base;
    }
    let bias: usize = layers.iter().filter(|l| l.is_bias).map(|l| l.d_out).sum();
    let weight = (total - bias) as f64;
    let factor = (cap.saturating_sub(bias) as f64 / weight).max(0.0);
    base.iter().zip(layers).map(|(&r, l)| if l.is_bias { 0 } else { ((r as f64 * factor).floor() as usize).max(1) }).collect()
}

/// Splits particle rows into contiguous blocks of the given sizes.
pub fn blockwise_partition(x: &ParticleMatrix, block_rows: &[usize]) -> Result<Vec<ParticleMatrix>> {
    let total: usize = block_rows.iter().sum();
    if total != x.rows {
        return Err(invalid(format!("blocks cover {total} particle rows, matrix has {}", x.rows)));
    }
    let mut parts = Vec::with_capacity(block_rows.len());
    let mut start = 0;
    for (k, &rows) in block_rows.iter().enumerate() {
        let last = k + 1 == block_rows.len();
        let pad = if last { x.pad_count } else { 0 };
        parts.push(ParticleMatrix {
            dim: x.dim,
            rows,
            data: x.data[start * x.dim..(start + rows) * x.dim].to_vec(),
            pad_count: pad,
            source_dim: rows * x.dim - pad,
        });
        start += rows;
    }
    Ok(parts)
}

/// Inverse of [`blockwise_partition`].
pub fn reassemble(parts: &[ParticleMatrix]) -> ParticleMatrix {
    let dim = parts.first().map_or(1, |p| p.dim);
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    let rows = parts.iter().map(|p| p.rows).sum();
    let pad = parts.last().map_or(0, |p| p.pad_count);
    ParticleMatrix { dim, rows, source_dim: rows * dim - pad, data, pad_count: pad }
}

/// The loss `z -> loss(base + P z)`.
pub struct SubspaceObjective<'a> {
    pub inner: &'a dyn Objective,
    pub projection: &'a SubspaceProjection,
    pub base: &'a [f64],
}

pub fn project_loss<'a>(projection: &'a SubspaceProjection, base: &'a [f64], loss: &'a dyn Objective) -> Result<SubspaceObjective<'a>> {
    if base.len() != projection.d_full || loss.dim() != projection.d_full {
        return Err(Error::DimensionMismatch { expected: projection.d_full, got: base.len().max(loss.dim()) });
    }
    Ok(SubspaceObjective { inner: loss, projection, base })
}

impl SubspaceObjective<'_> {
    pub fn full_params(&self, z: &[f64]) -> Vec<f64> {
        let mut theta = self.base.to_vec();
        self.projection.add_columns(0, z, &mut theta);
        theta
    }
}

impl Objective for SubspaceObjective<'_> {
    fn dim(&self) -> usize {
        self.projection.d_sub
    }

    fn eval(&self, z: &[f64]) -> f64 {
        self.inner.eval(&self.full_params(z))
    }

    fn name(&self) -> String {
        format!("{}@{:?}", self.inner.name(), self.projection.mode).to_lowercase()
    }

    fn smoothness(&self) -> Smoothness {
        self.inner.smoothness()
    }

    fn probe_evaluator<'b>(&'b self, center: &'b [f64]) -> Box<dyn ProbeEvaluator + 'b> {
        Box::new(SubspaceEvaluator { objective: self, z: center, theta: self.full_params(center) })
    }
}

struct SubspaceEvaluator<'a, 'b> {
    objective: &'b SubspaceObjective<'a>,
    z: &'b [f64],
    theta: Vec<f64>,
}

impl ProbeEvaluator for SubspaceEvaluator<'_, '_> {
    fn eval_variants(&self, offset: usize, width: usize, points: &[f64], out: &mut [f64]) {
        let end = (offset + width).min(self.z.len());
        let live = end.saturating_sub(offset);
        let mut delta = vec![0.0; live];
        let mut theta = self.theta.clone();
        for (o, p) in out.iter_mut().zip(points.chunks_exact(width)) {
            theta.copy_from_slice(&self.theta);
            for (d, (pj, zj)) in delta.iter_mut().zip(p.iter().zip(&self.z[offset..end])) {
                *d = pj - zj;
            }
            self.objective.projection.add_columns(offset, &delta, &mut theta);
            *o = self.objective.inner.eval(&theta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::params_to_particles;
    use crate::objectives::{quadratic, FnObjective};
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn mlp_layers(sizes: &[usize]) -> Vec<LayerShape> {
        let mut out = Vec::new();
        for l in 0..sizes.len() - 1 {
            out.push(LayerShape::weight(format!("fc{l}"), sizes[l + 1], sizes[l]));
            out.push(LayerShape::bias(format!("fc{l}.bias"), sizes[l + 1]));
        }
        out
    }

    fn lstm_layers(input: usize, hidden: usize, depth: usize) -> Vec<LayerShape> {
        let mut out = Vec::new();
        for l in 0..depth {
            let din = if l == 0 { input } else { hidden };
            out.push(LayerShape::weight(format!("w_ih{l}"), 4 * hidden, din));
            out.push(LayerShape::weight(format!("w_hh{l}"), 4 * hidden, hidden));
            out.push(LayerShape::bias(format!("b_ih{l}"), 4 * hidden));
            out.push(LayerShape::bias(format!("b_hh{l}"), 4 * hidden));
        }
        out
    }

    fn mha_layers(d: usize) -> Vec<LayerShape> {
        ["q", "k", "v", "o"]
            .iter()
            .flat_map(|n| [LayerShape::weight(*n, d, d), LayerShape::bias(format!("{n}.bias"), d)])
            .collect()
    }

    fn params(layers: &[LayerShape]) -> usize {
        layers.iter().map(LayerShape::size).sum()
    }

    #[test]
    fn hybrid_dimensions_match_reference_architectures() {
        let mlp = mlp_layers(&[784, 128, 10]);
        assert_eq!(params(&mlp), 101_770);
        assert_eq!(hybrid_dim(&mlp, 8), 8538);

        let lstm = lstm_layers(64, 128, 2);
        assert_eq!(params(&lstm), 231_424);
        assert_eq!(hybrid_dim(&lstm, 8), 22_016);

        let mha = mha_layers(128);
        assert_eq!(params(&mha), 66_048);
        assert_eq!(hybrid_dim(&mha, 8), 8704);

        let proj = SubspaceProjection::hybrid(&mlp, 8, 1, None).unwrap();
        assert_eq!((proj.d_full, proj.d_sub), (101_770, 8538));
    }

    #[test]
    fn rank_is_clamped_per_layer() {
        let l = LayerShape::weight("w", 4, 3);
        assert_eq!(l.effective_rank(8), 3);
        assert_eq!(hybrid_dim(&[l], 8), 21);
    }

    #[test]
    fn cap_scales_ranks() {
        let mlp = mlp_layers(&[784, 128, 10]);
        let p = SubspaceProjection::hybrid(&mlp, 8, 1, Some(4000)).unwrap();
        assert!(p.d_sub <= 4000, "{}", p.d_sub);
        assert!(p.d_sub >= 138 + 912 + 138);
        let same = SubspaceProjection::hybrid(&mlp, 8, 1, Some(1_000_000)).unwrap();
        assert_eq!(same.d_sub, 8538);
    }

    #[test]
    fn hybrid_columns_stay_in_their_layer() {
        let layers = mlp_layers(&[5, 4, 3]);
        let p = SubspaceProjection::hybrid(&layers, 2, 9, None).unwrap();
        let first = p.column(0);
        assert!(first[..20].iter().any(|&x| x != 0.0));
        assert!(first[20..].iter().all(|&x| x == 0.0));
        // bias block is identity
        let bias_col = p.block_ranges(None)[1].start;
        let c = p.column(bias_col);
        assert_eq!(c[20], 1.0);
        assert_eq!(c.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn hybrid_entries_have_expected_variance() {
        let layers = vec![LayerShape::weight("w", 200, 100)];
        let p = SubspaceProjection::hybrid(&layers, 4, 3, None).unwrap();
        let n = 1200.0;
        let mut ss = 0.0;
        for j in 0..1200 {
            ss += p.column(j).iter().map(|x| x * x).sum::<f64>();
        }
        let var = ss / (20_000.0 * n);
        assert!((var * n - 1.0).abs() < 0.02, "{}", var * n);
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn reconstruction_is_linear_and_zero_preserving() {
        let layers = mlp_layers(&[6, 5, 3]);
        let projections = [
            SubspaceProjection::full(53),
            SubspaceProjection::hybrid(&layers, 2, 4, None).unwrap(),
            SubspaceProjection::linear(53, 7, false, 4).unwrap(),
            SubspaceProjection::linear(53, 7, true, 4).unwrap(),
            SubspaceProjection::adaptive(53, 7, 0.9, 10, 4).unwrap(),
        ];
        for p in &projections {
            let z1 = random_vec(p.d_sub, 1);
            let z2 = random_vec(p.d_sub, 2);
            let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
            let lhs = p.reconstruct(&sum).unwrap();
            let r1 = p.reconstruct(&z1).unwrap();
            let r2 = p.reconstruct(&z2).unwrap();
            for k in 0..p.d_full {
                assert!((lhs[k] - r1[k] - r2[k]).abs() < 1e-12);
            }
            assert!(p.reconstruct(&vec![0.0; p.d_sub]).unwrap().iter().all(|&x| x == 0.0));
            assert!(p.reconstruct(&vec![0.0; p.d_sub + 1]).is_err());
        }
        let z = random_vec(53, 5);
        assert_eq!(projections[0].reconstruct(&z).unwrap(), z);
    }

    #[test]
    fn projections_are_deterministic() {
        let layers = mlp_layers(&[6, 5, 3]);
        let a = SubspaceProjection::hybrid(&layers, 2, 11, None).unwrap();
        let b = SubspaceProjection::hybrid(&layers, 2, 11, None).unwrap();
        let c = SubspaceProjection::linear(80, 9, true, 11).unwrap();
        let d = SubspaceProjection::linear(80, 9, true, 11).unwrap();
        for j in 0..9 {
            assert_eq!(a.column(j), b.column(j));
            assert_eq!(c.column(j), d.column(j));
        }
    }

    #[test]
    fn sparse_density_and_column_norms() {
        let d = 1_000_000;
        for seed in 0..3 {
            let p = SubspaceProjection::linear(d, 256, true, seed).unwrap();
            let nnz = p.nnz().unwrap() as f64;
            assert!((nnz / 256_000.0 - 1.0).abs() < 0.05, "{nnz}");
            let Inner::Sparse(cols) = &p.inner else { unreachable!() };
            for col in cols {
                let norm: f64 = col.iter().map(|(_, v)| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_subspace_coordinates_round_trip() {
        // least-squares recovery of z from P z is exact on the column space
        let p = SubspaceProjection::linear(100, 100, false, 3).unwrap();
        let z = random_vec(100, 8);
        let x = p.reconstruct(&z).unwrap();
        let m = nalgebra::DMatrix::from_fn(100, 100, |i, j| p.column(j)[i]);
        let back = m.lu().solve(&nalgebra::DVector::from_vec(x)).unwrap();
        for k in 0..100 {
            assert!((back[k] - z[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn adaptive_first_column_follows_displacement() {
        let d = 40;
        let mut p = SubspaceProjection::adaptive(d, 4, 0.8, 10, 2).unwrap();
        let before = SubspaceProjection::adaptive(d, 4, 0.8, 10, 2).unwrap();
        let lin = SubspaceProjection::adaptive(d, 4, 0.8, 10, 2).unwrap();
        assert_eq!(before.column(1), lin.column(1));

        let u = random_vec(d, 3);
        let mut last = 0.0;
        // start from a different direction so alignment has room to grow
        p.note_displacement(&random_vec(d, 4));
        for _ in 0..30 {
            p.note_displacement(&u);
            let a = p.first_column_alignment(&u).abs();
            assert!(a >= last - 1e-12);
            last = a;
        }
        assert!(last > 0.999);

        let mut frozen = SubspaceProjection::adaptive(d, 4, 1.0, 10, 2).unwrap();
        let first = random_vec(d, 6);
        frozen.note_displacement(&first);
        for s in 0..5 {
            frozen.note_displacement(&random_vec(d, 20 + s));
        }
        assert!((frozen.first_column_alignment(&first) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_refreshes_other_columns() {
        let mut p = SubspaceProjection::adaptive(20, 3, 0.5, 3, 1).unwrap();
        let c1 = p.column(1);
        let u = random_vec(20, 1);
        p.note_displacement(&u);
        p.note_displacement(&u);
        assert_eq!(p.column(1), c1);
        assert!(p.note_displacement(&u));
        assert_ne!(p.column(1), c1);
    }

    #[test]
    fn partition_round_trip() {
        let theta = random_vec(37, 3);
        let x = params_to_particles(&theta, 4);
        let parts = blockwise_partition(&x, &[3, 3, 4]).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].rows, 3);
        assert_eq!(reassemble(&parts), x);
        assert_eq!(blockwise_partition(&x, &[10]).unwrap()[0], x);
        assert!(blockwise_partition(&x, &[3, 3]).is_err());
    }

    #[test]
    fn block_ranges_follow_layers() {
        let layers = mlp_layers(&[2, 2, 2]);
        let full = SubspaceProjection::full(12);
        assert_eq!(full.block_ranges(Some(&layers)), vec![0..4, 4..6, 6..10, 10..12]);
        assert_eq!(full.block_ranges(None), vec![0..12]);
    }

    #[test]
    fn projected_loss_and_probe_evaluator_agree() {
        let layers = mlp_layers(&[3, 4, 2]);
        let d = params(&layers);
        let target = random_vec(d, 1);
        let q = quadratic(d, Some(&target));
        let base = random_vec(d, 2);
        for p in [
            SubspaceProjection::hybrid(&layers, 2, 5, None).unwrap(),
            SubspaceProjection::full(d),
            SubspaceProjection::linear(d, 6, true, 5).unwrap(),
        ] {
            let obj = project_loss(&p, &base, &q).unwrap();
            let z = random_vec(p.d_sub, 3);
            let ev = obj.probe_evaluator(&z);
            let points = random_vec(8, 4);
            let mut out = [0.0; 2];
            ev.eval_variants(2, 4, &points, &mut out);
            for (k, o) in out.iter().enumerate() {
                let mut zz = z.clone();
                zz[2..6].copy_from_slice(&points[4 * k..4 * k + 4]);
                assert!((obj.eval(&zz) - o).abs() < 1e-10);
            }
            assert_eq!(obj.eval(&vec![0.0; p.d_sub]), q.eval(&base));
        }
        let f = FnObjective::new(d, |_: &[f64]| 0.0);
        assert!(project_loss(&SubspaceProjection::full(d), &base[..3], &f).is_err());
    }
}

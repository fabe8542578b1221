//! Objectives the optimizer can minimize.
//!
//! Anything that maps a flat parameter vector to a finite scalar implements
//! [`Objective`]. The optimizer evaluates probes through a
//! [`ProbeEvaluator`], which sees the current parameters once and is then
//! asked for many variants that differ in one contiguous slice. Objectives
//! with cheap incremental updates (MAX-SAT, subspace reconstruction) override
//! [`Objective::probe_evaluator`].

mod data;
mod mlp;
mod synthetic;

pub use data::{crop_pool, load_idx, load_idx_images, load_idx_labels, make_blobs, parse_idx_images, parse_idx_labels, Dataset, IdxImages, Split};
pub use mlp::{Activation, MlpLoss, TinyMlp};
pub use synthetic::{quadratic, sphere_indicator, staircase1d, Quadratic, SphereIndicator, Staircase};

use serde::{Deserialize, Serialize};

use crate::subspace::LayerShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    Smooth,
    PiecewiseSmooth,
    PiecewiseConstant,
}

/// A deterministic scalar loss over `R^dim`.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, theta: &[f64]) -> f64;

    fn name(&self) -> String {
        "objective".into()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::Smooth
    }

    /// Weight and bias shapes in parameter order, when the objective is a
    /// layered model.
    fn layers(&self) -> Option<Vec<LayerShape>> {
        None
    }

    /// Evaluator for variants of `center`.
    fn probe_evaluator<'a>(&'a self, center: &'a [f64]) -> Box<dyn ProbeEvaluator + 'a> {
        Box::new(CopyEvaluator { objective: self, center })
    }
}

/// Evaluates parameter vectors that differ from a fixed center in one slice.
pub trait ProbeEvaluator: Sync {
    /// `points` holds `out.len()` rows of width `width`. Row `n` replaces
    /// `center[offset..offset + width]`; entries past the end of the
    /// parameter vector are padding and ignored.
    fn eval_variants(&self, offset: usize, width: usize, points: &[f64], out: &mut [f64]);
}

struct CopyEvaluator<'a, O: ?Sized> {
    objective: &'a O,
    center: &'a [f64],
}

impl<O: Objective + ?Sized> ProbeEvaluator for CopyEvaluator<'_, O> {
    fn eval_variants(&self, offset: usize, width: usize, points: &[f64], out: &mut [f64]) {
        let mut theta = self.center.to_vec();
        let end = (offset + width).min(theta.len());
        let live = end.saturating_sub(offset);
        for (o, p) in out.iter_mut().zip(points.chunks_exact(width)) {
            theta[offset..end].copy_from_slice(&p[..live]);
            *o = self.objective.eval(&theta);
        }
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (**self).eval(theta)
    }
    fn name(&self) -> String {
        (**self).name()
    }
    fn smoothness(&self) -> Smoothness {
        (**self).smoothness()
    }
    fn layers(&self) -> Option<Vec<LayerShape>> {
        (**self).layers()
    }
    fn probe_evaluator<'a>(&'a self, center: &'a [f64]) -> Box<dyn ProbeEvaluator + 'a> {
        (**self).probe_evaluator(center)
    }
}

/// Wraps a closure as an objective.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
    name: String,
    smoothness: Smoothness,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, name: "fn".into(), smoothness: Smoothness::Smooth }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_smoothness(mut self, smoothness: Smoothness) -> Self {
        self.smoothness = smoothness;
        self
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (self.f)(theta)
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn smoothness(&self) -> Smoothness {
        self.smoothness
    }
}

/// `factor * inner`. Keeps the inner probe evaluator.
pub struct Scaled<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: Objective> Objective for Scaled<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        self.factor * self.inner.eval(theta)
    }
    fn name(&self) -> String {
        self.inner.name()
    }
    fn smoothness(&self) -> Smoothness {
        self.inner.smoothness()
    }
    fn layers(&self) -> Option<Vec<LayerShape>> {
        self.inner.layers()
    }
    fn probe_evaluator<'a>(&'a self, center: &'a [f64]) -> Box<dyn ProbeEvaluator + 'a> {
        Box::new(ScaledEvaluator { inner: self.inner.probe_evaluator(center), factor: self.factor })
    }
}

struct ScaledEvaluator<'a> {
    inner: Box<dyn ProbeEvaluator + 'a>,
    factor: f64,
}

impl ProbeEvaluator for ScaledEvaluator<'_> {
    fn eval_variants(&self, offset: usize, width: usize, points: &[f64], out: &mut [f64]) {
        self.inner.eval_variants(offset, width, points, out);
        out.iter_mut().for_each(|o| *o *= self.factor);
    }
}

/// Fraction of coordinates whose central finite difference is exactly zero.
pub fn zero_fd_fraction(objective: &dyn Objective, theta: &[f64], coords: &[usize], h: f64) -> f64 {
    let mut x = theta.to_vec();
    let mut zeros = 0;
    for &j in coords {
        let orig = x[j];
        x[j] = orig + h;
        let up = objective.eval(&x);
        x[j] = orig - h;
        let down = objective.eval(&x);
        x[j] = orig;
        if up == down {
            zeros += 1;
        }
    }
    zeros as f64 / coords.len().max(1) as f64
}

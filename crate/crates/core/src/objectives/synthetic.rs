use super::{Objective, Smoothness};

/// `0.5 * ||theta - minimum||^2`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub minimum: Vec<f64>,
}

pub fn quadratic(dim: usize, minimum: Option<&[f64]>) -> Quadratic {
    Quadratic { minimum: minimum.map_or_else(|| vec![0.0; dim], <[f64]>::to_vec) }
}

impl Quadratic {
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.minimum).map(|(t, m)| t - m).collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.minimum.len()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        0.5 * theta.iter().zip(&self.minimum).map(|(t, m)| (t - m) * (t - m)).sum::<f64>()
    }
    fn name(&self) -> String {
        "quadratic".into()
    }
}

/// `1 - [||theta - center|| <= radius]`.
#[derive(Clone, Debug)]
pub struct SphereIndicator {
    pub center: Vec<f64>,
    pub radius: f64,
}

pub fn sphere_indicator(center: &[f64], radius: f64) -> SphereIndicator {
    assert!(radius > 0.0, "radius must be positive");
    SphereIndicator { center: center.to_vec(), radius }
}

impl Objective for SphereIndicator {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        let d2: f64 = theta.iter().zip(&self.center).map(|(t, c)| (t - c) * (t - c)).sum();
        if d2 <= self.radius * self.radius {
            0.0
        } else {
            1.0
        }
    }
    fn name(&self) -> String {
        "sphere_indicator".into()
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness::PiecewiseConstant
    }
}

/// `floor(|theta| / width)` on the first coordinate.
#[derive(Clone, Debug)]
pub struct Staircase {
    pub width: f64,
}

pub fn staircase1d(width: f64) -> Staircase {
    assert!(width > 0.0, "step width must be positive");
    Staircase { width }
}

impl Objective for Staircase {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (theta[0].abs() / self.width).floor()
    }
    fn name(&self) -> String {
        "staircase".into()
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness::PiecewiseConstant
    }
}

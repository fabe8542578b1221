//! Step-indexed schedules for temperature, radii and momentum.
//!
//! ```
//! use polystep::schedule::Schedule;
//!
//! let s = Schedule::cosine(3.0, 0.1, 100);
//! assert_eq!(s.eval(0), 3.0);
//! assert!((s.eval(100) - 0.1).abs() < 1e-12);
//! assert_eq!(Schedule::inverse_sqrt(2.0).eval(3), 1.0);
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Flat,
    /// Half-period cosine from `start` to `target` over `horizon` steps.
    Cosine,
    /// `start / sqrt(t + 1)`.
    InverseSqrt,
    /// Straight line from `start` to `target` over `horizon` steps.
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "flat" | "constant" => Ok(Self::Flat),
            "cosine" | "cos" => Ok(Self::Cosine),
            "inverse_sqrt" | "invsqrt" | "inv_sqrt" => Ok(Self::InverseSqrt),
            "linear" => Ok(Self::Linear),
            _ => Err(invalid(format!("unknown schedule '{s}'"))),
        }
    }
}

/// A schedule evaluated per optimizer step. Values past `horizon` are
/// clamped at `target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub target: f64,
    pub horizon: usize,
}

impl Schedule {
    pub fn flat(value: f64) -> Self {
        Self { kind: ScheduleKind::Flat, start: value, target: value, horizon: 1 }
    }

    pub fn cosine(start: f64, target: f64, horizon: usize) -> Self {
        Self { kind: ScheduleKind::Cosine, start, target, horizon }
    }

    pub fn inverse_sqrt(start: f64) -> Self {
        Self { kind: ScheduleKind::InverseSqrt, start, target: 0.0, horizon: 1 }
    }

    pub fn linear(start: f64, target: f64, horizon: usize) -> Self {
        Self { kind: ScheduleKind::Linear, start, target, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.start.is_finite() || !self.target.is_finite() {
            return Err(invalid("schedule endpoints must be finite"));
        }
        if matches!(self.kind, ScheduleKind::Cosine | ScheduleKind::Linear) && self.horizon == 0 {
            return Err(invalid("cosine and linear schedules need a horizon of at least 1"));
        }
        Ok(())
    }

    /// Like [`Schedule::validate`], additionally requiring `start > 0`.
    pub fn validate_positive(&self) -> Result<()> {
        self.validate()?;
        if self.start <= 0.0 {
            return Err(invalid(format!("schedule must start positive, got {}", self.start)));
        }
        Ok(())
    }

    pub fn eval(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Flat => self.start,
            ScheduleKind::InverseSqrt => self.start / ((t + 1) as f64).sqrt(),
            ScheduleKind::Cosine => {
                let frac = t.min(self.horizon) as f64 / self.horizon as f64;
                self.target + (self.start - self.target) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
            }
            ScheduleKind::Linear => {
                let frac = t.min(self.horizon) as f64 / self.horizon as f64;
                self.start + (self.target - self.start) * frac
            }
        }
    }
}

/// Uniform draw from `[-eta_max, eta_max]`; exactly zero when `eta_max = 0`.
pub fn sample_jitter<R: Rng + ?Sized>(eta_max: f64, rng: &mut R) -> f64 {
    if eta_max == 0.0 {
        return 0.0;
    }
    eta_max * (2.0 * rng.random::<f64>() - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn examples() {
        assert_eq!(Schedule::inverse_sqrt(2.0).eval(3), 1.0);
        let c = Schedule::cosine(3.0, 0.1, 100);
        assert_eq!(c.eval(0), 3.0);
        assert!((c.eval(100) - 0.1).abs() < 1e-15);
        assert!((c.eval(50) - 1.55).abs() < 1e-12);
        assert!((c.eval(500) - 0.1).abs() < 1e-15);
        assert_eq!(Schedule::flat(0.4).eval(1_000_000), 0.4);
        let l = Schedule::linear(1.0, 0.0, 4);
        assert_eq!((l.eval(1), l.eval(4), l.eval(9)), (0.75, 0.0, 0.0));
    }

    #[test]
    fn monotone_when_decaying() {
        for s in [Schedule::cosine(5.0, 0.2, 37), Schedule::inverse_sqrt(3.0), Schedule::linear(2.0, 1.0, 10)] {
            for t in 0..200 {
                assert!(s.eval(t + 1) <= s.eval(t));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(Schedule::cosine(1.0, 0.1, 0).validate().is_err());
        assert!(Schedule::flat(0.0).validate_positive().is_err());
        assert!(Schedule::flat(0.5).validate_positive().is_ok());
    }

    #[test]
    fn jitter_range_and_mean() {
        let mut rng = seeded(0);
        assert_eq!(sample_jitter(0.0, &mut rng), 0.0);
        let n = 100_000;
        let eta = 0.05;
        let mut sum = 0.0;
        for _ in 0..n {
            let j = sample_jitter(eta, &mut rng);
            assert!((-eta..=eta).contains(&j));
            sum += j;
        }
        // uniform variance eta^2 / 3
        let sigma = eta / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * sigma);
    }
}

use serde::{Deserialize, Serialize};

use crate::assignment::{SolverKind, SolverOptions};
use crate::error::{invalid, Result};
use crate::geometry::PolytopeKind;
use crate::schedule::Schedule;
use crate::subspace::SubspaceMode;

/// Everything that controls a PolyStep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Particle width, one of 2, 4, 8.
    pub dp: usize,
    pub polytope: PolytopeKind,
    /// Probes per vertex.
    pub probes: usize,
    pub solver: SolverKind,
    /// Iteration controls for Sinkhorn and KL-softmax. `epsilon` is
    /// overwritten by the schedule on every step.
    pub solver_options: SolverOptions,
    /// Vertices kept by the top-k rule.
    pub top_k: usize,
    pub epsilon: Schedule,
    pub step_radius: Schedule,
    pub probe_radius: Schedule,
    pub momentum: Schedule,
    /// Half-width of the uniform probe-radius jitter, in `[0, 1)`.
    pub eta_max: f64,
    pub subspace: SubspaceMode,
    pub rank: usize,
    pub max_subspace_dim: Option<usize>,
    pub adaptive_ema: f64,
    pub adaptive_refresh: usize,
    /// Steps per fresh solve; 1 solves every step.
    pub amortize_steps: usize,
    pub amortize_ema: f64,
    pub loss_gate_factor: f64,
    pub biased_rotation: bool,
    pub bias_strength: f64,
    /// One independent solve per layer block.
    pub blockwise: bool,
    /// Evaluate particles on the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            dp: 2,
            polytope: PolytopeKind::Orthoplex,
            probes: 1,
            solver: SolverKind::Softmax,
            solver_options: SolverOptions::default(),
            top_k: 3,
            epsilon: Schedule::flat(0.5),
            step_radius: Schedule::flat(1.0),
            probe_radius: Schedule::flat(1.0),
            momentum: Schedule::flat(0.0),
            eta_max: 0.0,
            subspace: SubspaceMode::Full,
            rank: 4,
            max_subspace_dim: None,
            adaptive_ema: 0.9,
            adaptive_refresh: 10,
            amortize_steps: 1,
            amortize_ema: 0.7,
            loss_gate_factor: 1.5,
            biased_rotation: false,
            bias_strength: 0.5,
            blockwise: false,
            parallel: false,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.dp) {
            return Err(invalid(format!("dp must be 2, 4 or 8, got {}", self.dp)));
        }
        if self.probes == 0 {
            return Err(invalid("at least one probe per vertex is required"));
        }
        self.epsilon.validate_positive()?;
        self.step_radius.validate_positive()?;
        self.probe_radius.validate_positive()?;
        self.momentum.validate()?;
        for t in [0, self.momentum.horizon] {
            let m = self.momentum.eval(t);
            if !(0.0..1.0).contains(&m) {
                return Err(invalid(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        if !(0.0..1.0).contains(&self.eta_max) {
            return Err(invalid(format!("eta_max must lie in [0, 1), got {}", self.eta_max)));
        }
        if self.amortize_steps == 0 {
            return Err(invalid("amortize_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.amortize_ema) {
            return Err(invalid(format!("amortize_ema must lie in [0, 1], got {}", self.amortize_ema)));
        }
        if !(self.loss_gate_factor >= 1.0) {
            return Err(invalid(format!("loss_gate_factor must be at least 1, got {}", self.loss_gate_factor)));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(invalid(format!("bias_strength must lie in [0, 1], got {}", self.bias_strength)));
        }
        if self.solver == SolverKind::TopKMean && self.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if self.subspace != SubspaceMode::Full && self.rank == 0 {
            return Err(invalid("subspace rank must be at least 1"));
        }
        SolverOptions { epsilon: 1.0, ..self.solver_options.clone() }.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        OptimizerConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let bad = [
            OptimizerConfig { dp: 3, ..Default::default() },
            OptimizerConfig { probes: 0, ..Default::default() },
            OptimizerConfig { amortize_steps: 0, ..Default::default() },
            OptimizerConfig { amortize_ema: 1.5, ..Default::default() },
            OptimizerConfig { eta_max: 1.0, ..Default::default() },
            OptimizerConfig { momentum: Schedule::flat(1.0), ..Default::default() },
            OptimizerConfig { epsilon: Schedule::flat(0.0), ..Default::default() },
            OptimizerConfig { loss_gate_factor: 0.5, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_round_trip_with_partial_input() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"dp": 4, "solver": "sinkhorn"}"#).unwrap();
        assert_eq!(c.dp, 4);
        assert_eq!(c.solver, SolverKind::Sinkhorn);
        let back: OptimizerConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

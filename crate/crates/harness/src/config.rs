//! Experiment configuration files.
//!
//! A config is a flat list of `dotted.key = value` lines (TOML syntax):
//!
//! ```text
//! task.kind = "blobs"
//! task.activation = "sign"
//! method = "polystep"
//! optimizer.epsilon.kind = "cosine"
//! optimizer.epsilon.start = 1.0
//! optimizer.epsilon.target = 0.05
//! optimizer.epsilon.horizon = 200
//! budget.max_steps = 200
//! seeds = [42, 123]
//! ```
//!
//! Every key maps onto a field of [`ExperimentConfig`]; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use polystep::baselines::{BaselineConfig, BaselineKind};
use polystep::objectives::Activation;
use polystep::optimizer::{Budget, OptimizerConfig};
use polystep::rlenv::Precision;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 1337];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

/// Optimization method under test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Polystep,
    Spsa,
    IsotropicEs,
    RandomSearch,
}

impl Method {
    pub fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Method::Polystep => None,
            Method::Spsa => Some(BaselineKind::Spsa),
            Method::IsotropicEs => Some(BaselineKind::IsotropicEs),
            Method::RandomSearch => Some(BaselineKind::RandomSearch),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Polystep => "polystep",
            Method::Spsa => "spsa",
            Method::IsotropicEs => "isotropic_es",
            Method::RandomSearch => "random_search",
        }
    }
}

/// Benchmark objective. Data, instances and initial parameters are drawn
/// from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// 3-class Gaussian blobs with a `2-hidden-3` MLP; metric is train
    /// accuracy.
    Blobs {
        #[serde(default = "relu")]
        activation: Activation,
        #[serde(default = "sixteen")]
        hidden: usize,
        #[serde(default = "fifty")]
        per_class: usize,
        #[serde(default = "half")]
        spread: f64,
    },
    Quadratic {
        dim: usize,
    },
    /// Indicator of missing a ball whose center sits `distance` from the
    /// origin start.
    SphereIndicator {
        dim: usize,
        distance: f64,
        radius: f64,
    },
    /// Random 3-SAT at `ratio` clauses per variable, or a DIMACS file;
    /// metric is the satisfied fraction.
    MaxSat {
        #[serde(default)]
        n_vars: usize,
        #[serde(default = "phase_transition")]
        ratio: f64,
        #[serde(default)]
        dimacs: Option<PathBuf>,
    },
    /// CartPole policy search; metric is the held-out mean return.
    CartPole {
        precision: Precision,
        #[serde(default = "four")]
        rollouts: usize,
        #[serde(default = "twenty")]
        eval_episodes: usize,
    },
}

fn relu() -> Activation {
    Activation::Relu
}
fn sixteen() -> usize {
    16
}
fn fifty() -> usize {
    50
}
fn half() -> f64 {
    0.5
}
fn phase_transition() -> f64 {
    4.27
}
fn four() -> usize {
    4
}
fn twenty() -> usize {
    20
}

impl TaskConfig {
    pub fn name(&self) -> String {
        match self {
            TaskConfig::Blobs { activation, .. } => format!("blobs_{}", serde_json::to_value(activation).unwrap().as_str().unwrap()),
            TaskConfig::Quadratic { dim } => format!("quadratic_{dim}"),
            TaskConfig::SphereIndicator { dim, .. } => format!("sphere_indicator_{dim}"),
            TaskConfig::MaxSat { n_vars, dimacs: None, .. } => format!("maxsat_{n_vars}"),
            TaskConfig::MaxSat { dimacs: Some(path), .. } => format!("maxsat_{}", path.display()),
            TaskConfig::CartPole { precision, .. } => format!("cartpole_{}", serde_json::to_value(precision).unwrap().as_str().unwrap()),
        }
    }
}

/// A sweep over one dotted key, used by the ablation driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub budget: Budget,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Run seeds on separate workers.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ExperimentConfig {
    pub fn new(task: TaskConfig, method: Method, budget: Budget) -> Self {
        Self {
            task,
            method,
            optimizer: OptimizerConfig::default(),
            baseline: BaselineConfig::default(),
            seeds: default_seeds(),
            budget,
            output: None,
            parallel: false,
            sweep: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        if self.budget.max_steps.is_none() && self.budget.max_evals.is_none() {
            return Err(HarnessError::Config("budget.max_steps or budget.max_evals is required".into()));
        }
        match self.method {
            Method::Polystep => self.optimizer.validate()?,
            _ => self.baseline.validate()?,
        }
        Ok(())
    }

    /// Copy with the seed list replaced by `seed` and the method config
    /// seeded with it.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.optimizer.seed = seed;
        c.baseline.seed = seed;
        if let Some(kind) = self.method.baseline_kind() {
            c.baseline.kind = kind;
        }
        c.sweep = None;
        c
    }
}

/// Parses config text into a JSON tree, before typing.
pub fn parse_tree(text: &str) -> Result<Value> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
    serde_json::to_value(table).map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn from_tree(tree: Value) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_value(tree).map_err(|e| HarnessError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    from_tree(parse_tree(text)?)
}

pub fn load_tree(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    parse_tree(&text)
}

/// Sets `dotted.key` in a JSON tree, creating intermediate tables.
pub fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("malformed key '{key}'")));
    }
    for part in &parts[..parts.len() - 1] {
        if node.get(*part).is_none_or(Value::is_null) {
            node.as_object_mut()
                .ok_or_else(|| HarnessError::Config(format!("'{key}' crosses a non-table value")))?
                .insert(part.to_string(), Value::Object(Default::default()));
        }
        node = node.get_mut(*part).unwrap();
    }
    node.as_object_mut()
        .ok_or_else(|| HarnessError::Config(format!("'{key}' crosses a non-table value")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the value side of a `key=value` override: TOML scalars and arrays
/// are accepted, anything else is taken as a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => serde_json::to_value(t.remove("v").unwrap()).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use polystep::assignment::SolverKind;
    use polystep::schedule::ScheduleKind;

    const SAMPLE: &str = r#"
task.kind = "blobs"
task.activation = "sign"
method = "polystep"
optimizer.solver = "sinkhorn"
optimizer.subspace = "hybrid"
optimizer.epsilon.kind = "cosine"
optimizer.epsilon.start = 1.0
optimizer.epsilon.target = 0.05
optimizer.epsilon.horizon = 200
budget.max_steps = 200
seeds = [1, 2]
"#;

    #[test]
    fn dotted_keys_fill_nested_fields() {
        let c = parse_config(SAMPLE).unwrap();
        assert!(matches!(c.task, TaskConfig::Blobs { activation: Activation::Sign, hidden: 16, .. }));
        assert_eq!(c.optimizer.solver, SolverKind::Sinkhorn);
        assert_eq!(c.optimizer.epsilon.kind, ScheduleKind::Cosine);
        assert_eq!(c.budget.max_steps, Some(200));
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.optimizer.dp, 2);
    }

    #[test]
    fn defaults_and_rejections() {
        let c = parse_config("task.kind = \"quadratic\"\ntask.dim = 3\nbudget.max_evals = 10").unwrap();
        assert_eq!(c.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(c.method, Method::Polystep);
        for bad in [
            "task.kind = \"quadratic\"\ntask.dim = 3\nbudget.max_steps = 1\noptimizer.bogus = 1",
            "task.kind = \"quadratic\"\ntask.dim = 3",
            "task.kind = \"quadratic\"\ntask.dim = 3\nbudget.max_steps = 1\nseeds = []",
            "task.kind = \"nope\"\nbudget.max_steps = 1",
            "task.kind = \"quadratic\"\ntask.dim = 3\nbudget.max_steps = 1\noptimizer.dp = 3",
            "this is not a config",
        ] {
            assert!(parse_config(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_edit_the_tree() {
        let mut tree = parse_tree(SAMPLE).unwrap();
        set_path(&mut tree, "optimizer.rank", parse_value("8")).unwrap();
        set_path(&mut tree, "optimizer.solver", parse_value("greedy")).unwrap();
        set_path(&mut tree, "optimizer.solver_options.lambda", parse_value("10.0")).unwrap();
        let c = from_tree(tree.clone()).unwrap();
        assert_eq!(c.optimizer.rank, 8);
        assert_eq!(c.optimizer.solver, SolverKind::Greedy);
        assert_eq!(c.optimizer.solver_options.lambda, 10.0);
        assert!(set_path(&mut tree, "optimizer..rank", Value::Null).is_err());
        assert!(set_path(&mut tree, "seeds.x", Value::Null).is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let c = parse_config(SAMPLE).unwrap().for_seed(2);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.optimizer.seed, 2);
    }
}

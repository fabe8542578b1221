//! Result records and per-method summaries.

use std::collections::BTreeMap;
use std::path::Path;

use polystep::optimizer::EnvironmentInfo;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Bumped whenever a field of [`ResultRecord`] changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// One run of one method on one task with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub task: String,
    pub method: String,
    /// Sweep setting, e.g. `optimizer.solver=greedy`.
    pub variant: Option<String>,
    pub seed: u64,
    /// Fully resolved config; replaying it reproduces the run.
    pub config: ExperimentConfig,
    pub loss_trace: Vec<f64>,
    pub eval_trace: Vec<u64>,
    /// `None` for failed runs.
    pub best_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metric_name: Option<String>,
    /// Task metric at the restored checkpoint.
    pub metric: Option<f64>,
    /// Task metric at the last iterate.
    pub final_metric: Option<f64>,
    pub steps: usize,
    pub evals: u64,
    pub loss_evals: u64,
    pub wall_seconds: f64,
    pub environment: EnvironmentInfo,
    /// Set when the run failed; traces are then empty.
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn failed(config: ExperimentConfig, seed: u64, error: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: config.task.name(),
            method: config.method.name().into(),
            variant: None,
            seed,
            config,
            loss_trace: Vec::new(),
            eval_trace: Vec::new(),
            best_loss: None,
            final_loss: None,
            metric_name: None,
            metric: None,
            final_metric: None,
            steps: 0,
            evals: 0,
            loss_evals: 0,
            wall_seconds: 0.0,
            environment: EnvironmentInfo::current(),
            error: Some(error),
        }
    }
}

/// Mean and sample standard deviation; `std` is 0 for a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub method: String,
    pub variant: Option<String>,
    pub runs: usize,
    pub failures: usize,
    pub best_loss: Option<Stat>,
    pub final_loss: Option<Stat>,
    pub metric_name: Option<String>,
    pub metric: Option<Stat>,
    pub final_metric: Option<Stat>,
    pub evals_min: u64,
    pub evals_max: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summaries: Vec<Summary>,
    /// Tasks whose methods did not all spend the same number of
    /// evaluations.
    pub unequal_budgets: Vec<String>,
}

/// Groups records by `(task, method, variant)`; failed runs are counted but excluded
/// from the statistics.
pub fn aggregate(records: &[ResultRecord]) -> Report {
    let mut groups: BTreeMap<(String, String, Option<String>), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.task.clone(), r.method.clone(), r.variant.clone())).or_default().push(r);
    }
    let summaries: Vec<Summary> = groups
        .into_iter()
        .map(|((task, method, variant), rs)| {
            let ok: Vec<&&ResultRecord> = rs.iter().filter(|r| r.error.is_none()).collect();
            let pick = |f: fn(&ResultRecord) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            Summary {
                task,
                method,
                variant,
                runs: rs.len(),
                failures: rs.len() - ok.len(),
                best_loss: pick(|r| r.best_loss),
                final_loss: pick(|r| r.final_loss),
                metric_name: ok.iter().find_map(|r| r.metric_name.clone()),
                metric: pick(|r| r.metric),
                final_metric: pick(|r| r.final_metric),
                evals_min: ok.iter().map(|r| r.evals).min().unwrap_or(0),
                evals_max: ok.iter().map(|r| r.evals).max().unwrap_or(0),
            }
        })
        .collect();
    let mut per_task: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.runs > s.failures) {
        let e = per_task.entry(&s.task).or_insert((u64::MAX, 0));
        *e = (e.0.min(s.evals_min), e.1.max(s.evals_max));
    }
    let methods_per_task = |t: &str| summaries.iter().filter(|s| s.task == t).count();
    let unequal_budgets = per_task
        .into_iter()
        .filter(|(t, (lo, hi))| lo != hi && methods_per_task(t) > 1)
        .map(|(t, _)| t.to_string())
        .collect();
    Report { summaries, unequal_budgets }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.into(), source })
}

pub fn load_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
    let records: Vec<ResultRecord> = serde_json::from_str(&text)?;
    if let Some(r) = records.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(HarnessError::Config(format!("record schema {} is not {SCHEMA_VERSION}", r.schema_version)));
    }
    Ok(records)
}

//! Task construction, seeded runs and sweeps.

use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use polystep::baselines::run_baseline;
use polystep::maxsat::{generate_random_3sat, parse_dimacs, SatObjective};
use polystep::objectives::{make_blobs, quadratic, sphere_indicator, MlpLoss, Objective, Split, TinyMlp};
use polystep::optimizer::{run, RunOptions, RunResult};
use polystep::rlenv::{Policy, PolicyCost, MAX_STEPS};
use polystep::rng::seeded;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{from_tree, set_path, ExperimentConfig, Method, TaskConfig};
use crate::error::{HarnessError, Result};
use crate::record::{ResultRecord, SCHEMA_VERSION};

/// Held-out CartPole episodes start from seeds above this offset, disjoint
/// from every training seed.
pub const HELD_OUT_SEED_BASE: u64 = 1 << 32;

/// Training rollouts of run seed `s` use seeds `s * CRN_SEED_STRIDE + m`.
pub const CRN_SEED_STRIDE: u64 = 1000;

type Score = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A concrete objective with its start point and task metrics.
pub struct TaskInstance {
    pub objective: Arc<dyn Objective + Send>,
    pub theta0: Vec<f64>,
    pub metric_name: Option<&'static str>,
    /// Higher-is-better task metric.
    pub metric: Option<Score>,
    /// Lower-is-better checkpoint score on held-out data.
    pub checkpoint: Option<Score>,
    /// Training loss at which a run stops early: nothing can beat it.
    pub loss_floor: Option<f64>,
}

pub fn build_task(task: &TaskConfig, seed: u64) -> Result<TaskInstance> {
    let mut rng = seeded(seed);
    let plain = |objective: Arc<dyn Objective + Send>, theta0| TaskInstance {
        objective,
        theta0,
        metric_name: None,
        metric: None,
        checkpoint: None,
        loss_floor: None,
    };
    Ok(match task {
        TaskConfig::Blobs { activation, hidden, per_class, spread } => {
            let data = Arc::new(make_blobs(3, *per_class, *spread, &mut rng));
            let model = TinyMlp::new(&[2, *hidden, 3], *activation);
            let theta0 = model.init_params(&mut rng);
            let loss = Arc::new(MlpLoss::on_split(model, data, Split::Train)?);
            let acc = loss.clone();
            TaskInstance {
                metric_name: Some("train_accuracy"),
                metric: Some(Arc::new(move |p: &[f64]| acc.accuracy(p))),
                ..plain(loss, theta0)
            }
        }
        TaskConfig::Quadratic { dim } => {
            let theta0 = (0..*dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            plain(Arc::new(quadratic(*dim, None)), theta0)
        }
        TaskConfig::SphereIndicator { dim, distance, radius } => {
            if *dim == 0 || !(*radius > 0.0) {
                return Err(HarnessError::Config("sphere indicator needs dim >= 1 and radius > 0".into()));
            }
            let mut center = vec![0.0; *dim];
            center[0] = *distance;
            plain(Arc::new(sphere_indicator(&center, *radius)), vec![0.0; *dim])
        }
        TaskConfig::MaxSat { n_vars, ratio, dimacs } => {
            let cnf = match dimacs {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
                    parse_dimacs(&text)?
                }
                None => generate_random_3sat(*n_vars, *ratio, &mut rng)?,
            };
            let n = cnf.n_vars;
            let theta0 = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sat = Arc::new(SatObjective::new(cnf));
            let frac = sat.clone();
            TaskInstance {
                metric_name: Some("satisfied_fraction"),
                metric: Some(Arc::new(move |p: &[f64]| frac.satisfied_fraction(p))),
                ..plain(sat, theta0)
            }
        }
        TaskConfig::CartPole { precision, rollouts, eval_episodes } => {
            let policy = Policy::new(*precision);
            let theta0 = policy.net.init_params(&mut rng);
            let cost = Arc::new(PolicyCost::new(policy, *rollouts, seed * CRN_SEED_STRIDE)?);
            let episodes = *eval_episodes;
            let (held, ckpt) = (cost.clone(), cost.clone());
            TaskInstance {
                metric_name: Some("held_out_return"),
                metric: Some(Arc::new(move |p: &[f64]| held.held_out_return(p, episodes, HELD_OUT_SEED_BASE))),
                checkpoint: Some(Arc::new(move |p: &[f64]| -ckpt.held_out_return(p, episodes, HELD_OUT_SEED_BASE))),
                loss_floor: Some(-(MAX_STEPS as f64)),
                ..plain(cost, theta0)
            }
        }
    })
}

fn record_from<C>(config: &ExperimentConfig, seed: u64, task: &TaskInstance, res: RunResult<C>) -> ResultRecord {
    ResultRecord {
        schema_version: SCHEMA_VERSION,
        task: config.task.name(),
        method: config.method.name().into(),
        variant: None,
        seed,
        config: config.clone(),
        metric_name: task.metric_name.map(String::from),
        metric: task.metric.as_ref().map(|m| m(&res.params)),
        final_metric: task.metric.as_ref().map(|m| m(&res.last_params)),
        loss_trace: res.loss_trace,
        eval_trace: res.eval_trace,
        best_loss: Some(res.best_loss),
        final_loss: Some(res.final_loss),
        steps: res.steps,
        evals: res.evals,
        loss_evals: res.loss_evals,
        wall_seconds: res.wall_seconds,
        environment: res.environment,
        error: None,
    }
}

/// Runs `config` for its first seed only.
pub fn run_single(config: &ExperimentConfig) -> Result<ResultRecord> {
    let seed = *config.seeds.first().ok_or_else(|| HarnessError::Config("seed list is empty".into()))?;
    let config = config.for_seed(seed);
    let task = build_task(&config.task, seed)?;
    let objective: &dyn Objective = &*task.objective;
    Ok(match config.method {
        Method::Polystep => {
            let mut opts = RunOptions::new(config.budget);
            if let Some(score) = &task.checkpoint {
                opts = opts.with_checkpoint_metric(&**score);
            }
            if let Some(floor) = task.loss_floor {
                opts = opts.with_callback(move |m, _| if m.loss <= floor { ControlFlow::Break(()) } else { ControlFlow::Continue(()) });
            }
            let res = run(&config.optimizer, objective, &task.theta0, opts)?;
            record_from(&config, seed, &task, res)
        }
        _ => {
            let res = run_baseline(&config.baseline, objective, &task.theta0, config.budget)?;
            record_from(&config, seed, &task, res)
        }
    })
}

/// One record per seed. A failing seed is recorded with its error and the
/// remaining seeds still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    config.validate()?;
    let one = |&seed: &u64| {
        let c = config.for_seed(seed);
        run_single(&c).unwrap_or_else(|e| {
            log::warn!("seed {seed} failed: {e}");
            ResultRecord::failed(c, seed, e.to_string())
        })
    };
    Ok(if config.parallel { config.seeds.par_iter().map(one).collect() } else { config.seeds.iter().map(one).collect() })
}

/// Runs every value of the config's sweep and tags records with it.
pub fn ablate(tree: &Value) -> Result<Vec<ResultRecord>> {
    let base = from_tree(tree.clone())?;
    let sweep = base.sweep.clone().ok_or_else(|| HarnessError::Config("ablation needs sweep.key and sweep.values".into()))?;
    if sweep.values.is_empty() {
        return Err(HarnessError::Config("sweep.values is empty".into()));
    }
    let mut out = Vec::new();
    for value in &sweep.values {
        let mut t = tree.clone();
        set_path(&mut t, &sweep.key, value.clone())?;
        let label = format!("{}={}", sweep.key, value.as_str().map(String::from).unwrap_or_else(|| value.to_string()));
        let config = from_tree(t)?;
        for mut r in run_experiment(&config)? {
            r.variant = Some(label.clone());
            out.push(r);
        }
    }
    Ok(out)
}

/// Re-runs the config embedded in a record.
pub fn replay(record: &ResultRecord) -> Result<ResultRecord> {
    let mut r = run_single(&record.config.for_seed(record.seed))?;
    r.variant = record.variant.clone();
    Ok(r)
}

pub fn write_output<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => crate::record::save_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::aggregate;
    use polystep::optimizer::Budget;

    fn quad(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(TaskConfig::Quadratic { dim: 6 }, method, Budget::steps(20));
        c.seeds = vec![1, 2, 3];
        c
    }

    #[test]
    fn one_record_per_seed_with_resolved_config() {
        let records = run_experiment(&quad(Method::Polystep)).unwrap();
        assert_eq!(records.len(), 3);
        for (r, seed) in records.iter().zip([1, 2, 3]) {
            assert_eq!(r.seed, seed);
            assert_eq!(r.config.optimizer.seed, seed);
            assert_eq!(r.config.seeds, vec![seed]);
            assert_eq!(r.loss_trace.len(), 21);
            assert!(r.eval_trace.windows(2).all(|w| w[0] <= w[1]));
            assert!(r.error.is_none());
        }
    }

    #[test]
    fn repeated_seed_has_zero_spread() {
        let mut c = quad(Method::Spsa);
        c.seeds = vec![9; 5];
        let report = aggregate(&run_experiment(&c).unwrap());
        assert_eq!(report.summaries.len(), 1);
        assert_eq!(report.summaries[0].final_loss.unwrap().std, 0.0);
        assert_eq!(report.summaries[0].runs, 5);
    }

    #[test]
    fn replay_is_bit_identical() {
        for method in [Method::Polystep, Method::IsotropicEs] {
            let r = run_single(&quad(method)).unwrap();
            let text = serde_json::to_string(&r).unwrap();
            let back: ResultRecord = serde_json::from_str(&text).unwrap();
            let again = replay(&back).unwrap();
            assert_eq!(again.loss_trace, r.loss_trace);
            assert_eq!(again.eval_trace, r.eval_trace);
        }
    }

    #[test]
    fn failing_seed_is_recorded_and_others_run() {
        let mut c = ExperimentConfig::new(
            TaskConfig::MaxSat { n_vars: 0, ratio: 4.27, dimacs: None },
            Method::Polystep,
            Budget::steps(2),
        );
        c.seeds = vec![1];
        let records = run_experiment(&c).unwrap();
        assert!(records[0].error.is_some());
        let report = aggregate(&records);
        assert_eq!(report.summaries[0].failures, 1);
    }

    #[test]
    fn budgets_are_compared_across_methods() {
        let mut records = run_experiment(&quad(Method::Polystep)).unwrap();
        let mut spsa = quad(Method::Spsa);
        spsa.budget = Budget::evals(records[0].evals);
        records.extend(run_experiment(&spsa).unwrap());
        assert!(aggregate(&records).unequal_budgets.is_empty());
        let mut es = quad(Method::IsotropicEs);
        es.budget = Budget::evals(10);
        records.extend(run_experiment(&es).unwrap());
        assert_eq!(aggregate(&records).unequal_budgets, vec!["quadratic_6".to_string()]);
    }

    #[test]
    fn tasks_report_metrics() {
        let blobs = build_task(&TaskConfig::Blobs { activation: polystep::objectives::Activation::Relu, hidden: 16, per_class: 10, spread: 0.3 }, 1).unwrap();
        assert_eq!(blobs.objective.dim(), 2 * 16 + 16 + 16 * 3 + 3);
        let acc = blobs.metric.unwrap()(&blobs.theta0);
        assert!((0.0..=1.0).contains(&acc));
        let sat = build_task(&TaskConfig::MaxSat { n_vars: 50, ratio: 4.27, dimacs: None }, 1).unwrap();
        assert_eq!(sat.theta0.len(), 50);
        let pole = build_task(&TaskConfig::CartPole { precision: polystep::rlenv::Precision::Binary, rollouts: 2, eval_episodes: 3 }, 1).unwrap();
        let ret = pole.metric.unwrap()(&pole.theta0);
        assert_eq!(pole.checkpoint.unwrap()(&pole.theta0), -ret);
    }

    #[test]
    fn ablation_tags_variants() {
        let mut tree = serde_json::to_value(quad(Method::Polystep)).unwrap();
        set_path(&mut tree, "sweep.key", Value::from("optimizer.solver")).unwrap();
        set_path(&mut tree, "sweep.values", serde_json::json!(["softmax", "greedy"])).unwrap();
        set_path(&mut tree, "seeds", serde_json::json!([4])).unwrap();
        let records = ablate(&tree).unwrap();
        let variants: Vec<_> = records.iter().map(|r| r.variant.clone().unwrap()).collect();
        assert_eq!(variants, vec!["optimizer.solver=softmax", "optimizer.solver=greedy"]);
        assert_eq!(aggregate(&records).summaries.len(), 2);
    }
}

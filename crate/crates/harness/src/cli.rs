//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use polystep::maxsat::parse_dimacs;
use polystep::rlenv::Precision;
use serde_json::{json, Value};

use crate::acceptance;
use crate::config::{from_tree, load_tree, parse_value, set_path};
use crate::error::{HarnessError, Result};
use crate::experiment::{ablate, run_experiment, write_output};
use crate::recipes;
use crate::record::{aggregate, load_records, ResultRecord};

#[derive(Debug, Parser)]
#[command(name = "polystep", version, about = "Run polystep experiments and the acceptance suite")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every seed of a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the acceptance suite.
    Accept {
        /// Criterion id, name fragment or module tag.
        #[arg(long)]
        filter: Option<String>,
        /// Write outcomes as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MAX-SAT with the wide-radius recipe.
    Maxsat {
        /// Random 3-SAT parameters, e.g. `n=1000 ratio=4.27 seed=42`.
        #[arg(long, num_args = 1.., value_name = "KEY=VALUE", conflicts_with = "dimacs", required_unless_present = "dimacs")]
        generate: Vec<String>,
        #[arg(long)]
        dimacs: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// CartPole policy search.
    Rl {
        #[arg(long, default_value = "float32")]
        precision: Precision,
        /// Training rollouts per evaluation.
        #[arg(long)]
        rollouts: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the sweep declared in a config file.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate saved records into mean and standard deviation per method.
    Summarize { records: PathBuf },
}

/// Overrides shared by the experiment commands.
#[derive(Debug, Args)]
pub struct Common {
    /// Replace the seed list; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// `N` or `steps=N` for a step budget, `evals=N` for an evaluation budget.
    #[arg(long)]
    budget: Option<String>,
    /// Write records as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Set any config key, e.g. `--set optimizer.solver=sinkhorn`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seeds on separate workers.
    #[arg(long)]
    parallel: bool,
}

fn split_pair(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| HarnessError::Usage(format!("expected KEY=VALUE, got '{raw}'")))
}

fn parse_budget(raw: &str) -> Result<Value> {
    let (kind, n) = raw.split_once('=').unwrap_or(("steps", raw));
    let n: u64 = n.trim().parse().map_err(|_| HarnessError::Usage(format!("bad budget '{raw}'")))?;
    match kind.trim() {
        "steps" => Ok(json!({ "max_steps": n })),
        "evals" => Ok(json!({ "max_evals": n })),
        other => Err(HarnessError::Usage(format!("budget kind must be steps or evals, got '{other}'"))),
    }
}

impl Common {
    fn apply(&self, tree: &mut Value) -> Result<()> {
        if !self.seed.is_empty() {
            set_path(tree, "seeds", json!(self.seed))?;
        }
        if let Some(b) = &self.budget {
            set_path(tree, "budget", parse_budget(b)?)?;
        }
        if let Some(out) = &self.out {
            set_path(tree, "output", json!(out))?;
        }
        if self.parallel {
            set_path(tree, "parallel", json!(true))?;
        }
        for raw in &self.set {
            let (k, v) = split_pair(raw)?;
            set_path(tree, k, parse_value(v))?;
        }
        Ok(())
    }
}

/// Records go to the config's output path or stdout, a single record as an
/// object; the summary goes to stderr.
fn emit(records: &[ResultRecord], out: Option<&Path>) -> Result<()> {
    match records {
        [one] => write_output(out, one)?,
        _ => write_output(out, &records)?,
    }
    eprint!("{}", render_summary(records));
    if records.iter().any(|r| r.error.is_some()) {
        return Err(HarnessError::Config(format!(
            "{} of {} seeds failed",
            records.iter().filter(|r| r.error.is_some()).count(),
            records.len()
        )));
    }
    Ok(())
}

pub fn render_summary(records: &[ResultRecord]) -> String {
    let report = aggregate(records);
    let mut s = String::new();
    let pm = |st: Option<crate::record::Stat>| st.map_or("-".to_string(), |st| format!("{:.4} +- {:.4}", st.mean, st.std));
    for sum in &report.summaries {
        let variant = sum.variant.as_deref().map(|v| format!(" [{v}]")).unwrap_or_default();
        s += &format!(
            "{} {}{variant}: runs {} failed {} final loss {} {} {} evals {}\n",
            sum.task,
            sum.method,
            sum.runs,
            sum.failures,
            pm(sum.final_loss),
            sum.metric_name.as_deref().unwrap_or("metric"),
            pm(sum.metric),
            sum.evals_max
        );
    }
    for t in &report.unequal_budgets {
        s += &format!("warning: methods on {t} used different evaluation budgets\n");
    }
    s
}

fn run_tree(mut tree: Value, common: &Common) -> Result<()> {
    common.apply(&mut tree)?;
    let config = from_tree(tree)?;
    let records = run_experiment(&config)?;
    emit(&records, config.output.as_deref())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, common } => run_tree(load_tree(&config)?, &common),
        Command::Ablate { config, common } => {
            let mut tree = load_tree(&config)?;
            common.apply(&mut tree)?;
            let records = ablate(&tree)?;
            let out = from_tree(tree)?.output;
            emit(&records, out.as_deref())
        }
        Command::Maxsat { generate, dimacs, common } => {
            let mut tree = match dimacs {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
                    let n = parse_dimacs(&text)?.n_vars;
                    let mut tree = serde_json::to_value(recipes::maxsat(n, 4.27))?;
                    set_path(&mut tree, "task", json!({ "kind": "max_sat", "dimacs": path }))?;
                    set_path(&mut tree, "seeds", json!([42]))?;
                    tree
                }
                None => {
                    let (mut n, mut ratio, mut seed) = (1000usize, 4.27f64, 42u64);
                    for raw in &generate {
                        let (k, v) = split_pair(raw)?;
                        let bad = || HarnessError::Usage(format!("bad value in '{raw}'"));
                        match k {
                            "n" | "n_vars" => n = v.parse().map_err(|_| bad())?,
                            "ratio" => ratio = v.parse().map_err(|_| bad())?,
                            "seed" => seed = v.parse().map_err(|_| bad())?,
                            _ => return Err(HarnessError::Usage(format!("unknown generator key '{k}' (n, ratio, seed)"))),
                        }
                    }
                    let mut tree = serde_json::to_value(recipes::maxsat(n, ratio))?;
                    set_path(&mut tree, "seeds", json!([seed]))?;
                    tree
                }
            };
            set_path(&mut tree, "output", Value::Null)?;
            run_tree(tree, &common)
        }
        Command::Rl { precision, rollouts, common } => {
            let mut tree = serde_json::to_value(recipes::cartpole(precision))?;
            if let Some(m) = rollouts {
                set_path(&mut tree, "task.rollouts", json!(m))?;
            }
            run_tree(tree, &common)
        }
        Command::Accept { filter, out } => {
            let selected = acceptance::select(filter.as_deref());
            if selected.is_empty() {
                return Err(HarnessError::Usage(format!("no criterion matches '{}'", filter.unwrap_or_default())));
            }
            let outcomes = acceptance::run_criteria(&selected, |o| {
                println!("{o}");
                for d in &o.details {
                    println!("    {d}");
                }
            });
            if let Some(path) = out {
                crate::record::save_json(&path, &outcomes)?;
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} criteria failed", outcomes.len());
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Summarize { records } => {
            let records = load_records(&records)?;
            println!("{}", serde_json::to_string_pretty(&aggregate(&records))?);
            eprint!("{}", render_summary(&records));
            Ok(())
        }
    }
}

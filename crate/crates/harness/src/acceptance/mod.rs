//! The acceptance suite: ten criteria, each a pass/fail check with a
//! runtime limit.

mod criteria;

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::Result;

/// Verdict of one criterion body before timing is applied.
#[derive(Clone, Debug, Default)]
pub struct Check {
    pub passed: bool,
    pub details: Vec<String>,
}

impl Check {
    /// Records a named sub-check and folds it into the verdict.
    pub fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.details.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
        self.passed &= ok;
    }

    fn new() -> Self {
        Self { passed: true, details: Vec::new() }
    }
}

type Rerun = Box<dyn Fn() -> Result<Vec<f64>> + Send + Sync>;

/// Runs recorded by earlier criteria, kept so the determinism criterion can
/// execute them again.
#[derive(Default)]
pub struct Context {
    runs: Vec<(String, Vec<f64>, Rerun)>,
}

impl Context {
    pub fn track(&mut self, label: impl Into<String>, trace: Vec<f64>, again: impl Fn() -> Result<Vec<f64>> + Send + Sync + 'static) {
        self.runs.push((label.into(), trace, Box::new(again)));
    }

    pub fn tracked(&self) -> usize {
        self.runs.len()
    }
}

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    /// Module names usable with `--filter`.
    pub tags: &'static [&'static str],
    pub limit: Option<Duration>,
    run: fn(&mut Context) -> Result<Check>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub limit_seconds: Option<f64>,
    pub details: Vec<String>,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let limit = self.limit_seconds.map(|l| format!(" (limit {l:.0}s)")).unwrap_or_default();
        write!(f, "{} criterion {:>2} {}: {:.1}s{limit}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.seconds)
    }
}

pub fn criteria() -> Vec<Criterion> {
    criteria::all()
}

/// Criteria whose id, name or tag matches `filter`; all when `None`.
pub fn select(filter: Option<&str>) -> Vec<Criterion> {
    let all = criteria();
    match filter {
        None => all,
        Some(f) => {
            let f = f.to_ascii_lowercase();
            all.into_iter().filter(|c| c.id.to_string() == f || c.name.contains(f.as_str()) || c.tags.contains(&f.as_str())).collect()
        }
    }
}

/// Runs `selected` in order. An error inside a criterion fails it without
/// stopping the others.
pub fn run_criteria(selected: &[Criterion], mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let mut ctx = Context::default();
    selected
        .iter()
        .map(|c| {
            let start = Instant::now();
            let mut check = (c.run)(&mut ctx).unwrap_or_else(|e| Check { passed: false, details: vec![format!("FAIL error: {e}")] });
            let seconds = start.elapsed().as_secs_f64();
            if let Some(limit) = c.limit {
                check.expect(seconds <= limit.as_secs_f64(), format!("runtime {seconds:.1}s within {}s", limit.as_secs()));
            }
            let outcome = Outcome {
                id: c.id,
                name: c.name,
                passed: check.passed,
                seconds,
                limit_seconds: c.limit.map(|l| l.as_secs_f64()),
                details: check.details,
            };
            report(&outcome);
            outcome
        })
        .collect()
}

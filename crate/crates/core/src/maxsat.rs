//! Random 3-SAT, DIMACS input and incremental clause counting.
//!
//! A real vector `theta` encodes the assignment `x_i = [theta_i >= 0]`, the
//! same rule as thresholding a sigmoid at one half. The loss is the fraction
//! of unsatisfied clauses. Probes that cross zero in a few coordinates are
//! scored by touching only the clauses that contain the flipped variables,
//! found through a CSR index from variables to literal occurrences.
//!
//! ```
//! use polystep::maxsat::{parse_dimacs, SatObjective};
//! use polystep::objectives::Objective;
//!
//! let cnf = parse_dimacs("c tiny\np cnf 3 2\n1 -2 0\n2 3 0\n").unwrap();
//! let sat = SatObjective::new(cnf);
//! assert_eq!(sat.eval(&[1.0, -1.0, 1.0]), 0.0);
//! assert_eq!(sat.eval(&[-1.0, 1.0, -1.0]), 0.5);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::{Objective, ProbeEvaluator, Smoothness};

/// CNF formula stored as flat literal runs. Literals are 1-based and signed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnfInstance {
    pub n_vars: usize,
    pub literals: Vec<i32>,
    /// `clause_offsets[c]..clause_offsets[c + 1]` indexes clause `c`.
    pub clause_offsets: Vec<usize>,
}

impl CnfInstance {
    pub fn from_clauses(n_vars: usize, clauses: &[Vec<i32>]) -> Result<Self> {
        let mut literals = Vec::new();
        let mut clause_offsets = vec![0];
        for clause in clauses {
            for &lit in clause {
                if lit == 0 || lit.unsigned_abs() as usize > n_vars {
                    return Err(invalid(format!("literal {lit} outside 1..={n_vars}")));
                }
            }
            literals.extend_from_slice(clause);
            clause_offsets.push(literals.len());
        }
        Ok(Self { n_vars, literals, clause_offsets })
    }

    pub fn clause_count(&self) -> usize {
        self.clause_offsets.len() - 1
    }

    pub fn clause(&self, c: usize) -> &[i32] {
        &self.literals[self.clause_offsets[c]..self.clause_offsets[c + 1]]
    }

    pub fn is_satisfied(&self, c: usize, assignment: &[bool]) -> bool {
        self.clause(c).iter().any(|&l| literal_value(l, assignment))
    }

    /// Number of satisfied clauses.
    pub fn count_satisfied(&self, assignment: &[bool]) -> usize {
        (0..self.clause_count()).filter(|&c| self.is_satisfied(c, assignment)).count()
    }

    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.n_vars, self.clause_count());
        for c in 0..self.clause_count() {
            for l in self.clause(c) {
                out.push_str(&l.to_string());
                out.push(' ');
            }
            out.push_str("0\n");
        }
        out
    }
}

#[inline]
fn literal_value(lit: i32, assignment: &[bool]) -> bool {
    assignment[lit.unsigned_abs() as usize - 1] == (lit > 0)
}

/// Random 3-SAT with `round(ratio * n)` clauses over three distinct variables,
/// each negated with probability one half.
pub fn generate_random_3sat<R: Rng + ?Sized>(n_vars: usize, ratio: f64, rng: &mut R) -> Result<CnfInstance> {
    if n_vars < 3 {
        return Err(invalid(format!("random 3-SAT needs at least 3 variables, got {n_vars}")));
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(invalid(format!("clause ratio must be positive, got {ratio}")));
    }
    let m = (ratio * n_vars as f64).round() as usize;
    let mut literals = Vec::with_capacity(3 * m);
    for _ in 0..m {
        for v in index::sample(rng, n_vars, 3) {
            let lit = (v + 1) as i32;
            literals.push(if rng.random::<bool>() { lit } else { -lit });
        }
    }
    Ok(CnfInstance { n_vars, clause_offsets: (0..=m).map(|c| 3 * c).collect(), literals })
}

/// Parses DIMACS CNF. Duplicate literals inside a clause are dropped with a
/// warning; a clause holding both `x` and `-x` is kept and is always
/// satisfied.
pub fn parse_dimacs(text: &str) -> Result<CnfInstance> {
    let err = |line: usize, message: String| Error::Dimacs { line, message };
    let mut header: Option<(usize, usize, usize)> = None;
    let mut literals = Vec::new();
    let mut clause_offsets = vec![0];
    let mut current: Vec<i32> = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if line.starts_with('%') {
            break;
        }
        if line.starts_with('p') {
            if header.is_some() {
                return Err(err(line_no, "second problem line".into()));
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[1] != "cnf" {
                return Err(err(line_no, format!("expected 'p cnf <vars> <clauses>', got '{line}'")));
            }
            let n = parts[2].parse().map_err(|_| err(line_no, format!("bad variable count '{}'", parts[2])))?;
            let m = parts[3].parse().map_err(|_| err(line_no, format!("bad clause count '{}'", parts[3])))?;
            header = Some((n, m, line_no));
            continue;
        }
        let Some((n, _, _)) = header else {
            return Err(err(line_no, "clause before the problem line".into()));
        };
        for tok in line.split_whitespace() {
            let lit: i64 = tok.parse().map_err(|_| err(line_no, format!("bad literal '{tok}'")))?;
            if lit == 0 {
                let before = current.len();
                let mut seen = Vec::with_capacity(current.len());
                for &l in &current {
                    if !seen.contains(&l) {
                        seen.push(l);
                    }
                }
                if seen.len() != before {
                    log::warn!("line {line_no}: dropped duplicate literals");
                }
                literals.extend_from_slice(&seen);
                clause_offsets.push(literals.len());
                current.clear();
                continue;
            }
            if lit.unsigned_abs() as usize > n {
                return Err(err(line_no, format!("literal {lit} outside 1..={n}")));
            }
            current.push(lit as i32);
        }
    }
    let Some((n, m, header_line)) = header else {
        return Err(err(last_line.max(1), "missing problem line".into()));
    };
    if !current.is_empty() {
        return Err(err(last_line, "last clause is not terminated by 0".into()));
    }
    let found = clause_offsets.len() - 1;
    if found != m {
        return Err(err(header_line, format!("header declares {m} clauses, found {found}")));
    }
    Ok(CnfInstance { n_vars: n, literals, clause_offsets })
}

/// Variable-to-occurrence index in CSR form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvertedIndex {
    pub offsets: Vec<usize>,
    /// Clause of every occurrence, sorted within each variable.
    pub clause_ids: Vec<u32>,
    /// Whether the occurrence is a positive literal.
    pub positive: Vec<bool>,
}

impl InvertedIndex {
    pub fn build(instance: &CnfInstance) -> Self {
        let n = instance.n_vars;
        let mut offsets = vec![0usize; n + 1];
        for &l in &instance.literals {
            offsets[l.unsigned_abs() as usize] += 1;
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }
        let mut fill = offsets.clone();
        let mut clause_ids = vec![0u32; instance.literals.len()];
        let mut positive = vec![false; instance.literals.len()];
        // clauses are visited in order, so each run is sorted
        for c in 0..instance.clause_count() {
            for &l in instance.clause(c) {
                let v = l.unsigned_abs() as usize - 1;
                clause_ids[fill[v]] = c as u32;
                positive[fill[v]] = l > 0;
                fill[v] += 1;
            }
        }
        Self { offsets, clause_ids, positive }
    }

    pub fn occurrences(&self, var: usize) -> Range {
        self.offsets[var]..self.offsets[var + 1]
    }
}

type Range = std::ops::Range<usize>;

/// Assignment with per-clause satisfied-literal counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SatState {
    pub assignment: Vec<bool>,
    pub counts: Vec<u8>,
    pub satisfied: usize,
}

impl SatState {
    pub fn new(instance: &CnfInstance, assignment: Vec<bool>) -> Self {
        let counts: Vec<u8> = (0..instance.clause_count())
            .map(|c| instance.clause(c).iter().filter(|&&l| literal_value(l, &assignment)).count() as u8)
            .collect();
        let satisfied = counts.iter().filter(|&&k| k > 0).count();
        Self { assignment, counts, satisfied }
    }

    pub fn from_params(instance: &CnfInstance, theta: &[f64]) -> Self {
        Self::new(instance, assignment_from_params(theta))
    }

    pub fn fraction(&self) -> f64 {
        if self.counts.is_empty() {
            1.0
        } else {
            self.satisfied as f64 / self.counts.len() as f64
        }
    }

    /// Flips the given variables in order, updating only touched clauses.
    /// Returns the number of clause occurrences visited.
    pub fn apply_flips(&mut self, index: &InvertedIndex, flips: &[usize]) -> usize {
        let mut visited = 0;
        for &v in flips {
            let now = !self.assignment[v];
            self.assignment[v] = now;
            for o in index.occurrences(v) {
                let c = index.clause_ids[o] as usize;
                let before = self.counts[c];
                // literal becomes true iff its polarity matches the new value
                let after = if index.positive[o] == now { before + 1 } else { before - 1 };
                self.counts[c] = after;
                if before == 0 {
                    self.satisfied += 1;
                } else if after == 0 {
                    self.satisfied -= 1;
                }
                visited += 1;
            }
        }
        visited
    }

    /// Satisfied count after flipping `flips` (distinct variables), without
    /// changing the state. Returns the count and the occurrences visited.
    pub fn satisfied_after(&self, index: &InvertedIndex, flips: &[usize], scratch: &mut Vec<(u32, i8)>) -> (usize, usize) {
        scratch.clear();
        for &v in flips {
            let now = !self.assignment[v];
            for o in index.occurrences(v) {
                let d = if index.positive[o] == now { 1 } else { -1 };
                scratch.push((index.clause_ids[o], d));
            }
        }
        let visited = scratch.len();
        scratch.sort_unstable_by_key(|e| e.0);
        let mut sat = self.satisfied as i64;
        let mut k = 0;
        while k < scratch.len() {
            let c = scratch[k].0;
            let mut delta = 0i32;
            while k < scratch.len() && scratch[k].0 == c {
                delta += scratch[k].1 as i32;
                k += 1;
            }
            let before = self.counts[c as usize] as i32;
            sat += ((before + delta > 0) as i64) - ((before > 0) as i64);
        }
        (sat as usize, visited)
    }
}

pub fn assignment_from_params(theta: &[f64]) -> Vec<bool> {
    theta.iter().map(|&t| t >= 0.0).collect()
}

/// Loss `1 - satisfied / clauses` with counters for clause work.
#[derive(Debug)]
pub struct SatObjective {
    pub instance: Arc<CnfInstance>,
    pub index: Arc<InvertedIndex>,
    delta_visits: AtomicU64,
    full_visits: AtomicU64,
    probes: AtomicU64,
    fallbacks: AtomicU64,
}

/// Snapshot of the clause-work counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatCounters {
    /// Clause occurrences visited on the incremental path.
    pub delta_visits: u64,
    /// Clauses evaluated by full recomputation, centers included.
    pub full_visits: u64,
    /// Probes scored.
    pub probes: u64,
    /// Probes scored by full recomputation because too many signs crossed.
    pub fallbacks: u64,
}

impl SatCounters {
    /// All clause work done.
    pub fn total(&self) -> u64 {
        self.delta_visits + self.full_visits
    }
}

impl SatObjective {
    pub fn new(instance: CnfInstance) -> Self {
        let index = InvertedIndex::build(&instance);
        Self {
            instance: Arc::new(instance),
            index: Arc::new(index),
            delta_visits: AtomicU64::new(0),
            full_visits: AtomicU64::new(0),
            probes: AtomicU64::new(0),
            fallbacks: AtomicU64::new(0),
        }
    }

    pub fn counters(&self) -> SatCounters {
        SatCounters {
            delta_visits: self.delta_visits.load(Ordering::Relaxed),
            full_visits: self.full_visits.load(Ordering::Relaxed),
            probes: self.probes.load(Ordering::Relaxed),
            fallbacks: self.fallbacks.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        for c in [&self.delta_visits, &self.full_visits, &self.probes, &self.fallbacks] {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn satisfied_fraction(&self, theta: &[f64]) -> f64 {
        1.0 - self.eval(theta)
    }

    fn loss_of(&self, satisfied: usize) -> f64 {
        let m = self.instance.clause_count();
        if m == 0 {
            0.0
        } else {
            (m - satisfied) as f64 / m as f64
        }
    }
}

impl Objective for SatObjective {
    fn dim(&self) -> usize {
        self.instance.n_vars
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        self.full_visits.fetch_add(self.instance.clause_count() as u64, Ordering::Relaxed);
        self.loss_of(self.instance.count_satisfied(&assignment_from_params(theta)))
    }

    fn name(&self) -> String {
        format!("maxsat{}", self.instance.n_vars)
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::PiecewiseConstant
    }

    fn probe_evaluator<'a>(&'a self, center: &'a [f64]) -> Box<dyn ProbeEvaluator + 'a> {
        self.full_visits.fetch_add(self.instance.clause_count() as u64, Ordering::Relaxed);
        Box::new(SatProbes { objective: self, state: SatState::from_params(&self.instance, center) })
    }
}

struct SatProbes<'a> {
    objective: &'a SatObjective,
    state: SatState,
}

impl ProbeEvaluator for SatProbes<'_> {
    fn eval_variants(&self, offset: usize, width: usize, points: &[f64], out: &mut [f64]) {
        let obj = self.objective;
        let n = obj.instance.n_vars;
        let live = n.saturating_sub(offset).min(width);
        let mut flips = Vec::with_capacity(live);
        let mut scratch = Vec::new();
        let (mut delta, mut full, mut fallbacks) = (0u64, 0u64, 0u64);
        for (o, p) in out.iter_mut().zip(points.chunks_exact(width)) {
            flips.clear();
            for (k, &x) in p[..live].iter().enumerate() {
                if (x >= 0.0) != self.state.assignment[offset + k] {
                    flips.push(offset + k);
                }
            }
            let satisfied = if 2 * flips.len() > n {
                let mut a = self.state.assignment.clone();
                for &v in &flips {
                    a[v] = !a[v];
                }
                fallbacks += 1;
                full += obj.instance.clause_count() as u64;
                obj.instance.count_satisfied(&a)
            } else {
                let (s, visited) = self.state.satisfied_after(&obj.index, &flips, &mut scratch);
                delta += visited as u64;
                s
            };
            *o = obj.loss_of(satisfied);
        }
        obj.delta_visits.fetch_add(delta, Ordering::Relaxed);
        obj.full_visits.fetch_add(full, Ordering::Relaxed);
        obj.fallbacks.fetch_add(fallbacks, Ordering::Relaxed);
        obj.probes.fetch_add(out.len() as u64, Ordering::Relaxed);
    }
}

/// Outcome of one MAX-SAT run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatResult {
    pub n_vars: usize,
    pub clauses: usize,
    pub satisfied: usize,
    pub fraction: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_theta(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn generated_sizes_and_distinct_variables() {
        let mut rng = seeded(0);
        let cnf = generate_random_3sat(100, 4.27, &mut rng).unwrap();
        assert_eq!(cnf.clause_count(), 427);
        let big = generate_random_3sat(2500, 4.0, &mut rng).unwrap();
        assert_eq!(big.clause_count(), 10_000);
        for c in 0..big.clause_count() {
            let mut vars: Vec<u32> = big.clause(c).iter().map(|l| l.unsigned_abs()).collect();
            vars.sort_unstable();
            vars.dedup();
            assert_eq!(vars.len(), 3);
        }
        assert!(generate_random_3sat(2, 4.27, &mut rng).is_err());
    }

    #[test]
    fn dimacs_basics() {
        let cnf = parse_dimacs("p cnf 2 1\n1 -2 0").unwrap();
        assert_eq!(cnf.clause_count(), 1);
        assert_eq!(cnf.clause(0), &[1, -2]);
        // clauses may span lines; comments and the SATLIB end marker are skipped
        let cnf = parse_dimacs("c hi\np cnf 3 2\n1 2\n3 0 -1\nc mid\n-2 0\n%\n0\n").unwrap();
        assert_eq!(cnf.clause(0), &[1, 2, 3]);
        assert_eq!(cnf.clause(1), &[-1, -2]);
        let round = parse_dimacs(&cnf.to_dimacs()).unwrap();
        assert_eq!(round, cnf);
    }

    #[test]
    fn dimacs_errors_carry_lines() {
        let cases = [
            ("p cnf 2 2\n1 -2 0\n", 1),
            ("1 2 0\n", 1),
            ("p cnf 2 1\n1 3 0\n", 2),
            ("p cnf 2 1\n1 x 0\n", 2),
            ("p cnf 2 1\n1 2\n", 2),
            ("p dnf 2 1\n", 1),
            ("c only\n", 1),
        ];
        for (text, line) in cases {
            match parse_dimacs(text) {
                Err(Error::Dimacs { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn dimacs_normalizes_duplicates_and_tautologies() {
        let cnf = parse_dimacs("p cnf 2 2\n1 1 2 0\n1 -1 0\n").unwrap();
        assert_eq!(cnf.clause(0), &[1, 2]);
        let sat = SatObjective::new(cnf);
        for theta in [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]] {
            let s = SatState::from_params(&sat.instance, &theta);
            assert_eq!(s.counts[1], 1);
        }
        assert_eq!(sat.eval(&[-1.0, -1.0]), 0.5);
    }

    #[test]
    fn index_layout() {
        let mut rng = seeded(3);
        let cnf = generate_random_3sat(50, 4.27, &mut rng).unwrap();
        let idx = InvertedIndex::build(&cnf);
        assert_eq!(idx.offsets[50], 3 * cnf.clause_count());
        assert!(idx.offsets.windows(2).all(|w| w[0] <= w[1]));
        for v in 0..50 {
            let ids = &idx.clause_ids[idx.occurrences(v)];
            assert!(ids.windows(2).all(|w| w[0] <= w[1]));
            for o in idx.occurrences(v) {
                let c = idx.clause_ids[o] as usize;
                let lit = if idx.positive[o] { v as i32 + 1 } else { -(v as i32 + 1) };
                assert!(cnf.clause(c).contains(&lit));
            }
        }
    }

    #[test]
    fn all_true_satisfies_positive_formula() {
        let cnf = CnfInstance::from_clauses(3, &[vec![1, 2, 3], vec![1, -2, 3], vec![2, 3, -1]]).unwrap();
        assert_eq!(SatObjective::new(cnf).eval(&[1.0; 3]), 0.0);
        assert!(CnfInstance::from_clauses(3, &[vec![4]]).is_err());
    }

    #[test]
    fn random_assignments_satisfy_seven_eighths() {
        let mut rng = seeded(11);
        let cnf = generate_random_3sat(200, 4.27, &mut rng).unwrap();
        let m = cnf.clause_count() as f64;
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let a: Vec<bool> = (0..200).map(|_| rng.random()).collect();
            total += cnf.count_satisfied(&a) as f64 / m;
        }
        let mean = total / n as f64;
        // per clause Bernoulli(7/8); assignments are independent draws
        let sigma = (7.0 / 64.0 / (m * n as f64)).sqrt();
        // clauses sharing variables are correlated, so allow a wider band
        assert!((mean - 0.875).abs() < 3.0 * sigma * 3.0, "{mean}");
    }

    #[test]
    fn delta_matches_full_recompute() {
        let mut rng = seeded(5);
        let cnf = generate_random_3sat(500, 4.27, &mut rng).unwrap();
        let idx = InvertedIndex::build(&cnf);
        let theta = random_theta(500, 6);
        let mut state = SatState::from_params(&cnf, &theta);
        let original = state.clone();
        assert_eq!(state.apply_flips(&idx, &[]), 0);
        assert_eq!(state, original);
        let mut scratch = Vec::new();
        for _ in 0..1000 {
            let k = rng.random_range(1..=8);
            let flips = index::sample(&mut rng, 500, k).into_vec();
            let (predicted, visited) = state.satisfied_after(&idx, &flips, &mut scratch);
            let touched: usize = flips.iter().map(|&v| idx.occurrences(v).len()).sum();
            assert_eq!(visited, touched);
            state.apply_flips(&idx, &flips);
            let full = SatState::new(&cnf, state.assignment.clone());
            assert_eq!(state, full);
            assert_eq!(predicted, full.satisfied);
        }
        let all: Vec<usize> = (0..500).chain(0..500).collect();
        let before = state.clone();
        state.apply_flips(&idx, &all);
        assert_eq!(state, before);
    }

    #[test]
    fn probe_adapter_matches_eval_and_counts_work() {
        let mut rng = seeded(8);
        let cnf = generate_random_3sat(300, 4.27, &mut rng).unwrap();
        let sat = SatObjective::new(cnf);
        let center = random_theta(300, 9);
        let ev = sat.probe_evaluator(&center);
        sat.reset_counters();

        // identical probe: no clause work
        let mut out = [0.0];
        ev.eval_variants(10, 2, &center[10..12], &mut out);
        assert_eq!(out[0], sat.eval(&center));
        sat.reset_counters();
        ev.eval_variants(10, 2, &center[10..12], &mut out);
        assert_eq!(sat.counters().delta_visits, 0);

        for _ in 0..200 {
            let offset = rng.random_range(0..299);
            let p: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            sat.reset_counters();
            ev.eval_variants(offset, 2, &p, &mut out);
            let bound: usize = (offset..offset + 2).map(|v| sat.index.occurrences(v).len()).sum();
            assert!(sat.counters().delta_visits as usize <= bound);
            let mut theta = center.clone();
            theta[offset..offset + 2].copy_from_slice(&p);
            assert_eq!(out[0], sat.eval(&theta));
        }
        // padded tail
        ev.eval_variants(299, 2, &[5.0, 7.0], &mut out);
        let mut theta = center.clone();
        theta[299] = 5.0;
        assert_eq!(out[0], sat.eval(&theta));
    }

    #[test]
    fn dense_crossings_fall_back_to_full_evaluation() {
        let cnf = CnfInstance::from_clauses(3, &[vec![1, 2, 3], vec![-1, -2, 3]]).unwrap();
        let sat = SatObjective::new(cnf);
        let center = [1.0, 1.0, 1.0];
        let ev = sat.probe_evaluator(&center);
        let mut out = [0.0];
        ev.eval_variants(0, 4, &[-1.0, -1.0, -1.0, 0.0], &mut out);
        assert_eq!(out[0], sat.eval(&[-1.0, -1.0, -1.0]));
        assert_eq!(sat.counters().fallbacks, 1);
    }
}

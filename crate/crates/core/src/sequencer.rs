//! Sequence optimization: the penalty iteration over relaxed assignments and
//! the exhaustive search over permutations.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlpsolver::{solve, SolveReport, SolveStatus, SolverOptions};
use crate::scenario::Scenario;
use crate::subproblems::{
    build_case2_subproblem, build_penalized, linearized_penalty, solve_fixed, Assignment,
    BuiltProblem, ObjectiveKind, Policy, SchemeKind,
};

/// Largest N the exhaustive search accepts by default.
pub const ORACLE_CAP: usize = 8;
/// Objectives this close (relative) count as ties in the exhaustive search.
const TIE_REL: f64 = 1e-9;
/// Allowed increase of the traced objective between outer iterations.
pub const MONOTONE_SLACK: f64 = 1e-9;
/// Outer iterations without the assignment moving by more than
/// `STALL_MOVE` before the iteration gives up.
/// Violation accepted on a relaxed iterate; the final fixed-sequence polish is audited.
const RELAXED_FEAS_TOL: f64 = 1e-6;
const STALL_ITERS: usize = 5;
const STALL_MOVE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Penalty,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Penalized objective of this outer iteration at its accepted point.
    pub objective: f64,
    /// sum(x - x^2) at the accepted point.
    pub residual: f64,
    pub status: SolveStatus,
    /// True when the subproblem's point was worse than the carried-over one.
    pub kept_previous: bool,
    pub x: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    /// Largest increase of the objective from one iteration to the next.
    pub fn worst_increase(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| w[1].objective - w[0].objective)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_monotone(&self) -> bool {
        self.records.len() < 2 || self.worst_increase() <= MONOTONE_SLACK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencerResult {
    pub policy: Policy,
    pub trace: IterationTrace,
    pub penalty_residual_final: f64,
    /// KKT residual of the final fixed-sequence solve.
    pub stationarity_residual: f64,
    pub method: Method,
    /// Scheme objective at the relaxed point before the fixed-sequence polish.
    pub pre_polish_objective: Option<f64>,
    /// Solver iterations summed over every solve of the run.
    pub iterations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequencerOptions {
    pub lambda: f64,
    pub epsilon: f64,
    pub max_outer: usize,
    /// Weight of the uniform matrix mixed into a warm-started assignment.
    pub warm_mix: f64,
    pub solver: SolverOptions,
}

impl Default for SequencerOptions {
    fn default() -> Self {
        SequencerOptions {
            lambda: 200.0,
            epsilon: 1e-6,
            max_outer: 200,
            warm_mix: 0.1,
            solver: SolverOptions::default(),
        }
    }
}

/// Penalty iteration with the default options for the given constants.
pub fn algorithm1(
    scenario: &Scenario,
    objective: ObjectiveKind,
    lambda_penalty: f64,
    epsilon: f64,
    max_outer: usize,
) -> Result<SequencerResult> {
    let opts = SequencerOptions {
        lambda: lambda_penalty,
        epsilon,
        max_outer,
        ..SequencerOptions::default()
    };
    penalty_iteration(scenario, objective, SchemeKind::Optimal, &opts)
}

fn residual(x: &[Vec<f64>]) -> f64 {
    x.iter().flatten().map(|v| v - v * v).sum()
}

/// Scheme objective plus `lambda` times the linearized penalty, in natural units.
fn traced_objective(built: &BuiltProblem, s: &[f64], x_ref: &[Vec<f64>], lambda: f64) -> f64 {
    let (base, _) = built.split_objective(s);
    base + lambda * linearized_penalty(&built.layout.x_matrix(s), x_ref)
}

/// Warm start from the previous accepted point: the assignment is pulled
/// towards the uniform matrix so it is strictly inside the polytope.
fn warm_start(built: &mut BuiltProblem, prev: &[f64], mix: f64) {
    let l = built.layout.clone();
    let n = l.n as f64;
    let mut s = prev.to_vec();
    for b in 0..l.n {
        for i in 0..l.n {
            let k = l.x(b, i);
            s[k] = (1.0 - mix) * prev[k] + mix / n;
        }
    }
    if l.has_t {
        let emax = built.energies(&s).into_iter().fold(0.0f64, f64::max);
        s[l.t()] = 1.5 * crate::subproblems::ENERGY_SCALE * emax + 1e-3;
    }
    built.set_start(&s);
}

/// Algorithm 1 for the Optimal scheme or its equal-block (Case2) variant.
pub fn penalty_iteration(
    scenario: &Scenario,
    objective: ObjectiveKind,
    scheme: SchemeKind,
    opts: &SequencerOptions,
) -> Result<SequencerResult> {
    if !scheme.optimizes_sequence() {
        return Err(Error::validation(
            "scheme",
            format!("{scheme} has a fixed sequence"),
        ));
    }
    if !(opts.epsilon > 0.0) || opts.max_outer == 0 {
        return Err(Error::validation("epsilon", "must be > 0 with max_outer >= 1"));
    }
    let n = scenario.n();
    let build = |x_ref: &[Vec<f64>]| match scheme {
        SchemeKind::Case2 => build_case2_subproblem(scenario, objective, x_ref, opts.lambda),
        _ => build_penalized(scenario, objective, x_ref, opts.lambda),
    };
    let mut warnings = Vec::new();
    let mut trace = IterationTrace::default();
    let mut iterations = 0;

    if n == 1 {
        // a single assignment exists
        let fixed = solve_fixed(scenario, scheme, &Assignment::identity(1), objective, &opts.solver)?;
        trace.records.push(IterationRecord {
            objective: fixed.policy.objective_value,
            residual: 0.0,
            status: fixed.report.status,
            kept_previous: false,
            x: vec![vec![1.0]],
        });
        return Ok(SequencerResult {
            pre_polish_objective: Some(fixed.policy.objective_value),
            policy: fixed.policy,
            trace,
            penalty_residual_final: 0.0,
            stationarity_residual: fixed.report.kkt_residual,
            method: Method::Penalty,
            iterations: fixed.report.iterations,
            warnings,
        });
    }

    let uniform = vec![vec![1.0 / n as f64; n]; n];
    let mut x_ref = vec![vec![0.5; n]; n];
    let mut accepted: Option<(Vec<f64>, BuiltProblem)> = None;
    let mut restarted = false;
    let mut converged = false;
    let mut stalled = 0;

    for _ in 0..opts.max_outer {
        let mut built = build(&x_ref)?;
        if let Some((prev, _)) = &accepted {
            warm_start(&mut built, prev, opts.warm_mix);
        }
        let mut report = solve(&built.problem, &opts.solver);
        iterations += report.iterations;
        if !usable(&report, &opts.solver) {
            let retry = solve(&built.problem, &opts.solver.tightened());
            iterations += retry.iterations;
            report = retry;
        }
        if !usable(&report, &opts.solver) && report.status != SolveStatus::Infeasible {
            if let Some((prev, _)) = &accepted {
                // the carried point is still feasible; only the linearization moved
                warnings.push(format!(
                    "penalized subproblem returned {:?}; previous point carried over",
                    report.status
                ));
                report.point = prev.clone();
                report.status = SolveStatus::IterationLimit;
                report.max_violation = 0.0;
            }
        }
        if !usable(&report, &opts.solver) {
            if report.status == SolveStatus::Infeasible && accepted.is_none() && !restarted {
                // phase 1 can stall on the nonconvex relaxation; a feasible
                // nearest permutation means the scenario itself is not infeasible
                let nearest = extract_permutation(&built.layout.x_matrix(&report.point))?;
                return match solve_fixed(scenario, scheme, &nearest, objective, &opts.solver) {
                    Err(Error::Infeasible(_)) => Err(Error::Infeasible(format!(
                        "relaxed assignment problem infeasible at T_frame = {:.6} s",
                        scenario.t_frame()
                    ))),
                    _ => Err(Error::Solver(format!(
                        "relaxed assignment problem has no strictly feasible point found (violation {:.3e})",
                        report.max_violation
                    ))),
                };
            }
            if restarted {
                return Err(Error::Solver(format!(
                    "penalized subproblem failed twice ({:?}, violation {:.3e})",
                    report.status, report.max_violation
                )));
            }
            restarted = true;
            warnings.push(format!(
                "penalized subproblem returned {:?}; restarting from a perturbed reference",
                report.status
            ));
            for (row, urow) in x_ref.iter_mut().zip(&uniform) {
                for (r, u) in row.iter_mut().zip(urow) {
                    *r = 0.9 * *r + 0.1 * u;
                }
            }
            continue;
        }
        if !report.is_optimal() {
            warnings.push(format!(
                "penalized subproblem stopped with {:?} (KKT residual {:.3e}); point kept",
                report.status, report.kkt_residual
            ));
        }
        let mut point = report.point;
        let mut value = traced_objective(&built, &point, &x_ref, opts.lambda);
        let mut kept_previous = false;
        if let Some((prev, _)) = &accepted {
            let carried = traced_objective(&built, prev, &x_ref, opts.lambda);
            if value > carried {
                point = prev.clone();
                value = carried;
                kept_previous = true;
            }
        }
        let x = built.layout.x_matrix(&point);
        let resid = residual(&x);
        let moved = x
            .iter()
            .flatten()
            .zip(x_ref.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        stalled = if moved < STALL_MOVE { stalled + 1 } else { 0 };
        trace.records.push(IterationRecord {
            objective: value,
            residual: resid,
            status: report.status,
            kept_previous,
            x: x.clone(),
        });
        x_ref = x;
        accepted = Some((point, built));
        if resid < opts.epsilon {
            converged = true;
            break;
        }
        if stalled >= STALL_ITERS {
            break;
        }
    }

    let (point, built) = accepted.ok_or_else(|| Error::Solver("no penalized subproblem succeeded".into()))?;
    let x_final = built.layout.x_matrix(&point);
    let resid = residual(&x_final);
    if !converged {
        // a stuck fractional assignment usually means no binary one is
        // feasible; the fixed-sequence solve at the nearest permutation tells
        let nearest = extract_permutation(&x_final)?;
        if let Err(e @ Error::Infeasible(_)) = solve_fixed(scenario, scheme, &nearest, objective, &opts.solver) {
            return Err(e);
        }
        return Err(Error::Solver(format!(
            "penalty iteration stopped after {} outer iterations with sum(x - x^2) = {resid:.3e} >= {:e}",
            trace.records.len(),
            opts.epsilon
        )));
    }
    if !trace.is_monotone() {
        return Err(Error::Solver(format!(
            "penalized objective increased by {:.3e} between outer iterations",
            trace.worst_increase()
        )));
    }
    let (assignment, mut extract_warnings) = extract_permutation_checked(&x_final)?;
    warnings.append(&mut extract_warnings);
    let (pre_polish, _) = built.split_objective(&point);
    let polished = solve_fixed(scenario, scheme, &assignment, objective, &opts.solver)?;
    iterations += polished.report.iterations;
    Ok(SequencerResult {
        policy: polished.policy,
        trace,
        penalty_residual_final: resid,
        stationarity_residual: polished.report.kkt_residual,
        method: Method::Penalty,
        pre_polish_objective: Some(pre_polish),
        iterations,
        warnings,
    })
}

fn usable(report: &SolveReport, solver: &SolverOptions) -> bool {
    match report.status {
        SolveStatus::Optimal => true,
        SolveStatus::Infeasible => false,
        _ => report.max_violation <= solver.tol_feas.max(RELAXED_FEAS_TOL),
    }
}

/// Best fixed-sequence solution over every permutation.
pub fn exhaustive_oracle(
    scenario: &Scenario,
    objective: ObjectiveKind,
    scheme: SchemeKind,
) -> Result<SequencerResult> {
    exhaustive_oracle_with(scenario, objective, scheme, ORACLE_CAP, &SolverOptions::default())
}

pub fn exhaustive_oracle_with(
    scenario: &Scenario,
    objective: ObjectiveKind,
    scheme: SchemeKind,
    cap: usize,
    opts: &SolverOptions,
) -> Result<SequencerResult> {
    let n = scenario.n();
    if n > cap {
        return Err(Error::OracleCap { n, cap });
    }
    let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let outcomes: Vec<_> = perms
        .par_iter()
        .map(|p| {
            let a = Assignment::from_perm(p.clone()).expect("generated permutation");
            solve_fixed(scenario, scheme, &a, objective, opts)
        })
        .collect();
    let iterations = outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .map(|f| f.report.iterations)
        .sum();
    let best = outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .map(|f| f.policy.objective_value)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        // a numerical failure outranks "infeasible" for the other permutations
        let numeric = outcomes.into_iter().find_map(|o| match o {
            Err(Error::Infeasible(_)) | Ok(_) => None,
            Err(e) => Some(e),
        });
        return Err(numeric.unwrap_or_else(|| {
            Error::Infeasible(format!(
                "no sequence is feasible at T_frame = {:.6} s",
                scenario.t_frame()
            ))
        }));
    }
    let failures = outcomes
        .iter()
        .filter(|o| matches!(o, Err(e) if !matches!(e, Error::Infeasible(_))))
        .count();
    let tie = TIE_REL * best.abs().max(f64::MIN_POSITIVE);
    // permutations come in lexicographic order, so the first hit is the smallest
    let winner = outcomes
        .into_iter()
        .filter_map(|o| o.ok())
        .find(|f| f.policy.objective_value <= best + tie)
        .expect("minimum attained");
    let mut warnings = Vec::new();
    if failures > 0 {
        warnings.push(format!("{failures} permutation solves failed numerically"));
    }
    Ok(SequencerResult {
        stationarity_residual: winner.report.kkt_residual,
        policy: winner.policy,
        trace: IterationTrace::default(),
        penalty_residual_final: 0.0,
        method: Method::Exhaustive,
        pre_polish_objective: None,
        iterations,
        warnings,
    })
}

/// Solution of one scheme at one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSolution {
    pub scheme: SchemeKind,
    pub policy: Policy,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Solves `scheme`: the penalty iteration for Optimal, the exhaustive search
/// for Case2 (penalty iteration above [`ORACLE_CAP`] devices), and the
/// identity sequence for the fixed-sequence schemes.
pub fn solve_scheme(
    scenario: &Scenario,
    scheme: SchemeKind,
    objective: ObjectiveKind,
    opts: &SequencerOptions,
) -> Result<SchemeSolution> {
    let (policy, iterations, warnings) = match scheme {
        SchemeKind::Optimal => {
            let r = penalty_iteration(scenario, objective, scheme, opts)?;
            (r.policy, r.iterations, r.warnings)
        }
        SchemeKind::Case2 if scenario.n() <= ORACLE_CAP => {
            let r = exhaustive_oracle_with(scenario, objective, scheme, ORACLE_CAP, &opts.solver)?;
            (r.policy, r.iterations, r.warnings)
        }
        SchemeKind::Case2 => {
            let r = penalty_iteration(scenario, objective, scheme, opts)?;
            (r.policy, r.iterations, r.warnings)
        }
        _ => {
            let f = solve_fixed(scenario, scheme, &Assignment::identity(scenario.n()), objective, &opts.solver)?;
            (f.policy, f.report.iterations, Vec::new())
        }
    };
    Ok(SchemeSolution {
        scheme,
        policy,
        iterations,
        warnings,
    })
}

/// Whether any schedule of `scheme` meets the timing constraints. Schemes
/// with a free sequence are checked over every permutation.
pub fn is_feasible(scenario: &Scenario, scheme: SchemeKind, opts: &SolverOptions) -> Result<bool> {
    let n = scenario.n();
    let check = |a: &Assignment| match solve_fixed(scenario, scheme, a, ObjectiveKind::Sum, opts) {
        Ok(_) => Ok(true),
        Err(Error::Infeasible(_)) => Ok(false),
        Err(_) => match solve_fixed(scenario, scheme, a, ObjectiveKind::Sum, &opts.tightened()) {
            Ok(_) => Ok(true),
            Err(Error::Infeasible(_)) => Ok(false),
            Err(e) => Err(e),
        },
    };
    if !scheme.optimizes_sequence() {
        return check(&Assignment::identity(n));
    }
    if n > ORACLE_CAP {
        return Err(Error::OracleCap { n, cap: ORACLE_CAP });
    }
    let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let results: Vec<Result<bool>> = perms
        .par_iter()
        .map(|p| check(&Assignment::from_perm(p.clone()).expect("generated permutation")))
        .collect();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(true) => return Ok(true),
            Ok(false) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(false),
    }
}

/// Maximum-weight perfect matching on `x` (rows are blocks, columns devices).
pub fn extract_permutation(x: &[Vec<f64>]) -> Result<Assignment> {
    extract_permutation_checked(x).map(|(a, _)| a)
}

/// As [`extract_permutation`], also returning warnings about weak matches.
pub fn extract_permutation_checked(x: &[Vec<f64>]) -> Result<(Assignment, Vec<String>)> {
    let n = x.len();
    if n == 0 || x.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("assignment matrix must be square".into()));
    }
    for k in 0..n {
        let row: f64 = x[k].iter().sum();
        let col: f64 = x.iter().map(|r| r[k]).sum();
        if (row - 1.0).abs() > 1e-3 || (col - 1.0).abs() > 1e-3 {
            return Err(Error::validation(
                "x",
                format!("row/column {k} sums to {row:.6}/{col:.6}, expected 1"),
            ));
        }
    }
    let perm = hungarian_max(x);
    let mut warnings = Vec::new();
    let floor = 1.0 / n as f64 - 1e-6;
    for (b, &i) in perm.iter().enumerate() {
        if x[b].iter().all(|&v| v < floor) || x[b][i] < floor {
            warnings.push(format!(
                "block {b}: matched weight {:.4} is below 1/N; assignment is ambiguous",
                x[b][i]
            ));
        }
    }
    Ok((Assignment::from_perm(perm)?, warnings))
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// cost `-x`. Returns `perm[row] = column`.
fn hungarian_max(x: &[Vec<f64>]) -> Vec<usize> {
    let n = x.len();
    let cost = |r: usize, c: usize| -x[r][c];
    // 1-based arrays, column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let cur = cost(r0 - 1, c - 1) - u[r0] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = col0;
                }
                // strict comparison keeps the lowest column index on ties
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for c in 1..=n {
        perm[owner[c] - 1] = c - 1;
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ChannelRealization, DeviceSpec, SystemParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weight(x: &[Vec<f64>], perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(b, &i)| x[b][i]).sum()
    }

    fn brute_best(x: &[Vec<f64>]) -> f64 {
        (0..x.len())
            .permutations(x.len())
            .map(|p| weight(x, &p))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn fleet(specs: &[(f64, f64)], t_frame: f64) -> Scenario {
        let mut p = SystemParams::reference();
        p.t_frame = t_frame;
        let devs = specs
            .iter()
            .map(|&(kb, d)| DeviceSpec::new(kb * 1e3, d, p.min_cp_ratio).unwrap())
            .collect::<Vec<_>>();
        let gains = vec![1.0; devs.len()];
        Scenario::new(p, devs, ChannelRealization::fixed(gains)).unwrap()
    }

    #[test]
    fn identity_and_noisy_permutations() {
        let eye: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| f64::from(u8::from(r == c))).collect()).collect();
        assert_eq!(extract_permutation(&eye).unwrap().perm, vec![0, 1, 2, 3]);
        let target = vec![2, 0, 3, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..4)
            .map(|b| {
                (0..4)
                    .map(|i| f64::from(u8::from(target[b] == i)) + rng.random_range(-1e-4..1e-4))
                    .collect()
            })
            .collect();
        assert_eq!(extract_permutation(&x).unwrap().perm, target);
    }

    #[test]
    fn matching_beats_row_argmax() {
        let x = vec![vec![0.5, 0.4, 0.1], vec![0.5, 0.2, 0.3], vec![0.0, 0.4, 0.6]];
        let a = extract_permutation(&x).unwrap();
        assert_eq!(a.perm, vec![1, 0, 2]);
        assert!((weight(&x, &a.perm) - brute_best(&x)).abs() < 1e-12);
    }

    #[test]
    fn matching_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=6 {
            for _ in 0..30 {
                // Sinkhorn-balanced random matrix
                let mut x: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
                for _ in 0..500 {
                    for r in x.iter_mut() {
                        let s: f64 = r.iter().sum();
                        r.iter_mut().for_each(|v| *v /= s);
                    }
                    for c in 0..n {
                        let s: f64 = x.iter().map(|r| r[c]).sum();
                        x.iter_mut().for_each(|r| r[c] /= s);
                    }
                }
                let a = extract_permutation(&x).unwrap();
                assert!((weight(&x, &a.perm) - brute_best(&x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_unbalanced_matrices() {
        assert!(extract_permutation(&[vec![0.5, 0.2], vec![0.5, 0.8]]).is_err());
    }

    #[test]
    fn single_device_needs_one_outer_iteration() {
        let sc = fleet(&[(310.0, 40.0)], 0.05);
        let r = algorithm1(&sc, ObjectiveKind::Sum, 200.0, 1e-6, 200).unwrap();
        assert_eq!(r.trace.records.len(), 1);
        assert_eq!(r.trace.records[0].x, vec![vec![1.0]]);
        let direct = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::identity(1), ObjectiveKind::Sum, &SolverOptions::default()).unwrap();
        assert_eq!(r.policy, direct.policy);
    }

    #[test]
    fn identical_devices_tie_in_the_oracle() {
        let sc = fleet(&[(200.0, 30.0), (200.0, 30.0)], 0.07);
        let r = exhaustive_oracle(&sc, ObjectiveKind::Sum, SchemeKind::Optimal).unwrap();
        let other = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::from_perm(vec![1, 0]).unwrap(), ObjectiveKind::Sum, &SolverOptions::default()).unwrap();
        assert!((r.policy.objective_value - other.policy.objective_value).abs() <= 1e-8 * r.policy.objective_value);
        assert_eq!(r.policy.assignment.perm, vec![0, 1]);
    }

    #[test]
    fn large_packet_goes_later_when_tight() {
        let sc = fleet(&[(100.0, 30.0), (500.0, 30.0)], 0.06);
        let r = exhaustive_oracle(&sc, ObjectiveKind::Sum, SchemeKind::Optimal).unwrap();
        assert_eq!(r.policy.assignment.perm, vec![0, 1]);
        let swapped = fleet(&[(500.0, 30.0), (100.0, 30.0)], 0.06);
        let r = exhaustive_oracle(&swapped, ObjectiveKind::Sum, SchemeKind::Optimal).unwrap();
        assert_eq!(r.policy.assignment.perm, vec![1, 0]);
    }

    #[test]
    fn oracle_respects_the_cap() {
        let sc = fleet(&[(100.0, 30.0); 3], 0.1);
        assert!(matches!(
            exhaustive_oracle_with(&sc, ObjectiveKind::Sum, SchemeKind::Optimal, 2, &SolverOptions::default()),
            Err(Error::OracleCap { n: 3, cap: 2 })
        ));
    }

    #[test]
    fn penalty_iteration_on_three_devices() {
        let sc = fleet(&[(300.0, 35.0), (120.0, 25.0), (220.0, 45.0)], 0.08);
        let r = algorithm1(&sc, ObjectiveKind::Sum, 200.0, 1e-6, 200).unwrap();
        assert!(r.penalty_residual_final < 1e-6);
        assert!(r.trace.is_monotone());
        let last = &r.trace.records.last().unwrap().x;
        let perm = &r.policy.assignment.perm;
        for (b, row) in last.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let want = f64::from(u8::from(perm[b] == i));
                assert!((v - want).abs() < 1e-3);
            }
        }
        let oracle = exhaustive_oracle(&sc, ObjectiveKind::Sum, SchemeKind::Optimal).unwrap();
        assert!(oracle.policy.objective_value <= r.policy.objective_value * (1.0 + 1e-6));
    }
}

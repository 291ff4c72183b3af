//! Optimization problems for each scheme and the decoding of solver points
//! into audited policies.
//!
//! Every builder uses one variable layout:
//!
//! ```text
//! [ z_0..z_N | u_0..u_N | theta_0..theta_N | x_{0,0}..x_{N-1,N-1} | t ]
//! ```
//!
//! * `z_i` is the rate variable, in `[1e-9, z_max_i]`;
//! * `u_i = ln(d_cp_i / D_i)`, in `[ln min_cp_ratio, 0]` (fixed at 0 when
//!   compression is off);
//! * `theta_n = T_n / T_frame` (fixed at `1/N` for equal blocks);
//! * `x` only for the penalized problems, row-major by block;
//! * `t` only for the min-max epigraph, in millijoules.
//!
//! Timing constraints are divided by `T_frame` so they are O(1). The Sum and
//! MinMax objectives are carried in millijoules.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nlpsolver::{check_gradients, solve, Problem, SolveReport, SolveStatus, SolverOptions};
use crate::physmodel::{DeviceDecision, DeviceModel, DevicePhysical};
use crate::scenario::Scenario;

/// Joules to solver units for the Sum and MinMax objectives.
pub const ENERGY_SCALE: f64 = 1e3;
/// Floor on a block length inside the solver, seconds.
pub const MIN_BLOCK_S: f64 = 1e-9;
/// Blocks shorter than this are reported as empty.
pub const REPORT_BLOCK_S: f64 = 1e-6;
/// Slack of the policy audit, seconds (and relative for sizes and powers).
pub const AUDIT_TOL: f64 = 1e-9;
const Z_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Sum,
    MinMax,
    ProportionalFair,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::Sum,
        ObjectiveKind::MinMax,
        ObjectiveKind::ProportionalFair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Sum => "sum",
            ObjectiveKind::MinMax => "minmax",
            ObjectiveKind::ProportionalFair => "pf",
        }
    }

    /// Objective of per-device energies: sum, max, or sum of logs.
    pub fn evaluate(self, energies: &[f64]) -> f64 {
        match self {
            ObjectiveKind::Sum => energies.iter().sum(),
            ObjectiveKind::MinMax => energies.iter().fold(f64::NEG_INFINITY, |m, e| m.max(*e)),
            ObjectiveKind::ProportionalFair => energies.iter().map(|e| e.ln()).sum(),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(ObjectiveKind::Sum),
            "minmax" | "mm" => Ok(ObjectiveKind::MinMax),
            "pf" | "proportionalfair" => Ok(ObjectiveKind::ProportionalFair),
            _ => Err(Error::validation("objective", format!("unknown value '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Sequence, block lengths, compression and power all optimized.
    Optimal,
    /// Identity sequence, everything else optimized.
    SubOptimal,
    /// No compression; block lengths and power optimized.
    Benchmark,
    /// Identity sequence with equal blocks.
    Case1,
    /// Sequence optimized with equal blocks.
    Case2,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Optimal,
        SchemeKind::SubOptimal,
        SchemeKind::Benchmark,
        SchemeKind::Case1,
        SchemeKind::Case2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Optimal => "optimal",
            SchemeKind::SubOptimal => "suboptimal",
            SchemeKind::Benchmark => "benchmark",
            SchemeKind::Case1 => "case1",
            SchemeKind::Case2 => "case2",
        }
    }

    /// Whether the block order is a decision of this scheme.
    pub fn optimizes_sequence(self) -> bool {
        matches!(self, SchemeKind::Optimal | SchemeKind::Case2)
    }

    pub fn equal_blocks(self) -> bool {
        matches!(self, SchemeKind::Case1 | SchemeKind::Case2)
    }

    pub fn compresses(self) -> bool {
        self != SchemeKind::Benchmark
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::validation("scheme", format!("unknown value '{s}'")))
    }
}

/// Block-to-device assignment. `perm[n]` is the device in block `n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub perm: Vec<usize>,
    /// `x[n][i] = 1` iff device `i` occupies block `n`.
    pub x: Vec<Vec<u8>>,
}

impl Assignment {
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &i in &perm {
            if i >= n || seen[i] {
                return Err(Error::validation("sequence", format!("{perm:?} is not a permutation")));
            }
            seen[i] = true;
        }
        let x = perm
            .iter()
            .map(|&i| (0..n).map(|j| u8::from(j == i)).collect())
            .collect();
        Ok(Assignment { perm, x })
    }

    pub fn identity(n: usize) -> Self {
        Assignment::from_perm((0..n).collect()).unwrap()
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Block index of every device.
    pub fn block_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for (n, &i) in self.perm.iter().enumerate() {
            out[i] = n;
        }
        out
    }
}

/// A complete frame schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Block lengths T_n, seconds, in block order.
    pub blocks: Vec<f64>,
    /// Per device.
    pub decisions: Vec<DeviceDecision>,
    pub assignment: Assignment,
    /// Per-device energy E_i, joules.
    pub energies: Vec<f64>,
    /// Sum (J), max (J) or sum of ln E_i, depending on the objective.
    pub objective_value: f64,
    pub objective: ObjectiveKind,
    /// Per device.
    pub physical: Vec<DevicePhysical>,
}

impl Policy {
    pub fn system_energy(&self) -> f64 {
        self.energies.iter().sum()
    }

    /// Block lengths with slivers below a microsecond shown as zero.
    pub fn reported_blocks(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|&t| if t < REPORT_BLOCK_S { 0.0 } else { t })
            .collect()
    }

    /// Checks every timing, size and power constraint with physical formulas.
    pub fn audit(&self, scenario: &Scenario) -> Result<()> {
        let n = scenario.n();
        let t_frame = scenario.t_frame();
        if self.blocks.len() != n || self.decisions.len() != n || self.assignment.n() != n {
            return Err(Error::DimensionMismatch("policy size differs from scenario".into()));
        }
        let violated = |name: &str, slack: f64| Error::Audit {
            constraint: name.to_string(),
            slack,
        };
        let total: f64 = self.blocks.iter().sum();
        if (total - t_frame).abs() > AUDIT_TOL {
            return Err(violated("frame length", (total - t_frame).abs()));
        }
        for &t in &self.blocks {
            if t < -AUDIT_TOL || t > t_frame + AUDIT_TOL {
                return Err(violated("block length range", t.min(t_frame - t).abs()));
            }
        }
        let mut elapsed = 0.0;
        for (block, &i) in self.assignment.perm.iter().enumerate() {
            let d = &self.decisions[i];
            let dev = &scenario.devices[i];
            let ph = &self.physical[i];
            if d.d_cp < dev.d_min_bits * (1.0 - AUDIT_TOL) || d.d_cp > dev.packet_bits * (1.0 + AUDIT_TOL) {
                let s = (dev.d_min_bits - d.d_cp).max(d.d_cp - dev.packet_bits);
                return Err(violated("compressed size range", s));
            }
            let p_max = scenario.params.p_max;
            if ph.p_tx_amp < 0.0 || ph.p_tx_amp > p_max * (1.0 + AUDIT_TOL) {
                return Err(violated("transmit power range", ph.p_tx_amp - p_max));
            }
            let t_n = self.blocks[block];
            if block == 0 {
                let s = ph.t_cp + ph.t_tx - t_n;
                if s > AUDIT_TOL {
                    return Err(violated("first block compress-and-transmit", s));
                }
            } else {
                let s = ph.t_cp - elapsed;
                if s > AUDIT_TOL {
                    return Err(violated("cumulative compression window", s));
                }
                let s = ph.t_tx - t_n;
                if s > AUDIT_TOL {
                    return Err(violated("transmission block", s));
                }
            }
            elapsed += t_n;
        }
        Ok(())
    }
}

/// Positions of the variable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub objective: ObjectiveKind,
    pub scheme: SchemeKind,
    /// Fixed sequence, or `None` for the penalized problems.
    pub assignment: Option<Assignment>,
    pub has_x: bool,
    pub has_t: bool,
}

impl Layout {
    pub fn z(&self, i: usize) -> usize {
        i
    }
    pub fn u(&self, i: usize) -> usize {
        self.n + i
    }
    pub fn theta(&self, k: usize) -> usize {
        2 * self.n + k
    }
    pub fn x(&self, block: usize, i: usize) -> usize {
        3 * self.n + block * self.n + i
    }
    pub fn t(&self) -> usize {
        3 * self.n + if self.has_x { self.n * self.n } else { 0 }
    }
    pub fn n_vars(&self) -> usize {
        self.t() + usize::from(self.has_t)
    }

    /// The `x` block of a point as a matrix.
    pub fn x_matrix(&self, s: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|b| (0..self.n).map(|i| s[self.x(b, i)]).collect())
            .collect()
    }
}

/// A built problem together with what is needed to read its points.
pub struct BuiltProblem {
    pub problem: Problem,
    pub layout: Layout,
    pub models: Arc<Vec<DeviceModel>>,
    pub t_frame: f64,
}

impl BuiltProblem {
    /// Unscaled energies (J) at a point.
    pub fn energies(&self, s: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| m.energy_zv(s[l.z(i)], m.ln_packet() + s[l.u(i)]).0)
            .collect()
    }

    /// Penalized objective parts at a point: (scheme objective in natural
    /// units, penalty residual sum(x - x^2)).
    pub fn split_objective(&self, s: &[f64]) -> (f64, f64) {
        let e = self.energies(s);
        let base = self.layout.objective.evaluate(&e);
        let resid = if self.layout.has_x {
            self.layout
                .x_matrix(s)
                .iter()
                .flatten()
                .map(|x| x - x * x)
                .sum()
        } else {
            0.0
        };
        (base, resid)
    }

    /// Replaces the start point, keeping fixed variables at their values.
    pub fn set_start(&mut self, start: &[f64]) {
        for (k, &v) in start.iter().enumerate().take(self.problem.n_vars()) {
            if self.problem.lower[k] < self.problem.upper[k] {
                self.problem.start[k] = v;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Ctx {
    inv_t: f64,
}

fn models_for(scenario: &Scenario) -> Result<Arc<Vec<DeviceModel>>> {
    Ok(Arc::new(DeviceModel::all(scenario)?))
}

/// Variables, bounds and default start shared by every builder.
fn skeleton(
    scenario: &Scenario,
    models: &[DeviceModel],
    layout: &Layout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = layout.n;
    let nv = layout.n_vars();
    let mut lo = vec![0.0; nv];
    let mut hi = vec![0.0; nv];
    let mut start = vec![0.0; nv];
    let ln_ratio = scenario.params.min_cp_ratio.ln();
    let theta_floor = (MIN_BLOCK_S / scenario.t_frame()).min(0.5 / n as f64);
    for (i, m) in models.iter().enumerate() {
        let zmax = m.z_max();
        lo[layout.z(i)] = Z_FLOOR.min(0.5 * zmax);
        hi[layout.z(i)] = zmax;
        start[layout.z(i)] = 0.7 * zmax;
        if layout.scheme.compresses() {
            lo[layout.u(i)] = ln_ratio;
            start[layout.u(i)] = 0.3 * ln_ratio;
        }
    }
    for k in 0..n {
        let th = layout.theta(k);
        if layout.scheme.equal_blocks() {
            lo[th] = 1.0 / n as f64;
            hi[th] = 1.0 / n as f64;
        } else {
            // theta <= 1 follows from the sum constraint; a finite bound
            // would pin theta at it when N = 1
            lo[th] = theta_floor;
            hi[th] = f64::INFINITY;
        }
        start[th] = 1.0 / n as f64;
    }
    if layout.has_x {
        for b in 0..n {
            for i in 0..n {
                let k = layout.x(b, i);
                hi[k] = 1.0;
                start[k] = 1.0 / n as f64;
            }
        }
    }
    if layout.has_t {
        let t = layout.t();
        lo[t] = 0.0;
        hi[t] = f64::INFINITY;
        let emax = models
            .iter()
            .enumerate()
            .map(|(i, m)| m.energy_zv(start[layout.z(i)], m.ln_packet() + start[layout.u(i)]).0)
            .fold(0.0f64, f64::max);
        start[t] = 2.0 * ENERGY_SCALE * emax + 1.0;
    }
    (lo, hi, start)
}

/// Objective over the device energies, plus the linearized penalty when `x`
/// is present.
fn attach_objective(
    layout: &Layout,
    models: &Arc<Vec<DeviceModel>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    start: Vec<f64>,
    penalty: Option<(Vec<Vec<f64>>, f64)>,
) -> Problem {
    let l = layout.clone();
    let ms = Arc::clone(models);
    let pen_weight = match layout.objective {
        ObjectiveKind::ProportionalFair => 1.0,
        _ => ENERGY_SCALE,
    };
    let objective = move |s: &[f64], g: &mut [f64]| -> f64 {
        let mut f = match l.objective {
            ObjectiveKind::MinMax => {
                g[l.t()] = 1.0;
                s[l.t()]
            }
            ObjectiveKind::Sum => {
                let mut acc = 0.0;
                for (i, m) in ms.iter().enumerate() {
                    let (e, de) = m.energy_zv(s[l.z(i)], m.ln_packet() + s[l.u(i)]);
                    acc += e;
                    g[l.z(i)] += ENERGY_SCALE * de[0];
                    g[l.u(i)] += ENERGY_SCALE * de[1];
                }
                ENERGY_SCALE * acc
            }
            ObjectiveKind::ProportionalFair => {
                let mut acc = 0.0;
                for (i, m) in ms.iter().enumerate() {
                    let (e, de) = m.log_energy_zv(s[l.z(i)], m.ln_packet() + s[l.u(i)]);
                    acc += e;
                    g[l.z(i)] += de[0];
                    g[l.u(i)] += de[1];
                }
                acc
            }
        };
        if let Some((xr, lambda)) = &penalty {
            let w = pen_weight * lambda;
            for (b, row) in xr.iter().enumerate() {
                for (i, &r) in row.iter().enumerate() {
                    let k = l.x(b, i);
                    f += w * (s[k] * (1.0 - 2.0 * r) + r * r);
                    g[k] += w * (1.0 - 2.0 * r);
                }
            }
        }
        f
    };
    let mut problem = Problem::new(lo, hi, objective, start);
    if layout.objective == ObjectiveKind::MinMax {
        for i in 0..layout.n {
            let l = layout.clone();
            let ms = Arc::clone(models);
            problem.add_inequality(format!("energy bound {i}"), move |s: &[f64], g: &mut [f64]| {
                let m = &ms[i];
                let (e, de) = m.energy_zv(s[l.z(i)], m.ln_packet() + s[l.u(i)]);
                g[l.z(i)] = ENERGY_SCALE * de[0];
                g[l.u(i)] = ENERGY_SCALE * de[1];
                g[l.t()] = -1.0;
                ENERGY_SCALE * e - s[l.t()]
            });
        }
    }
    if !layout.scheme.equal_blocks() {
        let mut row = vec![0.0; layout.n_vars()];
        (0..layout.n).for_each(|k| row[layout.theta(k)] = 1.0);
        problem.add_equality(row, 1.0);
    }
    problem
}

/// Compression and transmission time of device `i` at a point, in frames,
/// with gradients with respect to `(z_i, u_i)`.
fn times(m: &DeviceModel, l: &Layout, ctx: Ctx, s: &[f64], i: usize) -> ((f64, f64), (f64, [f64; 2])) {
    let v = m.ln_packet() + s[l.u(i)];
    let (cp, dcp) = m.cp_time_v(v);
    let (tx, dtx) = m.tx_time_zv(s[l.z(i)], v);
    (
        (cp * ctx.inv_t, dcp * ctx.inv_t),
        (tx * ctx.inv_t, [dtx[0] * ctx.inv_t, dtx[1] * ctx.inv_t]),
    )
}

fn add_sequence_constraints(
    problem: &mut Problem,
    layout: &Layout,
    models: &Arc<Vec<DeviceModel>>,
    ctx: Ctx,
    perm: &[usize],
) {
    for (block, &i) in perm.iter().enumerate() {
        let l = layout.clone();
        let ms = Arc::clone(models);
        if block == 0 {
            problem.add_inequality(
                format!("first block compress-and-transmit (device {i})"),
                move |s: &[f64], g: &mut [f64]| {
                    let ((cp, dcp), (tx, dtx)) = times(&ms[i], &l, ctx, s, i);
                    g[l.z(i)] = dtx[0];
                    g[l.u(i)] = dcp + dtx[1];
                    g[l.theta(0)] = -1.0;
                    cp + tx - s[l.theta(0)]
                },
            );
            continue;
        }
        if layout.scheme.compresses() {
            let l = layout.clone();
            let ms = Arc::clone(models);
            problem.add_inequality(
                format!("cumulative compression window (device {i})"),
                move |s: &[f64], g: &mut [f64]| {
                    let ((cp, dcp), _) = times(&ms[i], &l, ctx, s, i);
                    g[l.u(i)] = dcp;
                    let mut elapsed = 0.0;
                    for k in 0..block {
                        g[l.theta(k)] = -1.0;
                        elapsed += s[l.theta(k)];
                    }
                    cp - elapsed
                },
            );
        }
        problem.add_inequality(
            format!("transmission block (device {i})"),
            move |s: &[f64], g: &mut [f64]| {
                let (_, (tx, dtx)) = times(&ms[i], &l, ctx, s, i);
                g[l.z(i)] = dtx[0];
                g[l.u(i)] = dtx[1];
                g[l.theta(block)] = -1.0;
                tx - s[l.theta(block)]
            },
        );
    }
}

fn build_fixed(
    scenario: &Scenario,
    assignment: &Assignment,
    objective: ObjectiveKind,
    scheme: SchemeKind,
) -> Result<BuiltProblem> {
    if assignment.n() != scenario.n() {
        return Err(Error::DimensionMismatch(format!(
            "sequence of length {} for {} devices",
            assignment.n(),
            scenario.n()
        )));
    }
    let models = models_for(scenario)?;
    let layout = Layout {
        n: scenario.n(),
        objective,
        scheme,
        assignment: Some(assignment.clone()),
        has_x: false,
        has_t: objective == ObjectiveKind::MinMax,
    };
    let (lo, hi, start) = skeleton(scenario, &models, &layout);
    let mut problem = attach_objective(&layout, &models, lo, hi, start, None);
    let ctx = Ctx {
        inv_t: 1.0 / scenario.t_frame(),
    };
    add_sequence_constraints(&mut problem, &layout, &models, ctx, &assignment.perm);
    Ok(BuiltProblem {
        problem,
        layout,
        models,
        t_frame: scenario.t_frame(),
    })
}

/// Block lengths, compression and power for a fixed sequence.
pub fn build_fixed_sequence(
    scenario: &Scenario,
    assignment: &Assignment,
    objective: ObjectiveKind,
) -> Result<BuiltProblem> {
    build_fixed(scenario, assignment, objective, SchemeKind::SubOptimal)
}

/// Uncompressed transmission: block lengths and power only.
pub fn build_benchmark(
    scenario: &Scenario,
    assignment: &Assignment,
    objective: ObjectiveKind,
) -> Result<BuiltProblem> {
    build_fixed(scenario, assignment, objective, SchemeKind::Benchmark)
}

/// Equal blocks `T_frame/N` with a fixed sequence.
pub fn build_case1(
    scenario: &Scenario,
    assignment: &Assignment,
    objective: ObjectiveKind,
) -> Result<BuiltProblem> {
    build_fixed(scenario, assignment, objective, SchemeKind::Case1)
}

/// Builder for a fixed sequence under any scheme (Optimal is treated like
/// SubOptimal and Case2 like Case1 once the sequence is fixed).
pub fn build_for_scheme(
    scenario: &Scenario,
    scheme: SchemeKind,
    assignment: &Assignment,
    objective: ObjectiveKind,
) -> Result<BuiltProblem> {
    let scheme = match scheme {
        SchemeKind::Optimal => SchemeKind::SubOptimal,
        SchemeKind::Case2 => SchemeKind::Case1,
        s => s,
    };
    build_fixed(scenario, assignment, objective, scheme)
}

fn check_reference(x_ref: &[Vec<f64>], n: usize, lambda: f64) -> Result<()> {
    if x_ref.len() != n || x_ref.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("reference assignment must be {n}x{n}")));
    }
    if x_ref.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::validation("x_ref", "entries must lie in [0, 1]"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::validation("lambda", "must be finite and >= 0"));
    }
    Ok(())
}

fn build_relaxed(
    scenario: &Scenario,
    objective: ObjectiveKind,
    x_ref: &[Vec<f64>],
    lambda: f64,
    scheme: SchemeKind,
) -> Result<BuiltProblem> {
    let n = scenario.n();
    check_reference(x_ref, n, lambda)?;
    let models = models_for(scenario)?;
    let layout = Layout {
        n,
        objective,
        scheme,
        assignment: None,
        has_x: true,
        has_t: objective == ObjectiveKind::MinMax,
    };
    let (lo, hi, start) = skeleton(scenario, &models, &layout);
    let mut problem = attach_objective(
        &layout,
        &models,
        lo,
        hi,
        start,
        Some((x_ref.to_vec(), lambda)),
    );
    let ctx = Ctx {
        inv_t: 1.0 / scenario.t_frame(),
    };
    for i in 0..n {
        let l = layout.clone();
        let ms = Arc::clone(&models);
        problem.add_inequality(
            format!("first block compress-and-transmit (device {i})"),
            move |s: &[f64], g: &mut [f64]| {
                let ((cp, dcp), (tx, dtx)) = times(&ms[i], &l, ctx, s, i);
                let x = s[l.x(0, i)];
                g[l.x(0, i)] = cp + tx;
                g[l.z(i)] = x * dtx[0];
                g[l.u(i)] = x * (dcp + dtx[1]);
                g[l.theta(0)] = -1.0;
                x * (cp + tx) - s[l.theta(0)]
            },
        );
        if n == 1 {
            continue;
        }
        let l = layout.clone();
        let ms = Arc::clone(&models);
        problem.add_inequality(
            format!("cumulative compression window (device {i})"),
            move |s: &[f64], g: &mut [f64]| {
                let ((cp, dcp), _) = times(&ms[i], &l, ctx, s, i);
                let mut val = 0.0;
                let mut xsum = 0.0;
                let mut elapsed = s[l.theta(0)];
                let mut tail = 0.0;
                for b in 1..l.n {
                    let x = s[l.x(b, i)];
                    val += x * (cp - elapsed);
                    g[l.x(b, i)] = cp - elapsed;
                    xsum += x;
                    elapsed += s[l.theta(b)];
                }
                // d/d theta_k = -sum_{b > k, b >= 1} x_{b,i}
                for k in (0..l.n - 1).rev() {
                    tail += s[l.x(k + 1, i)];
                    g[l.theta(k)] = -tail;
                }
                g[l.u(i)] = xsum * dcp;
                val
            },
        );
        let l = layout.clone();
        let ms = Arc::clone(&models);
        problem.add_inequality(
            format!("transmission block (device {i})"),
            move |s: &[f64], g: &mut [f64]| {
                let (_, (tx, dtx)) = times(&ms[i], &l, ctx, s, i);
                let mut val = 0.0;
                let mut xsum = 0.0;
                for b in 1..l.n {
                    let x = s[l.x(b, i)];
                    val += x * (tx - s[l.theta(b)]);
                    g[l.x(b, i)] = tx - s[l.theta(b)];
                    g[l.theta(b)] = -x;
                    xsum += x;
                }
                g[l.z(i)] = xsum * dtx[0];
                g[l.u(i)] = xsum * dtx[1];
                val
            },
        );
    }
    // Each block holds one device, each device one block. The last column
    // sum follows from the others.
    let nv = layout.n_vars();
    for b in 0..n {
        let mut row = vec![0.0; nv];
        (0..n).for_each(|i| row[layout.x(b, i)] = 1.0);
        problem.add_equality(row, 1.0);
    }
    for i in 0..n.saturating_sub(1) {
        let mut row = vec![0.0; nv];
        (0..n).for_each(|b| row[layout.x(b, i)] = 1.0);
        problem.add_equality(row, 1.0);
    }
    Ok(BuiltProblem {
        problem,
        layout,
        models,
        t_frame: scenario.t_frame(),
    })
}

/// Relaxed-assignment problem with the linearized penalty
/// `lambda * sum[x (1 - 2 x_ref) + x_ref^2]`.
pub fn build_penalized(
    scenario: &Scenario,
    objective: ObjectiveKind,
    x_ref: &[Vec<f64>],
    lambda_penalty: f64,
) -> Result<BuiltProblem> {
    build_relaxed(scenario, objective, x_ref, lambda_penalty, SchemeKind::Optimal)
}

/// Relaxed-assignment problem with the blocks fixed at `T_frame/N`.
pub fn build_case2_subproblem(
    scenario: &Scenario,
    objective: ObjectiveKind,
    x_ref: &[Vec<f64>],
    lambda_penalty: f64,
) -> Result<BuiltProblem> {
    build_relaxed(scenario, objective, x_ref, lambda_penalty, SchemeKind::Case2)
}

/// Linearized penalty value at `x` around `x_ref`.
pub fn linearized_penalty(x: &[Vec<f64>], x_ref: &[Vec<f64>]) -> f64 {
    x.iter()
        .flatten()
        .zip(x_ref.iter().flatten())
        .map(|(x, r)| x * (1.0 - 2.0 * r) + r * r)
        .sum()
}

/// Reads a fixed-sequence point into a policy and audits it.
pub fn decode(point: &[f64], built: &BuiltProblem, scenario: &Scenario) -> Result<Policy> {
    let l = &built.layout;
    let assignment = l
        .assignment
        .clone()
        .ok_or_else(|| Error::Domain("relaxed-assignment points decode via the sequencer".into()))?;
    if point.len() != l.n_vars() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} entries, problem has {}",
            point.len(),
            l.n_vars()
        )));
    }
    let t_frame = scenario.t_frame();
    let mut blocks: Vec<f64> = (0..l.n).map(|k| point[l.theta(k)] * t_frame).collect();
    // the equality holds to roundoff; put the residue on the longest block
    let resid = t_frame - blocks.iter().sum::<f64>();
    let longest = (0..l.n).fold(0, |a, k| if blocks[k] > blocks[a] { k } else { a });
    blocks[longest] += resid;
    let mut decisions = Vec::with_capacity(l.n);
    let mut physical = Vec::with_capacity(l.n);
    for (i, m) in built.models.iter().enumerate() {
        let v = m.ln_packet() + point[l.u(i)];
        let d_cp = v.exp().clamp(m.d_min_bits, m.packet_bits);
        let z = point[l.z(i)].min(m.z_max());
        let d = DeviceDecision::from_size(z, d_cp);
        physical.push(m.physical(&d)?);
        decisions.push(d);
    }
    let energies: Vec<f64> = physical.iter().map(|p| p.energy).collect();
    let policy = Policy {
        blocks,
        decisions,
        assignment,
        objective_value: l.objective.evaluate(&energies),
        energies,
        objective: l.objective,
        physical,
    };
    policy.audit(scenario)?;
    Ok(policy)
}

/// Solve report plus the decoded policy of a fixed-sequence problem.
#[derive(Debug, Clone)]
pub struct FixedSolve {
    pub policy: Policy,
    pub report: SolveReport,
}

/// Solves a built fixed-sequence problem, retrying once with tightened
/// barrier settings when the first attempt neither converges nor proves
/// infeasibility.
pub fn solve_built(built: &BuiltProblem, scenario: &Scenario, opts: &SolverOptions) -> Result<FixedSolve> {
    let mut report = solve(&built.problem, opts);
    if matches!(report.status, SolveStatus::IterationLimit | SolveStatus::NumericalFailure) {
        let retry = solve(&built.problem, &opts.tightened());
        if retry.status == SolveStatus::Optimal || retry.kkt_residual < report.kkt_residual {
            report = retry;
        }
    }
    match report.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible(format!(
                "timing constraints cannot be met at T_frame = {:.6} s (violation {:.3e})",
                scenario.t_frame(),
                report.elastic_violation
            )))
        }
        s => {
            return Err(Error::Solver(format!(
                "{s:?} after {} iterations, KKT residual {:.3e}",
                report.iterations, report.kkt_residual
            )))
        }
    }
    let policy = decode(&report.point, built, scenario)?;
    Ok(FixedSolve { policy, report })
}

/// Builds and solves a fixed-sequence problem for `scheme`.
pub fn solve_fixed(
    scenario: &Scenario,
    scheme: SchemeKind,
    assignment: &Assignment,
    objective: ObjectiveKind,
    opts: &SolverOptions,
) -> Result<FixedSolve> {
    let built = build_for_scheme(scenario, scheme, assignment, objective)?;
    solve_built(&built, scenario, opts)
}

/// Worst gradient error of one builder and objective over the sampled points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub builder: &'static str,
    pub objective: ObjectiveKind,
    pub points: usize,
    pub worst: f64,
}

/// Uniform point strictly inside the box, with unbounded sides capped 50 above the lower bound.
fn interior_point(built: &BuiltProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = &built.problem;
    (0..p.n_vars())
        .map(|k| {
            let (lo, hi) = (p.lower[k], p.upper[k].min(p.lower[k] + 50.0));
            if lo == hi {
                lo
            } else {
                lo + (hi - lo) * rng.random_range(0.05..0.95)
            }
        })
        .collect()
}

/// Compares every objective and constraint gradient of every builder against
/// central differences at `points` random interior points. The sequence and
/// the reference assignment are drawn from `seed`.
pub fn gradient_suite(scenario: &Scenario, points: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let n = scenario.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let a = Assignment::from_perm(perm)?;
    let x_ref: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut out = Vec::new();
    for obj in ObjectiveKind::ALL {
        let builds = [
            ("fixed sequence", build_fixed_sequence(scenario, &a, obj)?),
            ("benchmark", build_benchmark(scenario, &a, obj)?),
            ("case1", build_case1(scenario, &a, obj)?),
            ("penalized", build_penalized(scenario, obj, &x_ref, 200.0)?),
            ("case2", build_case2_subproblem(scenario, obj, &x_ref, 200.0)?),
        ];
        for (name, b) in &builds {
            let worst = (0..points)
                .map(|_| check_gradients(&b.problem, &interior_point(b, &mut rng)))
                .fold(0.0, f64::max);
            out.push(GradientCheck {
                builder: name,
                objective: obj,
                points,
                worst,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ChannelRealization, DeviceSpec, SystemParams};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
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
    fn gradients_of_every_builder() {
        let sc = fleet(&[(310.0, 40.0), (500.0, 15.0), (100.0, 31.0)], 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Assignment::from_perm(vec![2, 0, 1]).unwrap();
        let xr = vec![vec![0.2, 0.7, 0.1], vec![0.5, 0.5, 0.0], vec![0.3, 0.3, 0.4]];
        for obj in ObjectiveKind::ALL {
            let builds = [
                build_fixed_sequence(&sc, &a, obj).unwrap(),
                build_benchmark(&sc, &a, obj).unwrap(),
                build_case1(&sc, &a, obj).unwrap(),
                build_penalized(&sc, obj, &xr, 200.0).unwrap(),
                build_case2_subproblem(&sc, obj, &xr, 200.0).unwrap(),
            ];
            for b in &builds {
                for _ in 0..20 {
                    let s = interior_point(b, &mut rng);
                    let err = check_gradients(&b.problem, &s);
                    assert!(err < 1e-6, "{obj:?} {:?}: {err}", b.layout.scheme);
                }
            }
        }
    }

    #[test]
    fn penalty_linearization_identities() {
        let xr = vec![vec![0.3, 0.7], vec![0.9, 0.1]];
        let direct: f64 = xr.iter().flatten().map(|r| r - r * r).sum();
        assert!((linearized_penalty(&xr, &xr) - direct).abs() < 1e-15);
        let half = vec![vec![0.5; 3]; 3];
        for x in [vec![vec![0.0; 3]; 3], vec![vec![1.0; 3]; 3]] {
            assert!((linearized_penalty(&x, &half) - 9.0 / 4.0).abs() < 1e-15);
        }
        assert_eq!(linearized_penalty(&[vec![0.0]], &[vec![1.0]]), 1.0);
    }

    #[test]
    fn single_device_uses_the_whole_frame() {
        // tight enough that the energy-optimal rate cannot be used
        let sc = fleet(&[(310.0, 40.0)], 0.03);
        for obj in ObjectiveKind::ALL {
            let r = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::identity(1), obj, &SolverOptions::default());
            let r = r.unwrap_or_else(|e| panic!("{obj:?}: {e}"));
            let ph = r.policy.physical[0];
            assert!((r.policy.blocks[0] - 0.03).abs() < 1e-12);
            assert!(ph.t_cp + ph.t_tx > 0.03 * (1.0 - 1e-6), "{obj:?} {ph:?}");
        }
    }

    #[test]
    fn identical_devices_are_interchangeable() {
        let sc = fleet(&[(200.0, 30.0), (200.0, 30.0)], 0.08);
        let opts = SolverOptions::default();
        let a = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::from_perm(vec![0, 1]).unwrap(), ObjectiveKind::Sum, &opts).unwrap();
        let b = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::from_perm(vec![1, 0]).unwrap(), ObjectiveKind::Sum, &opts).unwrap();
        assert!(rel(a.policy.objective_value, b.policy.objective_value) < 1e-7);
    }

    #[test]
    fn benchmark_ignores_the_sequence() {
        let sc = Scenario::reference().with_t_frame(0.12).unwrap();
        let opts = SolverOptions::default();
        let a = solve_fixed(&sc, SchemeKind::Benchmark, &Assignment::identity(5), ObjectiveKind::Sum, &opts).unwrap();
        let b = solve_fixed(&sc, SchemeKind::Benchmark, &Assignment::from_perm(vec![4, 2, 0, 3, 1]).unwrap(), ObjectiveKind::Sum, &opts).unwrap();
        assert!(rel(a.policy.objective_value, b.policy.objective_value) < 1e-6);
    }

    #[test]
    fn benchmark_below_capacity_is_infeasible() {
        let sc = Scenario::reference().with_t_frame(0.02).unwrap();
        let r = solve_fixed(&sc, SchemeKind::Benchmark, &Assignment::identity(5), ObjectiveKind::Sum, &SolverOptions::default());
        assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
    }

    #[test]
    fn feasible_set_inclusions() {
        let sc = Scenario::reference().with_t_frame(0.15).unwrap();
        let opts = SolverOptions::default();
        let id = Assignment::identity(5);
        let e = |s| solve_fixed(&sc, s, &id, ObjectiveKind::Sum, &opts).unwrap().policy.objective_value;
        let (so, bm, c1) = (e(SchemeKind::SubOptimal), e(SchemeKind::Benchmark), e(SchemeKind::Case1));
        assert!(so <= bm * (1.0 + 1e-6), "{so} {bm}");
        assert!(so <= c1 * (1.0 + 1e-6), "{so} {c1}");
    }

    #[test]
    fn minmax_epigraph_is_tight_and_bounds_hold() {
        let sc = Scenario::reference().with_t_frame(0.15).unwrap();
        let opts = SolverOptions::default();
        let id = Assignment::identity(5);
        let built = build_fixed_sequence(&sc, &id, ObjectiveKind::MinMax).unwrap();
        let mm = solve_built(&built, &sc, &opts).unwrap();
        let t = mm.report.point[built.layout.t()] / ENERGY_SCALE;
        assert!(rel(t, mm.policy.objective_value) < 1e-8, "{t} {}", mm.policy.objective_value);
        let sum = solve_fixed(&sc, SchemeKind::SubOptimal, &id, ObjectiveKind::Sum, &opts).unwrap();
        let n = 5.0;
        assert!(sum.policy.objective_value <= n * mm.policy.objective_value * (1.0 + 1e-7));
        assert!(mm.policy.objective_value <= sum.policy.objective_value);
    }

    #[test]
    fn longer_frames_never_cost_more() {
        let id = Assignment::identity(5);
        let opts = SolverOptions::default();
        for obj in ObjectiveKind::ALL {
            let mut last = f64::INFINITY;
            for t in [0.08, 0.1, 0.14, 0.2] {
                let sc = Scenario::reference().with_t_frame(t).unwrap();
                let v = solve_fixed(&sc, SchemeKind::SubOptimal, &id, obj, &opts).unwrap().policy.objective_value;
                assert!(v <= last + 1e-7 * last.abs().max(1.0), "{obj:?} at {t}: {v} > {last}");
                last = v;
            }
        }
    }

    #[test]
    fn audit_names_the_compression_window() {
        let sc = Scenario::reference().with_t_frame(0.12).unwrap();
        let id = Assignment::identity(5);
        let mut r = solve_fixed(&sc, SchemeKind::SubOptimal, &id, ObjectiveKind::Sum, &SolverOptions::default()).unwrap();
        r.policy.audit(&sc).unwrap();
        // move 1 ms from block 0 to block 1 and make device 1's compression
        // take until the old boundary
        let ph = r.policy.physical[1];
        r.policy.blocks[0] = ph.t_cp - 1e-3;
        let rest = 0.12 - r.policy.blocks[0];
        let others: f64 = r.policy.blocks[1..].iter().sum();
        for b in r.policy.blocks[1..].iter_mut() {
            *b *= rest / others;
        }
        match r.policy.audit(&sc) {
            Err(Error::Audit { constraint, slack }) => {
                assert!(constraint == "cumulative compression window" || constraint == "first block compress-and-transmit", "{constraint}");
                assert!(slack > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pf_energies_agree_across_spaces() {
        let sc = Scenario::reference().with_t_frame(0.12).unwrap();
        let r = solve_fixed(&sc, SchemeKind::SubOptimal, &Assignment::identity(5), ObjectiveKind::ProportionalFair, &SolverOptions::default())
            .unwrap();
        let models = DeviceModel::all(&sc).unwrap();
        for (m, d) in models.iter().zip(&r.policy.decisions) {
            let (ev, _) = m.energy_zv(d.z, d.v);
            let (ed, _) = m.energy_zd(d.z, d.d_cp);
            assert!(rel(ev, ed) < 1e-9);
        }
    }

    #[test]
    fn random_relaxed_points_respect_layout() {
        let sc = fleet(&[(100.0, 20.0), (150.0, 25.0)], 0.1);
        let b = build_penalized(&sc, ObjectiveKind::Sum, &[vec![0.5; 2], vec![0.5; 2]], 200.0).unwrap();
        assert_eq!(b.layout.n_vars(), 2 + 2 + 2 + 4);
        assert_eq!(b.problem.eq_rows.len(), 1 + 2 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = interior_point(&b, &mut rng);
        let (base, resid) = b.split_objective(&s);
        assert!(base > 0.0 && resid > 0.0);
    }
}

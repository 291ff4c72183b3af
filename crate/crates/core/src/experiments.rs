//! Frame-duration sweeps, scheme comparisons, energy-efficiency gains and
//! feasibility boundaries, with CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlpsolver::SolverOptions;
use crate::scenario::{sample_channel, Scenario};
use crate::sequencer::{is_feasible, solve_scheme, SchemeSolution, SequencerOptions};
use crate::subproblems::{ObjectiveKind, SchemeKind};

/// Exact CSV header.
pub const CSV_COLUMNS: [&str; 14] = [
    "t_frame_s",
    "scheme",
    "objective",
    "feasible",
    "system_energy_J",
    "energy_mJ",
    "min_device_energy_J",
    "max_device_energy_J",
    "gain_vs_benchmark",
    "gain_vs_suboptimal",
    "iterations",
    "runtime_ms",
    "channel_mode",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMode {
    /// The scenario's own gains.
    Fixed,
    /// One exponential draw with this seed.
    Seeded(u64),
    /// `count` draws with seeds `base_seed + k`.
    MonteCarlo { count: usize, base_seed: u64 },
}

impl ChannelMode {
    fn label(&self) -> &'static str {
        match self {
            ChannelMode::Fixed => "fixed",
            ChannelMode::Seeded(_) => "seeded",
            ChannelMode::MonteCarlo { .. } => "mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Frame durations, seconds, strictly increasing.
    pub t_frame_grid: Vec<f64>,
    pub schemes: Vec<SchemeKind>,
    pub objectives: Vec<ObjectiveKind>,
    pub channel_mode: ChannelMode,
    pub sequencer: SequencerOptions,
    /// Record wall-clock time per point. Off by default so output files are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl SweepSpec {
    pub fn new(
        t_frame_grid: Vec<f64>,
        schemes: Vec<SchemeKind>,
        objectives: Vec<ObjectiveKind>,
        channel_mode: ChannelMode,
    ) -> Result<Self> {
        let spec = SweepSpec {
            t_frame_grid,
            schemes,
            objectives,
            channel_mode,
            sequencer: SequencerOptions::default(),
            timing: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_frame_grid.is_empty() {
            return Err(Error::validation("grid", "must contain at least one frame duration"));
        }
        if self.t_frame_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::validation("grid", "frame durations must be finite and > 0"));
        }
        if self.t_frame_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("grid", "must be strictly increasing"));
        }
        if self.schemes.is_empty() || self.objectives.is_empty() {
            return Err(Error::validation("schemes", "need at least one scheme and one objective"));
        }
        if let ChannelMode::MonteCarlo { count: 0, .. } = self.channel_mode {
            return Err(Error::validation("mc", "realization count must be >= 1"));
        }
        Ok(())
    }
}

/// `lo, lo + step, ...` up to `hi` inclusive (within a part in 1e9 of a step).
pub fn frame_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && step > 0.0) || !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::validation("grid", "needs 0 < lo <= hi and step > 0"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(Error::validation("grid", "more than 10^6 points"));
    }
    Ok((0..count).map(|k| lo + k as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_frame: f64,
    pub scheme: SchemeKind,
    pub objective: ObjectiveKind,
    pub feasible: bool,
    /// Sum of device energies, joules. Present iff feasible. In `mc_stderr`
    /// rows this holds the standard error of the mean.
    pub system_energy: Option<f64>,
    pub per_device_energy: Vec<f64>,
    pub objective_value: Option<f64>,
    /// Energy-efficiency gain of this row's scheme over each other scheme.
    pub gain_vs: BTreeMap<SchemeKind, f64>,
    pub iterations: usize,
    pub runtime_ms: Option<f64>,
    /// `fixed`, `seeded`, `mc`, `mc_mean` or `mc_stderr`.
    pub channel_mode: String,
    pub seed: Option<u64>,
    /// Block order (device indices) of the solution.
    pub sequence: Option<Vec<usize>>,
    /// Why the point has no solution, if it has none.
    pub failure: Option<String>,
}

impl SweepRow {
    fn per_device(&self, f: fn(f64, f64) -> f64) -> Option<f64> {
        self.per_device_energy.iter().copied().reduce(f)
    }
}

/// Relative energy saving of `e_a` over `e_b`: `(e_b - e_a)/e_b`.
pub fn gain(e_a: f64, e_b: f64) -> Result<f64> {
    if !(e_b > 0.0) {
        return Err(Error::Domain(format!("reference energy {e_b} must be > 0")));
    }
    Ok((e_b - e_a) / e_b)
}

#[derive(Clone)]
struct Task {
    realization: usize,
    seed: Option<u64>,
    t_frame: f64,
    objective: ObjectiveKind,
    scheme: SchemeKind,
}

fn solve_point(scenario: &Scenario, task: &Task, opts: &SequencerOptions) -> Result<SchemeSolution> {
    let sc = scenario.with_t_frame(task.t_frame)?;
    match solve_scheme(&sc, task.scheme, task.objective, opts) {
        Err(Error::Solver(_)) => {
            let tight = SequencerOptions {
                solver: opts.solver.tightened(),
                ..*opts
            };
            solve_scheme(&sc, task.scheme, task.objective, &tight)
        }
        other => other,
    }
}

/// One row per (frame, scheme, objective, realization), ordered by
/// realization, frame, objective and scheme. Monte-Carlo sweeps append
/// `mc_mean` and `mc_stderr` rows per (frame, scheme, objective).
pub fn run_sweep(scenario: &Scenario, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let realizations: Vec<(Scenario, Option<u64>)> = match spec.channel_mode {
        ChannelMode::Fixed => vec![(scenario.clone(), scenario.channel.seed)],
        ChannelMode::Seeded(seed) => {
            vec![(scenario.with_channel(sample_channel(scenario, seed))?, Some(seed))]
        }
        ChannelMode::MonteCarlo { count, base_seed } => (0..count)
            .map(|k| {
                let seed = base_seed + k as u64;
                Ok((scenario.with_channel(sample_channel(scenario, seed))?, Some(seed)))
            })
            .collect::<Result<_>>()?,
    };
    let mut tasks = Vec::new();
    for (r, (_, seed)) in realizations.iter().enumerate() {
        for &t_frame in &spec.t_frame_grid {
            for &objective in &spec.objectives {
                for &scheme in &spec.schemes {
                    tasks.push(Task {
                        realization: r,
                        seed: *seed,
                        t_frame,
                        objective,
                        scheme,
                    });
                }
            }
        }
    }
    let label = spec.channel_mode.label();
    let mut rows: Vec<SweepRow> = tasks
        .par_iter()
        .map(|task| {
            let started = Instant::now();
            let outcome = solve_point(&realizations[task.realization].0, task, &spec.sequencer);
            let runtime_ms = spec.timing.then(|| started.elapsed().as_secs_f64() * 1e3);
            let mut row = SweepRow {
                t_frame: task.t_frame,
                scheme: task.scheme,
                objective: task.objective,
                feasible: false,
                system_energy: None,
                per_device_energy: Vec::new(),
                objective_value: None,
                gain_vs: BTreeMap::new(),
                iterations: 0,
                runtime_ms,
                channel_mode: label.to_string(),
                seed: task.seed,
                sequence: None,
                failure: None,
            };
            match outcome {
                Ok(sol) => {
                    row.feasible = true;
                    row.system_energy = Some(sol.policy.system_energy());
                    row.per_device_energy = sol.policy.energies.clone();
                    row.objective_value = Some(sol.policy.objective_value);
                    row.iterations = sol.iterations;
                    row.sequence = Some(sol.policy.assignment.perm.clone());
                }
                Err(e) => row.failure = Some(e.to_string()),
            }
            row
        })
        .collect();

    // gains within each (realization, frame, objective) group
    let group = spec.schemes.len();
    for chunk in rows.chunks_mut(group) {
        let energies: Vec<(SchemeKind, f64)> = chunk
            .iter()
            .filter_map(|r| r.system_energy.map(|e| (r.scheme, e)))
            .collect();
        for row in chunk.iter_mut() {
            let Some(e_a) = row.system_energy else { continue };
            for &(other, e_b) in &energies {
                if other != row.scheme {
                    if let Ok(g) = gain(e_a, e_b) {
                        row.gain_vs.insert(other, g);
                    }
                }
            }
        }
    }

    if let ChannelMode::MonteCarlo { count, .. } = spec.channel_mode {
        let per_real = rows.len() / count;
        let mut summary = Vec::new();
        for k in 0..per_real {
            let same: Vec<&SweepRow> = (0..count).map(|r| &rows[r * per_real + k]).collect();
            summary.extend(mc_summary(&same));
        }
        rows.extend(summary);
    }
    Ok(rows)
}

/// Mean and standard error of the system energy over feasible realizations.
fn mc_summary(rows: &[&SweepRow]) -> [SweepRow; 2] {
    let first = rows[0];
    let energies: Vec<f64> = rows.iter().filter_map(|r| r.system_energy).collect();
    let k = energies.len();
    let mean = (k > 0).then(|| energies.iter().sum::<f64>() / k as f64);
    let stderr = mean.map(|m| {
        if k < 2 {
            0.0
        } else {
            let var = energies.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        }
    });
    let make = |label: &str, value: Option<f64>| SweepRow {
        t_frame: first.t_frame,
        scheme: first.scheme,
        objective: first.objective,
        feasible: k > 0,
        system_energy: value,
        per_device_energy: Vec::new(),
        objective_value: None,
        gain_vs: BTreeMap::new(),
        iterations: rows.iter().map(|r| r.iterations).sum(),
        runtime_ms: None,
        channel_mode: label.to_string(),
        seed: None,
        sequence: None,
        failure: (k == 0).then(|| "no feasible realization".to_string()),
    };
    [make("mc_mean", mean), make("mc_stderr", stderr)]
}

/// Shortest feasible frame for `scheme`, by bisection on `[t_lo, t_hi]` to
/// within `tol` seconds. Requires infeasibility at `t_lo` and feasibility at
/// `t_hi`.
pub fn feasibility_boundary(
    scenario: &Scenario,
    scheme: SchemeKind,
    t_lo: f64,
    t_hi: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    if !(t_lo > 0.0 && t_hi > t_lo && tol > 0.0) {
        return Err(Error::Bracket(format!("need 0 < t_lo < t_hi and tol > 0, got [{t_lo}, {t_hi}], {tol}")));
    }
    let feasible = |t: f64| -> Result<bool> { is_feasible(&scenario.with_t_frame(t)?, scheme, opts) };
    if feasible(t_lo)? {
        return Err(Error::Bracket(format!("{scheme} is already feasible at {t_lo} s")));
    }
    if !feasible(t_hi)? {
        return Err(Error::Bracket(format!("{scheme} is infeasible at {t_hi} s")));
    }
    let (mut lo, mut hi) = (t_lo, t_hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

struct Cell(Option<f64>);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => Ok(()),
        }
    }
}

/// Writes rows with the [`CSV_COLUMNS`] header. Floats use the shortest
/// representation that round-trips.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let record = [
            r.t_frame.to_string(),
            r.scheme.name().to_string(),
            r.objective.name().to_string(),
            r.feasible.to_string(),
            Cell(r.system_energy).to_string(),
            Cell(r.system_energy.map(|e| e * 1e3)).to_string(),
            Cell(r.per_device(f64::min)).to_string(),
            Cell(r.per_device(f64::max)).to_string(),
            Cell(r.gain_vs.get(&SchemeKind::Benchmark).copied()).to_string(),
            Cell(r.gain_vs.get(&SchemeKind::SubOptimal).copied()).to_string(),
            r.iterations.to_string(),
            Cell(r.runtime_ms).to_string(),
            r.channel_mode.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ];
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// A gnuplot script plotting energy (mJ) against frame duration (ms), one
/// curve per scheme, for every objective present in `rows`.
pub fn gnuplot_script(csv_name: &str, rows: &[SweepRow]) -> String {
    let mut schemes: Vec<SchemeKind> = rows.iter().map(|r| r.scheme).collect();
    schemes.sort();
    schemes.dedup();
    let mut objectives: Vec<ObjectiveKind> = rows.iter().map(|r| r.objective).collect();
    objectives.sort();
    objectives.dedup();
    let mode = if rows.iter().any(|r| r.channel_mode == "mc_mean") {
        "mc_mean"
    } else {
        rows.first().map_or("fixed", |r| r.channel_mode.as_str())
    };
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str("set xlabel 'Frame duration (ms)'\n");
    s.push_str("set ylabel 'System energy (mJ)'\n");
    s.push_str("set grid\n");
    for obj in &objectives {
        s.push_str(&format!(
            "set title 'System energy vs frame duration ({obj}, channel: {mode})'\n"
        ));
        let curves: Vec<String> = schemes
            .iter()
            .map(|sch| {
                format!(
                    "'{csv_name}' using ($1*1000):((strcol(2) eq '{sch}' && strcol(3) eq '{obj}' && strcol(13) eq '{mode}') ? $6 : 1/0) with linespoints title '{sch}'"
                )
            })
            .collect();
        s.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
        s.push_str("pause -1\n");
    }
    s
}

/// Writes `rows` to `path` and the plot script next to it (`.gp`).
pub fn write_outputs(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(file))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("sweep.csv");
    std::fs::write(path.with_extension("gp"), gnuplot_script(name, rows))?;
    Ok(())
}

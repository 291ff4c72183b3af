//! `seqsched` command-line front end.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 infeasible, 3 solver
//! failure, 4 configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use seqsched::experiments::{frame_grid, write_outputs, CSV_COLUMNS};
use seqsched::sequencer::{exhaustive_oracle_with, penalty_iteration, solve_scheme, SequencerOptions, ORACLE_CAP};
use seqsched::subproblems::gradient_suite;
use seqsched::{
    load_scenario_file, run_sweep, sample_channel, ChannelMode, Error, ObjectiveKind, Policy, Scenario, SchemeKind,
    SweepSpec,
};

/// Gradient-check threshold (normwise relative error).
const GRAD_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "seqsched", version, about = "Energy-minimal TDMA sequencing and scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one scheme at one frame duration and print the policy.
    Solve(SolveArgs),
    /// Sweep frame durations and write a CSV (or JSON) table.
    Sweep(SweepArgs),
    /// Compare the penalty iteration with exhaustive search.
    Oracle(OracleArgs),
    /// Solve all five schemes at one frame duration.
    Compare(CompareArgs),
    /// Check every builder's gradients against finite differences.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's frame duration.
    #[arg(long = "t-frame-ms")]
    t_frame_ms: Option<f64>,
    /// Draw the channel gains from this seed instead of using the scenario's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PenaltyArgs {
    #[arg(long, default_value_t = 200.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[arg(long, default_value = "sum")]
    objective: ObjectiveKind,
    #[arg(long, default_value = "optimal")]
    scheme: SchemeKind,
    /// Result file.
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    penalty: PenaltyArgs,
    /// Objectives to run (repeatable); all three when omitted.
    #[arg(long)]
    objective: Vec<ObjectiveKind>,
    /// Schemes to run (repeatable); all five when omitted.
    #[arg(long)]
    scheme: Vec<SchemeKind>,
    /// Frame grid in ms, `lo:hi:step`.
    #[arg(long, default_value = "50:250:10")]
    grid: String,
    /// Monte-Carlo realizations with seeds `seed + k` (seed defaults to 0).
    #[arg(long)]
    mc: Option<usize>,
    /// Record wall-clock time per point (makes the output non-reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[arg(long, default_value = "sum")]
    objective: ObjectiveKind,
    /// `optimal` or `case2`.
    #[arg(long, default_value = "optimal")]
    scheme: SchemeKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[arg(long, default_value = "sum")]
    objective: ObjectiveKind,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Random points per builder and objective.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure carried to `main` with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible(_) => 2,
            Error::Solver(_) | Error::Audit { .. } | Error::Bracket(_) => 3,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 4,
        message: format!("config error: {message}"),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("seqsched: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(common: &Common) -> CliResult<Scenario> {
    let mut sc = load_scenario_file(&common.scenario)
        .map_err(|e| config_error(format!("{}: {e}", common.scenario.display())))?;
    if let Some(ms) = common.t_frame_ms {
        sc = sc.with_t_frame(ms * 1e-3)?;
    }
    if let Some(seed) = common.seed {
        sc = sc.with_channel(sample_channel(&sc, seed))?;
    }
    Ok(sc)
}

fn sequencer_options(p: &PenaltyArgs) -> CliResult<SequencerOptions> {
    if !(p.lambda.is_finite() && p.lambda > 0.0) {
        return Err(config_error("--lambda must be finite and > 0"));
    }
    if !(p.epsilon.is_finite() && p.epsilon > 0.0) {
        return Err(config_error("--epsilon must be finite and > 0"));
    }
    Ok(SequencerOptions {
        lambda: p.lambda,
        epsilon: p.epsilon,
        ..SequencerOptions::default()
    })
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("result serializes");
    s.push('\n');
    s
}

fn dbm(watts: f64) -> f64 {
    10.0 * (watts * 1e3).log10()
}

/// Policy in the units of the printed report; full precision.
#[derive(Serialize)]
struct PolicyReport {
    scheme: SchemeKind,
    objective: ObjectiveKind,
    t_frame_s: f64,
    /// 1-based device numbers in block order.
    sequence: Vec<usize>,
    /// Block lengths, seconds, in block order.
    blocks_s: Vec<f64>,
    /// Per device from here on.
    compressed_bits: Vec<f64>,
    compression_ratio: Vec<f64>,
    power_w: Vec<f64>,
    power_dbm: Vec<f64>,
    rate_bps: Vec<f64>,
    energy_j: Vec<f64>,
    system_energy_j: f64,
    objective_value: f64,
    iterations: usize,
    warnings: Vec<String>,
}

impl PolicyReport {
    fn new(sc: &Scenario, scheme: SchemeKind, p: &Policy, iterations: usize, warnings: Vec<String>) -> Self {
        PolicyReport {
            scheme,
            objective: p.objective,
            t_frame_s: sc.t_frame(),
            sequence: p.assignment.perm.iter().map(|i| i + 1).collect(),
            blocks_s: p.reported_blocks(),
            compressed_bits: p.decisions.iter().map(|d| d.d_cp).collect(),
            compression_ratio: p
                .decisions
                .iter()
                .zip(&sc.devices)
                .map(|(d, dev)| d.d_cp / dev.packet_bits)
                .collect(),
            power_w: p.physical.iter().map(|ph| ph.p_tx_amp).collect(),
            power_dbm: p.physical.iter().map(|ph| dbm(ph.p_tx_amp)).collect(),
            rate_bps: p.physical.iter().map(|ph| ph.rate).collect(),
            energy_j: p.energies.clone(),
            system_energy_j: p.system_energy(),
            objective_value: p.objective_value,
            iterations,
            warnings,
        }
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let seq: Vec<String> = self.sequence.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            s,
            "scheme {}  objective {}  T_frame {:.3} ms",
            self.scheme,
            self.objective,
            self.t_frame_s * 1e3
        );
        let _ = writeln!(s, "sequence: {}", seq.join(" "));
        let blocks: Vec<String> = self.blocks_s.iter().map(|t| format!("{:.3}", t * 1e3)).collect();
        let _ = writeln!(s, "blocks (ms): {}", blocks.join(" "));
        let _ = writeln!(s, "{:>6} {:>10} {:>11} {:>12}", "device", "cp ratio", "power dBm", "energy mJ");
        for i in 0..self.energy_j.len() {
            let _ = writeln!(
                s,
                "{:>6} {:>10.4} {:>11.3} {:>12.5}",
                i + 1,
                self.compression_ratio[i],
                self.power_dbm[i],
                self.energy_j[i] * 1e3
            );
        }
        let _ = writeln!(s, "system energy: {:.5} mJ", self.system_energy_j * 1e3);
        let _ = writeln!(s, "objective ({}): {:.9}", self.objective, self.objective_value);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    fn csv(&self) -> String {
        let mut s = String::from("device,block,block_s,compressed_bits,compression_ratio,power_w,power_dbm,rate_bps,energy_j\n");
        for (block, &dev) in self.sequence.iter().enumerate() {
            let i = dev - 1;
            let _ = writeln!(
                s,
                "{dev},{},{},{},{},{},{},{},{}",
                block + 1,
                self.blocks_s[block],
                self.compressed_bits[i],
                self.compression_ratio[i],
                self.power_w[i],
                self.power_dbm[i],
                self.rate_bps[i],
                self.energy_j[i]
            );
        }
        s
    }
}

fn cmd_solve(a: SolveArgs) -> CliResult<()> {
    let sc = load(&a.common)?;
    let opts = sequencer_options(&a.penalty)?;
    let sol = solve_scheme(&sc, a.scheme, a.objective, &opts)?;
    let report = PolicyReport::new(&sc, a.scheme, &sol.policy, sol.iterations, sol.warnings);
    print!("{}", report.render());
    let body = match a.format {
        Format::Json => to_json(&report),
        Format::Csv => report.csv(),
    };
    write_file(&a.out, &body)
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| config_error(format!("--grid {text:?}: expected lo:hi:step in ms")))?;
    let [lo, hi, step] = nums[..] else {
        return Err(config_error(format!("--grid {text:?}: expected lo:hi:step in ms")));
    };
    Ok(frame_grid(lo * 1e-3, hi * 1e-3, step * 1e-3)?)
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let sc = load(&Common {
        seed: None,
        ..a.common
    })?;
    let grid = parse_grid(&a.grid)?;
    let schemes = if a.scheme.is_empty() { SchemeKind::ALL.to_vec() } else { a.scheme };
    let objectives = if a.objective.is_empty() { ObjectiveKind::ALL.to_vec() } else { a.objective };
    let mode = match (a.mc, a.common.seed) {
        (Some(count), seed) => ChannelMode::MonteCarlo {
            count,
            base_seed: seed.unwrap_or(0),
        },
        (None, Some(seed)) => ChannelMode::Seeded(seed),
        (None, None) => ChannelMode::Fixed,
    };
    let mut spec = SweepSpec::new(grid, schemes, objectives, mode)?;
    spec.sequencer = sequencer_options(&a.penalty)?;
    spec.timing = a.timing;
    let rows = run_sweep(&sc, &spec)?;
    match a.format {
        Format::Csv => write_outputs(&rows, &a.out)?,
        Format::Json => write_file(&a.out, &to_json(&rows))?,
    }
    let feasible = rows.iter().filter(|r| r.feasible).count();
    println!(
        "{} rows ({feasible} feasible, {} columns) written to {}",
        rows.len(),
        CSV_COLUMNS.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    objective: ObjectiveKind,
    scheme: SchemeKind,
    t_frame_s: f64,
    penalty_sequence: Vec<usize>,
    penalty_objective: f64,
    penalty_outer_iterations: usize,
    penalty_residual: f64,
    oracle_sequence: Vec<usize>,
    oracle_objective: f64,
    /// (penalty − oracle) / |oracle|.
    relative_gap: f64,
}

fn cmd_oracle(a: OracleArgs) -> CliResult<()> {
    let sc = load(&a.common)?;
    let opts = sequencer_options(&a.penalty)?;
    if !a.scheme.optimizes_sequence() {
        return Err(config_error(format!("--scheme {} has a fixed sequence", a.scheme)));
    }
    let oracle = exhaustive_oracle_with(&sc, a.objective, a.scheme, ORACLE_CAP, &opts.solver)?;
    let pen = penalty_iteration(&sc, a.objective, a.scheme, &opts)?;
    let (p, o) = (pen.policy.objective_value, oracle.policy.objective_value);
    let report = OracleReport {
        objective: a.objective,
        scheme: a.scheme,
        t_frame_s: sc.t_frame(),
        penalty_sequence: pen.policy.assignment.perm.iter().map(|i| i + 1).collect(),
        penalty_objective: p,
        penalty_outer_iterations: pen.trace.records.len(),
        penalty_residual: pen.penalty_residual_final,
        oracle_sequence: oracle.policy.assignment.perm.iter().map(|i| i + 1).collect(),
        oracle_objective: o,
        relative_gap: (p - o) / o.abs(),
    };
    let seq = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    println!("penalty iteration: sequence {}  objective {:.9}", seq(&report.penalty_sequence), p);
    println!("exhaustive search: sequence {}  objective {:.9}", seq(&report.oracle_sequence), o);
    println!("relative gap: {:.3e}", report.relative_gap);
    if let Some(out) = &a.out {
        write_file(out, &to_json(&report))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    scheme: SchemeKind,
    feasible: bool,
    failure: Option<String>,
    policy: Option<PolicyReport>,
}

fn cmd_compare(a: CompareArgs) -> CliResult<()> {
    let sc = load(&a.common)?;
    let opts = sequencer_options(&a.penalty)?;
    let mut rows = Vec::new();
    for scheme in SchemeKind::ALL {
        let row = match solve_scheme(&sc, scheme, a.objective, &opts) {
            Ok(sol) => CompareRow {
                scheme,
                feasible: true,
                failure: None,
                policy: Some(PolicyReport::new(&sc, scheme, &sol.policy, sol.iterations, sol.warnings)),
            },
            Err(e @ (Error::Infeasible(_) | Error::Solver(_) | Error::Audit { .. })) => CompareRow {
                scheme,
                feasible: false,
                failure: Some(e.to_string()),
                policy: None,
            },
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    println!(
        "objective {}  T_frame {:.3} ms",
        a.objective,
        sc.t_frame() * 1e3
    );
    println!("{:<11} {:>14} {:>18}  sequence", "scheme", "energy mJ", "objective");
    for r in &rows {
        match &r.policy {
            Some(p) => {
                let seq: Vec<String> = p.sequence.iter().map(|i| i.to_string()).collect();
                println!(
                    "{:<11} {:>14.5} {:>18.9}  {}",
                    r.scheme.name(),
                    p.system_energy_j * 1e3,
                    p.objective_value,
                    seq.join(" ")
                );
            }
            None => println!("{:<11} {:>14}", r.scheme.name(), "infeasible"),
        }
    }
    if let Some(out) = &a.out {
        let body = match a.format {
            Format::Json => to_json(&rows),
            Format::Csv => {
                let mut s = String::from("scheme,feasible,system_energy_j,objective_value\n");
                for r in &rows {
                    let (e, o) = match &r.policy {
                        Some(p) => (p.system_energy_j.to_string(), p.objective_value.to_string()),
                        None => (String::new(), String::new()),
                    };
                    let _ = writeln!(s, "{},{},{e},{o}", r.scheme, r.feasible);
                }
                s
            }
        };
        write_file(out, &body)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> CliResult<()> {
    let sc = load_scenario_file(&a.scenario).map_err(|e| config_error(format!("{}: {e}", a.scenario.display())))?;
    if a.points == 0 {
        return Err(config_error("--points must be >= 1"));
    }
    let checks = gradient_suite(&sc, a.points, a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.worst <= GRAD_TOL;
        failed += usize::from(!ok);
        println!(
            "{:<15} {:<7} {} points  worst {:.3e}  {}",
            c.builder,
            c.objective.name(),
            c.points,
            c.worst,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("gradient check failed: {failed} of {} gradient checks above {GRAD_TOL:e}", checks.len()),
        });
    }
    Ok(())
}

//! Python bindings for `seqsched`.
//!
//! Scenarios load from the same TOML documents as the CLI. Solver calls
//! release the GIL.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqsched::experiments::{frame_grid, write_csv};
use seqsched::sequencer::{exhaustive_oracle, penalty_iteration, solve_scheme, SequencerOptions};
use seqsched::subproblems::gradient_suite;
use seqsched::{sample_channel, ChannelMode, Error, ObjectiveKind, SchemeKind, SweepSpec};

create_exception!(seqsched_py, SeqschedError, PyException, "Base class of every seqsched failure.");
create_exception!(seqsched_py, InfeasibleError, SeqschedError, "No schedule meets the timing constraints.");
create_exception!(seqsched_py, SolverError, SeqschedError, "The optimizer did not converge.");
create_exception!(seqsched_py, ConfigError, SeqschedError, "Invalid scenario or argument.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Infeasible(_) => InfeasibleError::new_err(e.to_string()),
        Error::Solver(_) | Error::Audit { .. } | Error::Bracket(_) => SolverError::new_err(e.to_string()),
        _ => ConfigError::new_err(e.to_string()),
    }
}

fn objective(name: &str) -> PyResult<ObjectiveKind> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

fn scheme(name: &str) -> PyResult<SchemeKind> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

fn options(lambda: f64, epsilon: f64) -> PyResult<SequencerOptions> {
    if !(lambda > 0.0 && epsilon > 0.0 && lambda.is_finite() && epsilon.is_finite()) {
        return Err(PyValueError::new_err("lambda and epsilon must be finite and > 0"));
    }
    Ok(SequencerOptions {
        lambda,
        epsilon,
        ..SequencerOptions::default()
    })
}

/// Devices, channel gains and system constants.
#[pyclass(name = "Scenario", module = "seqsched_py", frozen)]
struct PyScenario {
    inner: seqsched::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Parses a TOML scenario document.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = seqsched::load_scenario(text).map_err(to_py)?;
        Ok(PyScenario { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = seqsched::load_scenario_file(path).map_err(to_py)?;
        Ok(PyScenario { inner })
    }

    /// The five-device reference fleet, all gains at the mean.
    #[staticmethod]
    fn reference() -> Self {
        PyScenario {
            inner: seqsched::Scenario::reference(),
        }
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    /// Frame duration, seconds.
    #[getter]
    fn t_frame(&self) -> f64 {
        self.inner.t_frame()
    }

    #[getter]
    fn gains(&self) -> Vec<f64> {
        self.inner.channel.gains.clone()
    }

    #[getter]
    fn packet_bits(&self) -> Vec<f64> {
        self.inner.devices.iter().map(|d| d.packet_bits).collect()
    }

    fn with_t_frame(&self, t_frame: f64) -> PyResult<Self> {
        let inner = self.inner.with_t_frame(t_frame).map_err(to_py)?;
        Ok(PyScenario { inner })
    }

    /// Same fleet with exponential gains drawn from `seed`.
    fn with_seed(&self, seed: u64) -> PyResult<Self> {
        let inner = self
            .inner
            .with_channel(sample_channel(&self.inner, seed))
            .map_err(to_py)?;
        Ok(PyScenario { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_config_text()
    }

    fn __repr__(&self) -> String {
        format!("Scenario(n={}, t_frame={})", self.inner.n(), self.inner.t_frame())
    }
}

/// A solved frame schedule. Per-device lists are indexed by device.
#[pyclass(name = "Policy", module = "seqsched_py", frozen)]
struct PyPolicy {
    inner: seqsched::Policy,
    packet_bits: Vec<f64>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    warnings: Vec<String>,
}

impl PyPolicy {
    fn new(inner: seqsched::Policy, sc: &seqsched::Scenario, iterations: usize, warnings: Vec<String>) -> Self {
        PyPolicy {
            inner,
            packet_bits: sc.devices.iter().map(|d| d.packet_bits).collect(),
            iterations,
            warnings,
        }
    }
}

#[pymethods]
impl PyPolicy {
    /// Device indices (0-based) in block order.
    #[getter]
    fn sequence(&self) -> Vec<usize> {
        self.inner.assignment.perm.clone()
    }

    /// Block lengths in block order, seconds.
    #[getter]
    fn blocks(&self) -> Vec<f64> {
        self.inner.reported_blocks()
    }

    #[getter]
    fn compressed_bits(&self) -> Vec<f64> {
        self.inner.decisions.iter().map(|d| d.d_cp).collect()
    }

    #[getter]
    fn compression_ratios(&self) -> Vec<f64> {
        self.inner
            .decisions
            .iter()
            .zip(&self.packet_bits)
            .map(|(d, p)| d.d_cp / p)
            .collect()
    }

    /// Radiated transmit powers, W.
    #[getter]
    fn powers(&self) -> Vec<f64> {
        self.inner.physical.iter().map(|p| p.p_tx_amp).collect()
    }

    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.physical.iter().map(|p| p.rate).collect()
    }

    /// Per-device energies, J.
    #[getter]
    fn energies(&self) -> Vec<f64> {
        self.inner.energies.clone()
    }

    #[getter]
    fn system_energy(&self) -> f64 {
        self.inner.system_energy()
    }

    #[getter]
    fn objective(&self) -> &'static str {
        self.inner.objective.name()
    }

    #[getter]
    fn objective_value(&self) -> f64 {
        self.inner.objective_value
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(sequence={:?}, system_energy={:.6e})",
            self.inner.assignment.perm,
            self.inner.system_energy()
        )
    }
}

/// Solves one scheme at the scenario's frame duration.
#[pyfunction]
#[pyo3(signature = (scenario, scheme="optimal", objective="sum", lambda_penalty=200.0, epsilon=1e-6))]
fn solve(
    py: Python<'_>,
    scenario: &PyScenario,
    scheme: &str,
    objective: &str,
    lambda_penalty: f64,
    epsilon: f64,
) -> PyResult<PyPolicy> {
    let (s, o, opts) = (self::scheme(scheme)?, self::objective(objective)?, options(lambda_penalty, epsilon)?);
    let sc = &scenario.inner;
    let sol = py.detach(|| solve_scheme(sc, s, o, &opts)).map_err(to_py)?;
    Ok(PyPolicy::new(sol.policy, sc, sol.iterations, sol.warnings))
}

/// Penalty iteration. Returns the policy and the traced penalized objective
/// of every outer iteration.
#[pyfunction]
#[pyo3(signature = (scenario, objective="sum", lambda_penalty=200.0, epsilon=1e-6, scheme="optimal"))]
fn algorithm1(
    py: Python<'_>,
    scenario: &PyScenario,
    objective: &str,
    lambda_penalty: f64,
    epsilon: f64,
    scheme: &str,
) -> PyResult<(PyPolicy, Vec<f64>)> {
    let (s, o, opts) = (self::scheme(scheme)?, self::objective(objective)?, options(lambda_penalty, epsilon)?);
    let sc = &scenario.inner;
    let r = py.detach(|| penalty_iteration(sc, o, s, &opts)).map_err(to_py)?;
    let trace = r.trace.records.iter().map(|rec| rec.objective).collect();
    Ok((PyPolicy::new(r.policy, sc, r.iterations, r.warnings), trace))
}

/// Best fixed-sequence solution over every permutation.
#[pyfunction]
#[pyo3(signature = (scenario, objective="sum", scheme="optimal"))]
fn oracle(py: Python<'_>, scenario: &PyScenario, objective: &str, scheme: &str) -> PyResult<PyPolicy> {
    let (s, o) = (self::scheme(scheme)?, self::objective(objective)?);
    let sc = &scenario.inner;
    let r = py.detach(|| exhaustive_oracle(sc, o, s)).map_err(to_py)?;
    Ok(PyPolicy::new(r.policy, sc, r.iterations, r.warnings))
}

/// Relative energy saving of `e_a` over `e_b`.
#[pyfunction]
fn gain(e_a: f64, e_b: f64) -> PyResult<f64> {
    seqsched::gain(e_a, e_b).map_err(to_py)
}

/// Frame sweep. `grid_ms` is `(lo, hi, step)` in milliseconds. Returns one
/// dict per row with the CSV columns plus `sequence` and `failure`.
#[pyfunction]
#[pyo3(signature = (scenario, grid_ms, schemes=None, objectives=None, seed=None, mc=None, csv_path=None))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    grid_ms: (f64, f64, f64),
    schemes: Option<Vec<String>>,
    objectives: Option<Vec<String>>,
    seed: Option<u64>,
    mc: Option<usize>,
    csv_path: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let grid = frame_grid(grid_ms.0 * 1e-3, grid_ms.1 * 1e-3, grid_ms.2 * 1e-3).map_err(to_py)?;
    let schemes = match schemes {
        Some(v) => v.iter().map(|s| scheme(s)).collect::<PyResult<Vec<_>>>()?,
        None => SchemeKind::ALL.to_vec(),
    };
    let objectives = match objectives {
        Some(v) => v.iter().map(|s| objective(s)).collect::<PyResult<Vec<_>>>()?,
        None => ObjectiveKind::ALL.to_vec(),
    };
    let mode = match (mc, seed) {
        (Some(count), s) => ChannelMode::MonteCarlo {
            count,
            base_seed: s.unwrap_or(0),
        },
        (None, Some(s)) => ChannelMode::Seeded(s),
        (None, None) => ChannelMode::Fixed,
    };
    let spec = SweepSpec::new(grid, schemes, objectives, mode).map_err(to_py)?;
    let sc = &scenario.inner;
    let rows = py.detach(|| seqsched::run_sweep(sc, &spec)).map_err(to_py)?;
    if let Some(path) = csv_path {
        let file = std::fs::File::create(path).map_err(|e| to_py(e.into()))?;
        write_csv(&rows, file).map_err(to_py)?;
    }
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("t_frame_s", r.t_frame)?;
            d.set_item("scheme", r.scheme.name())?;
            d.set_item("objective", r.objective.name())?;
            d.set_item("feasible", r.feasible)?;
            d.set_item("system_energy_J", r.system_energy)?;
            d.set_item("per_device_energy_J", r.per_device_energy.clone())?;
            d.set_item("objective_value", r.objective_value)?;
            d.set_item("gain_vs_benchmark", r.gain_vs.get(&SchemeKind::Benchmark).copied())?;
            d.set_item("gain_vs_suboptimal", r.gain_vs.get(&SchemeKind::SubOptimal).copied())?;
            d.set_item("iterations", r.iterations)?;
            d.set_item("channel_mode", r.channel_mode.clone())?;
            d.set_item("seed", r.seed)?;
            d.set_item("sequence", r.sequence.clone())?;
            d.set_item("failure", r.failure.clone())?;
            Ok(d)
        })
        .collect()
}

/// Worst finite-difference gradient error per builder and objective.
#[pyfunction]
#[pyo3(signature = (scenario, points=20, seed=0))]
fn gradcheck(scenario: &PyScenario, points: usize, seed: u64) -> PyResult<Vec<(String, String, f64)>> {
    let checks = gradient_suite(&scenario.inner, points, seed).map_err(to_py)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.builder.to_string(), c.objective.name().to_string(), c.worst))
        .collect())
}

#[pymodule]
fn seqsched_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyScenario>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(algorithm1, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(gain, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("SeqschedError", py.get_type::<SeqschedError>())?;
    m.add("InfeasibleError", py.get_type::<InfeasibleError>())?;
    m.add("SolverError", py.get_type::<SolverError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    Ok(())
}

//! Joint sequencing, scheduling, compression and transmit-power optimization
//! for energy-constrained devices sharing a TDMA uplink frame.
//!
//! A device placed later in the frame has more time to compress before its
//! block starts, so the order of the blocks matters once compression is part
//! of the design. The crate provides:
//!
//! * [`scenario`]: problem data and config loading;
//! * [`physmodel`]: rate, timing and energy formulas plus the variable
//!   transforms;
//! * [`nlpsolver`]: a small interior-point engine for smooth constrained
//!   problems;
//! * [`subproblems`]: builders for every scheme's optimization problem and
//!   decoding of solver points into audited [`subproblems::Policy`] values;
//! * [`sequencer`]: the penalty iteration over relaxed assignments and the
//!   exhaustive permutation search;
//! * [`experiments`]: frame-duration sweeps, gains, feasibility boundaries
//!   and CSV output.

pub mod error;
pub mod experiments;
pub mod nlpsolver;
pub mod physmodel;
pub mod scenario;
pub mod sequencer;
pub mod subproblems;

pub use error::{Error, Result};
pub use experiments::{gain, run_sweep, ChannelMode, SweepRow, SweepSpec};
pub use nlpsolver::{Problem, SolveReport, SolveStatus, SolverOptions};
pub use physmodel::{DeviceDecision, DeviceModel, DevicePhysical};
pub use scenario::{load_scenario, load_scenario_file, sample_channel, Scenario, SystemParams};
pub use sequencer::{algorithm1, exhaustive_oracle, extract_permutation, SequencerResult};
pub use subproblems::{Assignment, ObjectiveKind, Policy, SchemeKind};

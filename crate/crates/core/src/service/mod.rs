//! Scenario runner, live session and the operator API.

pub mod live;
pub mod protocol;
pub mod scenario;
pub mod server;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::bridge::{run_end_to_end, BridgeError, RunMetrics, RunOutput};
use crate::ladder::Warning;
use crate::simkernel::Trace;

pub use live::{Command, CommandSender, LiveSession};
pub use scenario::{Scenario, ScenarioError, ValidScenario, DEMO_SCENARIO};
pub use server::{ServeOptions, Server, ServerHandle};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

/// A failed expectation: which image, what was expected, what was seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub image: &'static str,
    pub expected: u8,
    pub actual: u8,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub passed: bool,
    pub mismatches: Vec<Mismatch>,
    pub warnings: Vec<Warning>,
    pub metrics: RunMetrics,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Runs a validated scenario and checks its expectations.
pub fn execute(valid: &ValidScenario) -> Result<(RunReport, Trace), ServiceError> {
    let RunOutput { trace, metrics } = run_end_to_end(&valid.run)?;
    let mut mismatches = Vec::new();
    if let Some(expect) = &valid.expect {
        let checks = [
            (
                "output_image",
                expect.output_image,
                metrics.final_state.outputs,
            ),
            (
                "input_image",
                expect.input_image,
                metrics.final_state.inputs,
            ),
        ];
        for (image, expected, actual) in checks {
            if let Some(expected) = expected {
                if expected != actual {
                    mismatches.push(Mismatch {
                        image,
                        expected,
                        actual,
                    });
                }
            }
        }
    }
    let report = RunReport {
        seed: valid.run.seed,
        passed: mismatches.is_empty(),
        mismatches,
        warnings: valid.warnings.clone(),
        metrics,
    };
    Ok((report, trace))
}

/// Loads, validates and runs the scenario at `path`, writing the trace as
/// JSON lines to `trace_out`. `seed` replaces the scenario's seed.
pub fn run_scenario(
    path: &Path,
    trace_out: &Path,
    seed: Option<u64>,
) -> Result<RunReport, ServiceError> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let valid = scenario.validate()?;
    let (report, trace) = execute(&valid)?;
    write_trace(&trace, trace_out)?;
    Ok(report)
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), ServiceError> {
    let io_err = |source| ServiceError::Io {
        context: format!("writing trace to {}", path.display()),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    trace.write_jsonl(&mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

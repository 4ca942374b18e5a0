use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wplc::netmodels::dump_table;
use wplc::service::{run_scenario, Scenario, ServeOptions, Server, ServiceError, DEMO_SCENARIO};

#[derive(Parser)]
#[command(name = "wplc", version, about = "Wireless PLC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and print a JSON report.
    Run {
        scenario: PathBuf,
        /// Where to write the event trace (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve a live session over a local WebSocket.
    Serve {
        #[arg(long, default_value_t = ServeOptions::default().port)]
        port: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Scenario supplying program, network and overrides. Defaults to
        /// the built-in switch demo.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also play the scenario's scripted stimuli.
        #[arg(long)]
        replay: bool,
    },
    /// Print the network comparison table as CSV.
    DumpTable,
}

fn default_trace_path(scenario: &Path) -> PathBuf {
    let stem = scenario.file_stem().unwrap_or_default().to_string_lossy();
    scenario.with_file_name(format!("{stem}.trace.jsonl"))
}

fn serve(
    port: u16,
    time_scale: f64,
    config: Option<PathBuf>,
    replay: bool,
) -> Result<(), ServiceError> {
    let scenario = match config {
        Some(path) => Scenario::load(&path)?,
        None => Scenario::parse(DEMO_SCENARIO)?,
    };
    let valid = scenario.validate()?;
    let options = ServeOptions {
        port,
        time_scale,
        replay_stimuli: replay,
    };
    let server = Server::bind(&valid, options)?;
    println!("listening on ws://{}", server.local_addr());
    let _ = std::io::stdout().flush();
    server.run().map_err(|source| ServiceError::Io {
        context: "serving".into(),
        source,
    })
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Cmd::Run {
            scenario,
            trace,
            seed,
        } => {
            let trace = trace.unwrap_or_else(|| default_trace_path(&scenario));
            match run_scenario(&scenario, &trace, seed) {
                Ok(report) => {
                    let json = serde_json::to_string_pretty(&report).expect("report serializes");
                    let _ = writeln!(std::io::stdout(), "{json}");
                    for m in &report.mismatches {
                        eprintln!(
                            "expectation failed: {} expected {:#010b}, got {:#010b}",
                            m.image, m.expected, m.actual
                        );
                    }
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Cmd::Serve {
            port,
            time_scale,
            config,
            replay,
        } => match serve(port, time_scale, config, replay) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::DumpTable => {
            let _ = write!(std::io::stdout(), "{}", dump_table());
            ExitCode::SUCCESS
        }
    }
}

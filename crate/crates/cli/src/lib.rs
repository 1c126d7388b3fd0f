//! Command-line experiment runner: single sessions, angle sweeps, fringe
//! scans and a two-process networked mode.

pub mod config;
pub mod fringe;
pub mod sweep;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use dfsqkd::protocol::Protocol;
use dfsqkd::session::{
    connect_bob, expected_summary, run_session_in_process, serve_alice, SessionError,
    SessionSummary,
};
use dfsqkd::transport::FramedTransport;
use thiserror::Error;

pub use config::CommonArgs;
use fringe::{angle_grid, run_fringe, write_fringe_csv, FringeSpec};
use sweep::{run_sweep, write_sweep_csv, SweepSpec};

pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Handshake(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Handshake(_) => 4,
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Config(_) => CliError::Config(e.to_string()),
            SessionError::Handshake(_) => CliError::Handshake(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dfsqkd",
    version,
    about = "Decoherence-free two-photon QKD simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session in-process and print its summary as JSON
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Error rate against channel angle, as CSV
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated angles in degrees
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "0,5,10,15,20,25,30,35,40,45"
        )]
        thetas: Vec<f64>,
        /// Comma-separated protocols
        #[arg(long, value_delimiter = ',', value_parser = parse_protocol, default_value = "dfs2,bb84")]
        protocols: Vec<Protocol>,
    },
    /// Source correlation fringes, as CSV plus a JSON fit
    Fringe {
        #[command(flatten)]
        common: CommonArgs,
        /// Fixed polarizer angle on photon 2, degrees
        #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
        analyzer2: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta1_start: f64,
        #[arg(long, default_value_t = 180.0, allow_negative_numbers = true)]
        theta1_stop: f64,
        #[arg(long, default_value_t = 5.0)]
        theta1_step: f64,
        #[arg(long, default_value_t = 10_000)]
        shots: u64,
    },
    /// Alice's side of a networked session
    ServeAlice {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "HOST:PORT", default_value = DEFAULT_ADDR)]
        listen: String,
    },
    /// Bob's side of a networked session
    ConnectBob {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "HOST:PORT", default_value = DEFAULT_ADDR)]
        connect: String,
        /// Keep retrying a refused connection for this many seconds
        #[arg(long, default_value_t = 10.0)]
        retry_for: f64,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.trim().parse::<Protocol>().map_err(|e| e.to_string())
}

pub fn summary_json(summary: &SessionSummary) -> Result<String, CliError> {
    serde_json::to_string_pretty(summary).map_err(|e| CliError::Runtime(e.to_string()))
}

fn with_csv_sink(
    out: Option<&Path>,
    stdout: &mut dyn Write,
    write: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let file = File::create(path)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
            let mut w = BufWriter::new(file);
            write(&mut w)?;
            w.flush().map_err(|e| CliError::Runtime(e.to_string()))
        }
        None => write(stdout),
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Runs a parsed command, writing results to `stdout` and progress notes to
/// `stderr`.
pub fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common } => {
            let cfg = common.session_config()?;
            let summary = if common.exact {
                expected_summary(&cfg)?
            } else {
                run_session_in_process(&cfg)?.summary
            };
            writeln!(stdout, "{}", summary_json(&summary)?).map_err(io_err)
        }
        Command::Sweep {
            common,
            thetas,
            protocols,
        } => {
            let spec = SweepSpec {
                thetas_deg: thetas,
                protocols,
                base: common.session_config()?,
                exact: common.exact,
            };
            let rows = run_sweep(&spec)?;
            with_csv_sink(common.out.as_deref(), stdout, |w| write_sweep_csv(&rows, w))
        }
        Command::Fringe {
            common,
            analyzer2,
            theta1_start,
            theta1_stop,
            theta1_step,
            shots,
        } => {
            let flat = common.flat_config()?;
            let spec = FringeSpec {
                visibility: flat.visibility,
                analyzer2_deg: analyzer2,
                theta1_deg: angle_grid(theta1_start, theta1_stop, theta1_step)?,
                shots_per_point: shots,
                seed: flat.seed_source,
                exact: common.exact,
            };
            let result = run_fringe(&spec)?;
            let fit = serde_json::to_string_pretty(&result)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            match common.out.as_deref() {
                Some(path) => {
                    with_csv_sink(Some(path), stdout, |w| write_fringe_csv(&result.points, w))?;
                    writeln!(stdout, "{fit}").map_err(io_err)
                }
                None => {
                    write_fringe_csv(&result.points, &mut *stdout)?;
                    writeln!(stderr, "{fit}").map_err(io_err)
                }
            }
        }
        Command::ServeAlice { common, listen } => {
            let cfg = common.session_config()?;
            let listener = TcpListener::bind(&listen)
                .map_err(|e| CliError::Runtime(format!("cannot listen on {listen}: {e}")))?;
            let addr = listener.local_addr().map_err(io_err)?;
            writeln!(stderr, "listening on {addr}").map_err(io_err)?;
            stderr.flush().map_err(io_err)?;
            let (stream, peer) = listener.accept().map_err(io_err)?;
            stream.set_nodelay(true).map_err(io_err)?;
            writeln!(stderr, "Bob connected from {peer}").map_err(io_err)?;
            let mut link = FramedTransport::new(stream);
            let outcome = serve_alice(&cfg, &mut link)?;
            writeln!(stdout, "{}", summary_json(&outcome.summary)?).map_err(io_err)
        }
        Command::ConnectBob {
            common,
            connect,
            retry_for,
        } => {
            let cfg = common.session_config()?;
            let stream = connect_with_retry(&connect, Duration::from_secs_f64(retry_for.max(0.0)))?;
            stream.set_nodelay(true).map_err(io_err)?;
            let mut link = FramedTransport::new(stream);
            let outcome = connect_bob(&cfg, &mut link)?;
            writeln!(stdout, "{}", summary_json(&outcome.summary)?).map_err(io_err)
        }
    }
}

fn connect_with_retry(addr: &str, patience: Duration) -> Result<TcpStream, CliError> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e)
                if e.kind() == io::ErrorKind::ConnectionRefused && start.elapsed() < patience =>
            {
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(CliError::Runtime(format!("cannot connect to {addr}: {e}"))),
        }
    }
}

//! Config-file loading and flag overrides.

use std::fs;
use std::path::Path;

use clap::Args;
use dfsqkd::protocol::Protocol;
use dfsqkd::session::{FlatConfig, SessionConfig};

use crate::CliError;

/// Flags shared by every subcommand. Each one that is given overrides the
/// corresponding key of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat JSON session config
    #[arg(long, value_name = "PATH")]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed_alice: Option<u64>,
    #[arg(long, value_name = "N")]
    pub seed_bob: Option<u64>,
    #[arg(long, value_name = "N")]
    pub seed_channel: Option<u64>,
    #[arg(long, value_name = "N")]
    pub seed_source: Option<u64>,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
    /// Static channel rotation in degrees
    #[arg(long, value_name = "DEG", allow_negative_numbers = true)]
    pub theta: Option<f64>,
    #[arg(long, value_name = "F")]
    pub visibility: Option<f64>,
    #[arg(long, value_name = "S")]
    pub duration: Option<f64>,
    #[arg(long, value_name = "HZ")]
    pub pair_rate: Option<f64>,
    #[arg(long, value_name = "HZ")]
    pub clock: Option<f64>,
    /// Fraction of the sifted key disclosed for the error test
    #[arg(long, value_name = "F")]
    pub sample_fraction: Option<f64>,
    /// Closed-form probabilities instead of sampling
    #[arg(long)]
    pub exact: bool,
    /// Write CSV output here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<std::path::PathBuf>,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse::<Protocol>().map_err(|e| e.to_string())
}

pub fn read_flat_config(path: &Path) -> Result<FlatConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl CommonArgs {
    /// The flat config after applying file and flags, before validation.
    pub fn flat_config(&self) -> Result<FlatConfig, CliError> {
        let mut flat = match &self.config {
            Some(path) => read_flat_config(path)?,
            None => FlatConfig::default(),
        };
        let set = |slot: &mut u64, v: Option<u64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut flat.seed_alice, self.seed_alice);
        set(&mut flat.seed_bob, self.seed_bob);
        set(&mut flat.seed_channel, self.seed_channel);
        set(&mut flat.seed_source, self.seed_source);
        let setf = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        setf(&mut flat.theta_deg, self.theta);
        setf(&mut flat.visibility, self.visibility);
        setf(&mut flat.duration_s, self.duration);
        setf(&mut flat.pair_rate_hz, self.pair_rate);
        setf(&mut flat.clock_hz, self.clock);
        setf(&mut flat.sample_fraction, self.sample_fraction);
        if let Some(p) = self.protocol {
            flat.protocol = p;
        }
        Ok(flat)
    }

    pub fn session_config(&self) -> Result<SessionConfig, CliError> {
        SessionConfig::try_from(self.flat_config()?).map_err(|e| CliError::Config(e.to_string()))
    }
}

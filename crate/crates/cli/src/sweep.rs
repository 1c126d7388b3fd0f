//! Error rate against channel angle for both protocols.

use std::io::Write;

use dfsqkd::optics::ChannelModel;
use dfsqkd::protocol::Protocol;
use dfsqkd::session::{expected_summary, run_session_in_process, SessionConfig, SessionSummary};
use rayon::prelude::*;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub thetas_deg: Vec<f64>,
    pub protocols: Vec<Protocol>,
    /// Template for every point; the protocol and a static channel at each
    /// angle are filled in per point.
    pub base: SessionConfig,
    pub exact: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.thetas_deg.is_empty() || self.protocols.is_empty() {
            return Err(CliError::Config(
                "sweep needs at least one angle and one protocol".into(),
            ));
        }
        if let Some(t) = self.thetas_deg.iter().find(|t| !t.is_finite()) {
            return Err(CliError::Config(format!("non-finite sweep angle {t}")));
        }
        self.base
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    fn points(&self) -> Vec<(Protocol, f64)> {
        let mut protocols = self.protocols.clone();
        protocols.sort();
        protocols.dedup();
        let mut thetas = self.thetas_deg.clone();
        thetas.sort_by(f64::total_cmp);
        thetas.dedup();
        protocols
            .iter()
            .flat_map(|&p| thetas.iter().map(move |&t| (p, t)))
            .collect()
    }

    /// Config of one point. Source and channel seeds are mixed with the
    /// point's protocol and angle, settings seeds are kept.
    pub fn point_config(&self, protocol: Protocol, theta_deg: f64) -> SessionConfig {
        let mut seeds = self.base.seeds;
        let tag = theta_deg.to_bits() ^ ((protocol as u64) << 63);
        seeds.source = mix(seeds.source ^ tag);
        seeds.channel = mix(seeds.channel ^ tag.rotate_left(17));
        SessionConfig {
            protocol,
            channel: ChannelModel::Static {
                theta: theta_deg.to_radians(),
            },
            seeds,
            ..self.base.clone()
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta_deg: f64,
    pub protocol: Protocol,
    pub n_sifted: u64,
    /// Empty when nothing was compared.
    pub qber: Option<f64>,
    pub qber_stderr: Option<f64>,
    pub key_rate: f64,
    pub secure: bool,
}

impl SweepRow {
    fn new(protocol: Protocol, theta_deg: f64, s: &SessionSummary) -> Self {
        Self {
            theta_deg,
            protocol,
            n_sifted: s.n_sifted,
            qber: s.qber.map(|q| q.qber),
            qber_stderr: s.qber.map(|q| q.stderr),
            key_rate: s.key_rate.rate,
            secure: s.key_rate.secure,
        }
    }
}

/// Runs every (protocol, angle) point, in parallel, and returns rows in
/// `(protocol, angle)` order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, CliError> {
    spec.validate()?;
    spec.points()
        .into_par_iter()
        .map(|(protocol, theta_deg)| {
            let cfg = spec.point_config(protocol, theta_deg);
            let summary = if spec.exact {
                expected_summary(&cfg)?
            } else {
                run_session_in_process(&cfg)?.summary
            };
            Ok(SweepRow::new(protocol, theta_deg, &summary))
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))
}

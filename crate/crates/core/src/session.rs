//! Time-slotted end-to-end sessions.
//!
//! A session walks the encoding clock slot by slot. In every slot Alice
//! draws `(x, y)` and Bob draws `z` from their own streams, the source emits
//! a Poisson number of pairs, and slots with at least one pair are sent
//! through the channel and the detectors. The recorded views are then
//! reconciled by the two parties over a [`Transport`]: Bob declares his
//! coincidences and bases, Alice answers with the kept slots, Alice picks
//! the disclosed sample and both sides exchange it, and finally each side
//! computes the [`SessionSummary`] and checks it against the peer's.
//!
//! Four independent ChaCha8 streams keep runs reproducible: Alice's bits,
//! Bob's bases, the channel angle, and the source (pair numbers, Born-rule
//! outcomes, detector clicks). Alice's sample selection uses a second
//! stream derived from her seed.

use std::fmt;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{
    channel_unitary, coincidence_distribution, detect, rotation_unitary, ChannelModel,
    ChannelSampler, DetectionEvent, Detector, DetectorParams, OpticsError,
};
use crate::protocol::{
    bb84_bit_probs, bb84_prepare, choose_sample_positions, dfs_outcome_probs, encode_state,
    key_rate, outcome_index_to_bit, remove_disclosed, sift, KeyRateResult, Protocol, ProtocolError,
    QberReport,
};
use crate::qstate::{
    apply_collective, basis_ket, herald_photon1, psi_minus, sample_outcome, werner_mix, BasisLabel,
    QstateError, TwoPhotonDensity,
};
use crate::transport::{
    ByePayload, DetectionsPayload, HelloPayload, Message, PackedBits, SampleBitsPayload,
    SampleRequestPayload, SiftKeepPayload, Transport, TransportError,
};

const BITS_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("transport failure during {stage} ({context}): {source}")]
    Transport {
        stage: Stage,
        context: String,
        #[source]
        source: TransportError,
    },
    #[error("handshake mismatch: {0}")]
    Handshake(String),
    #[error("protocol violation during {stage}: {detail}")]
    Protocol { stage: Stage, detail: String },
    #[error("peer aborted during {stage}: {reason}")]
    Aborted { stage: Stage, reason: String },
    #[error("summaries disagree between the two parties")]
    SummaryMismatch,
    #[error(transparent)]
    Physics(#[from] QstateError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Estimation(#[from] ProtocolError),
}

impl SessionError {
    pub fn is_peer_closed(&self) -> bool {
        matches!(
            self,
            SessionError::Transport {
                source: TransportError::PeerClosed,
                ..
            }
        )
    }
}

/// Phase of the classical conversation, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Handshake,
    QuantumLink,
    Sifting,
    ErrorTest,
    Summary,
    Closing,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Handshake => "handshake",
            Stage::QuantumLink => "quantum-link replay",
            Stage::Sifting => "sifting",
            Stage::ErrorTest => "error test",
            Stage::Summary => "summary exchange",
            Stage::Closing => "closing",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub alice: u64,
    pub bob: u64,
    pub channel: u64,
    pub source: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            alice: 1,
            bob: 2,
            channel: 3,
            source: 4,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Everything that determines a session. Angles are radians here and
/// degrees in the serialized form (see [`FlatConfig`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlatConfig", try_from = "FlatConfig")]
pub struct SessionConfig {
    pub protocol: Protocol,
    pub clock_hz: f64,
    pub pair_rate_hz: f64,
    pub duration_s: f64,
    pub visibility: f64,
    pub channel: ChannelModel,
    pub detectors: DetectorParams,
    pub sample_fraction: f64,
    pub seeds: Seeds,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Dfs2,
            clock_hz: 1e5,
            pair_rate_hz: 4000.0,
            duration_s: 50.0,
            visibility: 0.88,
            channel: ChannelModel::default(),
            detectors: DetectorParams::ideal(),
            sample_fraction: 0.1,
            seeds: Seeds::default(),
        }
    }
}

impl SessionConfig {
    /// `⌊clock_hz · duration_s⌋`.
    pub fn n_slots(&self) -> u64 {
        (self.clock_hz * self.duration_s).floor() as u64
    }

    /// Mean number of pairs per slot.
    pub fn mu(&self) -> f64 {
        self.pair_rate_hz / self.clock_hz
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |msg: String| Err(SessionError::Config(msg));
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return bad(format!("clock_hz must be positive, got {}", self.clock_hz));
        }
        if !(self.pair_rate_hz >= 0.0 && self.pair_rate_hz.is_finite()) {
            return bad(format!(
                "pair_rate_hz must be non-negative, got {}",
                self.pair_rate_hz
            ));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            ));
        }
        if self.mu() >= 1.0 {
            return bad(format!("mean pairs per slot {} must be below 1", self.mu()));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return bad(format!("visibility {} outside [0, 1]", self.visibility));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample_fraction {} outside (0, 1]",
                self.sample_fraction
            ));
        }
        if self.n_slots() == 0 {
            return bad("session has no clock slots".into());
        }
        self.channel
            .validate()
            .map_err(|e| SessionError::Config(e.to_string()))?;
        self.detectors
            .validate()
            .map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_flat(&self) -> FlatConfig {
        self.clone().into()
    }
}

/// Channel family in the flat config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Static,
    Uniform,
    RandomWalk,
}

/// A per-detector value given either once for all four or as `[D1..D4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDetector {
    Uniform(f64),
    Each([f64; 4]),
}

impl PerDetector {
    fn expand(self) -> [f64; 4] {
        match self {
            PerDetector::Uniform(v) => [v; 4],
            PerDetector::Each(v) => v,
        }
    }

    fn compact(v: [f64; 4]) -> Self {
        if v.iter().all(|&e| e == v[0]) {
            PerDetector::Uniform(v[0])
        } else {
            PerDetector::Each(v)
        }
    }
}

/// Flat JSON form of [`SessionConfig`], used for config files and the
/// handshake. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub protocol: Protocol,
    pub clock_hz: f64,
    pub pair_rate_hz: f64,
    pub duration_s: f64,
    pub visibility: f64,
    pub channel: ChannelKind,
    /// Static angle, or the starting angle of a random walk.
    pub theta_deg: f64,
    pub theta_lo_deg: f64,
    pub theta_hi_deg: f64,
    pub step_sigma_deg: f64,
    pub efficiency: PerDetector,
    pub dark_count_prob: PerDetector,
    pub coincidence_window_ns: f64,
    pub sample_fraction: f64,
    pub seed_alice: u64,
    pub seed_bob: u64,
    pub seed_channel: u64,
    pub seed_source: u64,
}

impl Default for FlatConfig {
    fn default() -> Self {
        SessionConfig::default().into()
    }
}

impl From<SessionConfig> for FlatConfig {
    fn from(c: SessionConfig) -> Self {
        let (channel, theta_deg, theta_lo_deg, theta_hi_deg, step_sigma_deg) = match c.channel {
            ChannelModel::Static { theta } => {
                (ChannelKind::Static, theta.to_degrees(), 0.0, 0.0, 0.0)
            }
            ChannelModel::PerSlotUniform { lo, hi } => (
                ChannelKind::Uniform,
                0.0,
                lo.to_degrees(),
                hi.to_degrees(),
                0.0,
            ),
            ChannelModel::RandomWalk { theta0, step_sigma } => (
                ChannelKind::RandomWalk,
                theta0.to_degrees(),
                0.0,
                0.0,
                step_sigma.to_degrees(),
            ),
        };
        Self {
            protocol: c.protocol,
            clock_hz: c.clock_hz,
            pair_rate_hz: c.pair_rate_hz,
            duration_s: c.duration_s,
            visibility: c.visibility,
            channel,
            theta_deg,
            theta_lo_deg,
            theta_hi_deg,
            step_sigma_deg,
            efficiency: PerDetector::compact(c.detectors.efficiency),
            dark_count_prob: PerDetector::compact(c.detectors.dark_count_prob),
            coincidence_window_ns: c.detectors.coincidence_window_ns,
            sample_fraction: c.sample_fraction,
            seed_alice: c.seeds.alice,
            seed_bob: c.seeds.bob,
            seed_channel: c.seeds.channel,
            seed_source: c.seeds.source,
        }
    }
}

impl TryFrom<FlatConfig> for SessionConfig {
    type Error = SessionError;

    fn try_from(f: FlatConfig) -> Result<Self, Self::Error> {
        let channel = match f.channel {
            ChannelKind::Static => ChannelModel::Static {
                theta: f.theta_deg.to_radians(),
            },
            ChannelKind::Uniform => ChannelModel::PerSlotUniform {
                lo: f.theta_lo_deg.to_radians(),
                hi: f.theta_hi_deg.to_radians(),
            },
            ChannelKind::RandomWalk => ChannelModel::RandomWalk {
                theta0: f.theta_deg.to_radians(),
                step_sigma: f.step_sigma_deg.to_radians(),
            },
        };
        let cfg = SessionConfig {
            protocol: f.protocol,
            clock_hz: f.clock_hz,
            pair_rate_hz: f.pair_rate_hz,
            duration_s: f.duration_s,
            visibility: f.visibility,
            channel,
            detectors: DetectorParams {
                efficiency: f.efficiency.expand(),
                dark_count_prob: f.dark_count_prob.expand(),
                coincidence_window_ns: f.coincidence_window_ns,
            },
            sample_fraction: f.sample_fraction,
            seeds: Seeds {
                alice: f.seed_alice,
                bob: f.seed_bob,
                channel: f.seed_channel,
                source: f.seed_source,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Poisson pair number for one slot.
pub fn poisson_pairs<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> Result<u32, SessionError> {
    PairSource::new(mu).map(|s| s.sample(rng))
}

/// Reusable Poisson sampler for a fixed mean.
#[derive(Debug, Clone)]
pub struct PairSource(Option<Poisson<f64>>);

impl PairSource {
    pub fn new(mu: f64) -> Result<Self, SessionError> {
        if !(0.0..1.0).contains(&mu) {
            return Err(SessionError::Config(format!(
                "mean pairs per slot {mu} outside [0, 1)"
            )));
        }
        if mu == 0.0 {
            return Ok(Self(None));
        }
        Poisson::new(mu)
            .map(|p| Self(Some(p)))
            .map_err(|e| SessionError::Config(e.to_string()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match &self.0 {
            None => 0,
            Some(p) => p.sample(rng) as u32,
        }
    }
}

/// One clock slot that carried at least one pair or registered a
/// coincidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    pub slot_index: u64,
    pub n_pairs: u32,
    pub alice_x: u8,
    pub alice_y: u8,
    pub bob_z: u8,
    /// Channel angle in radians.
    pub theta: f64,
    /// Present only for a registered coincidence.
    pub event: Option<DetectionEvent>,
}

/// Bob's bit for a registered event.
pub fn bob_bit(protocol: Protocol, event: &DetectionEvent) -> Option<u8> {
    match protocol {
        Protocol::Dfs2 => event.outcome().map(outcome_index_to_bit),
        Protocol::Bb84 => match (event.is_coincidence, event.detector_photon1) {
            (true, Some(d)) => Some((d == Detector::D2) as u8),
            _ => None,
        },
    }
}

/// Born-rule tables for one channel angle, cached while the angle repeats.
struct Physics {
    protocol: Protocol,
    detectors: DetectorParams,
    encoded: [TwoPhotonDensity; 4],
    visibility: f64,
    herald: [f64; 2],
    cached_theta: Option<u64>,
    dfs_table: [[f64; 4]; 8],
    bb84_table: [[f64; 2]; 8],
}

impl Physics {
    fn new(cfg: &SessionConfig) -> Result<Self, SessionError> {
        let source = werner_mix(&psi_minus(), cfg.visibility)?;
        let encoded = std::array::from_fn(|s| encode_state((s >> 1) as u8, (s & 1) as u8, &source));
        let (p_herald, _) = herald_photon1(&source, &basis_ket(BasisLabel::Plus))?;
        Ok(Self {
            protocol: cfg.protocol,
            detectors: cfg.detectors,
            encoded,
            visibility: cfg.visibility,
            herald: [p_herald, 1.0 - p_herald],
            cached_theta: None,
            dfs_table: [[0.0; 4]; 8],
            bb84_table: [[0.0; 2]; 8],
        })
    }

    fn refresh(&mut self, theta: f64) -> Result<(), SessionError> {
        if self.cached_theta == Some(theta.to_bits()) {
            return Ok(());
        }
        match self.protocol {
            Protocol::Dfs2 => {
                let u = channel_unitary(theta);
                for s in 0..4 {
                    let arrived = apply_collective(&u, &self.encoded[s]);
                    for z in 0..2 {
                        self.dfs_table[2 * s + z] = dfs_outcome_probs(&arrived, z as u8);
                    }
                }
            }
            Protocol::Bb84 => {
                let u = rotation_unitary(theta);
                for s in 0..4 {
                    let arrived =
                        bb84_prepare((s >> 1) as u8, (s & 1) as u8, self.visibility)?.evolve(&u);
                    for z in 0..2 {
                        self.bb84_table[2 * s + z] = bb84_bit_probs(&arrived, z as u8);
                    }
                }
            }
        }
        self.cached_theta = Some(theta.to_bits());
        Ok(())
    }

    /// The true (pre-detector) outcome index `2·port1 + port2`.
    fn true_outcome<R: Rng + ?Sized>(
        &mut self,
        x: u8,
        y: u8,
        z: u8,
        theta: f64,
        rng: &mut R,
    ) -> Result<usize, SessionError> {
        self.refresh(theta)?;
        let idx = (((x << 1) | y) << 1 | z) as usize;
        Ok(match self.protocol {
            Protocol::Dfs2 => sample_outcome(&self.dfs_table[idx], rng)?,
            Protocol::Bb84 => {
                // photon 2 behind the ± analyzer: D3 is the |+⟩ trigger port
                let trigger = sample_outcome(&self.herald, rng)?;
                let port1 = sample_outcome(&self.bb84_table[idx], rng)?;
                2 * port1 + trigger
            }
        })
    }

    fn registered(&self, event: &DetectionEvent) -> bool {
        event.is_coincidence
            && match self.protocol {
                Protocol::Dfs2 => true,
                Protocol::Bb84 => event.detector_photon2 == Some(Detector::D3),
            }
    }
}

/// Raw record of a simulated session: slots that carried a pair or
/// registered a coincidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub protocol: Protocol,
    pub n_slots: u64,
    pub slots: Vec<SlotRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceSlot {
    pub slot: u64,
    pub n_pairs: u32,
    pub x: u8,
    pub y: u8,
}

/// What Alice knows: her settings in the recorded slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AliceView {
    pub n_slots: u64,
    pub slots: Vec<AliceSlot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BobDetection {
    pub slot: u64,
    pub z: u8,
    pub bit: u8,
    pub multi_pair: bool,
}

/// What Bob knows: his registered coincidences.
#[derive(Debug, Clone, PartialEq)]
pub struct BobView {
    pub n_slots: u64,
    pub detections: Vec<BobDetection>,
}

impl Simulation {
    pub fn alice_view(&self) -> AliceView {
        AliceView {
            n_slots: self.n_slots,
            slots: self
                .slots
                .iter()
                .map(|r| AliceSlot {
                    slot: r.slot_index,
                    n_pairs: r.n_pairs,
                    x: r.alice_x,
                    y: r.alice_y,
                })
                .collect(),
        }
    }

    pub fn bob_view(&self) -> BobView {
        BobView {
            n_slots: self.n_slots,
            detections: self
                .slots
                .iter()
                .filter_map(|r| {
                    let ev = r.event.as_ref()?;
                    Some(BobDetection {
                        slot: r.slot_index,
                        z: r.bob_z,
                        bit: bob_bit(self.protocol, ev)?,
                        multi_pair: ev.multi_pair,
                    })
                })
                .collect(),
        }
    }

    pub fn n_coincidences(&self) -> usize {
        self.slots.iter().filter(|r| r.event.is_some()).count()
    }
}

/// Runs the quantum part of a session.
pub fn simulate(cfg: &SessionConfig) -> Result<Simulation, SessionError> {
    cfg.validate()?;
    let n_slots = cfg.n_slots();
    let mut alice = stream(cfg.seeds.alice, BITS_STREAM);
    let mut bob = stream(cfg.seeds.bob, BITS_STREAM);
    let mut source = stream(cfg.seeds.source, BITS_STREAM);
    let mut channel = ChannelSampler::new(cfg.channel, cfg.seeds.channel)?;
    let pairs = PairSource::new(cfg.mu())?;
    let mut physics = Physics::new(cfg)?;

    let mut slots = Vec::new();
    for slot_index in 0..n_slots {
        // settings are drawn every clock tick, pair or not
        let alice_x = alice.random::<bool>() as u8;
        let alice_y = alice.random::<bool>() as u8;
        let bob_z = bob.random::<bool>() as u8;
        let n_pairs = pairs.sample(&mut source);
        if n_pairs == 0 {
            if physics.detectors.is_noiseless() {
                continue;
            }
            // dark counts alone can still fake a coincidence
            let event = detect(slot_index, None, &physics.detectors, &mut source);
            if physics.registered(&event) {
                slots.push(SlotRecord {
                    slot_index,
                    n_pairs,
                    alice_x,
                    alice_y,
                    bob_z,
                    theta: channel.theta_at(slot_index)?,
                    event: Some(event),
                });
            }
            continue;
        }
        let theta = channel.theta_at(slot_index)?;
        let truth = physics.true_outcome(alice_x, alice_y, bob_z, theta, &mut source)?;
        let mut event = detect(slot_index, Some(truth), &physics.detectors, &mut source);
        event.multi_pair = n_pairs >= 2;
        slots.push(SlotRecord {
            slot_index,
            n_pairs,
            alice_x,
            alice_y,
            bob_z,
            theta,
            event: physics.registered(&event).then_some(event),
        });
    }
    Ok(Simulation {
        protocol: cfg.protocol,
        n_slots,
        slots,
    })
}

/// End-of-session figures, identical on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "SummaryRecord", from = "SummaryRecord")]
pub struct SessionSummary {
    pub n_slots: u64,
    pub n_coincidences: u64,
    pub n_sifted: u64,
    pub raw_rate_hz: f64,
    pub sifted_rate_hz: f64,
    /// `None` when nothing was left to compare.
    pub qber: Option<QberReport>,
    pub key_rate: KeyRateResult,
    pub multi_pair_fraction: f64,
    pub final_key_bits: u64,
}

/// Flat serialized form of [`SessionSummary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryRecord {
    n_slots: u64,
    n_coincidences: u64,
    n_sifted: u64,
    raw_rate_hz: f64,
    sifted_rate_hz: f64,
    qber: Option<f64>,
    qber_stderr: Option<f64>,
    n_compared: u64,
    n_errors: u64,
    key_rate: f64,
    secure: bool,
    multi_pair_fraction: f64,
    final_key_bits: u64,
}

/// Error rate assumed for key-rate bookkeeping when no estimate exists.
const NO_ESTIMATE_QBER: f64 = 1.0;

impl From<SessionSummary> for SummaryRecord {
    fn from(s: SessionSummary) -> Self {
        Self {
            n_slots: s.n_slots,
            n_coincidences: s.n_coincidences,
            n_sifted: s.n_sifted,
            raw_rate_hz: s.raw_rate_hz,
            sifted_rate_hz: s.sifted_rate_hz,
            qber: s.qber.map(|q| q.qber),
            qber_stderr: s.qber.map(|q| q.stderr),
            n_compared: s.qber.map_or(0, |q| q.n_compared),
            n_errors: s.qber.map_or(0, |q| q.n_errors),
            key_rate: s.key_rate.rate,
            secure: s.key_rate.secure,
            multi_pair_fraction: s.multi_pair_fraction,
            final_key_bits: s.final_key_bits,
        }
    }
}

impl From<SummaryRecord> for SessionSummary {
    fn from(r: SummaryRecord) -> Self {
        let qber = match (r.qber, r.qber_stderr) {
            (Some(qber), Some(stderr)) => Some(QberReport {
                n_compared: r.n_compared,
                n_errors: r.n_errors,
                qber,
                stderr,
            }),
            _ => None,
        };
        Self {
            n_slots: r.n_slots,
            n_coincidences: r.n_coincidences,
            n_sifted: r.n_sifted,
            raw_rate_hz: r.raw_rate_hz,
            sifted_rate_hz: r.sifted_rate_hz,
            qber,
            key_rate: KeyRateResult {
                qber_in: qber.map_or(NO_ESTIMATE_QBER, |q| q.qber),
                rate: r.key_rate,
                secure: r.secure,
            },
            multi_pair_fraction: r.multi_pair_fraction,
            final_key_bits: r.final_key_bits,
        }
    }
}

/// Counts both parties hold at the end of the error test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalizeInputs {
    pub n_slots: u64,
    pub duration_s: f64,
    pub n_coincidences: u64,
    /// Coincidences in slots that carried two or more pairs.
    pub n_multi_pair: u64,
    pub n_sifted: u64,
    pub qber: Option<QberReport>,
    pub n_disclosed: u64,
}

pub fn finalize(inputs: FinalizeInputs) -> Result<SessionSummary, SessionError> {
    let key_rate = match inputs.qber {
        Some(q) => key_rate(q.qber)?,
        None => KeyRateResult::insecure(NO_ESTIMATE_QBER),
    };
    let remaining = inputs.n_sifted.saturating_sub(inputs.n_disclosed);
    let final_key_bits = if key_rate.secure {
        (remaining as f64 * key_rate.rate).floor() as u64
    } else {
        0
    };
    let multi_pair_fraction = if inputs.n_coincidences == 0 {
        0.0
    } else {
        inputs.n_multi_pair as f64 / inputs.n_coincidences as f64
    };
    Ok(SessionSummary {
        n_slots: inputs.n_slots,
        n_coincidences: inputs.n_coincidences,
        n_sifted: inputs.n_sifted,
        raw_rate_hz: inputs.n_coincidences as f64 / inputs.duration_s,
        sifted_rate_hz: inputs.n_sifted as f64 / inputs.duration_s,
        qber: inputs.qber,
        key_rate,
        multi_pair_fraction,
        final_key_bits,
    })
}

/// One party's result: the agreed summary and its own key material.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyOutcome {
    pub summary: SessionSummary,
    pub kept_slots: Vec<u64>,
    pub sifted_key: Vec<u8>,
    pub disclosed: Vec<usize>,
    pub final_key: Vec<u8>,
}

fn recv_at<T: Transport>(
    link: &mut T,
    stage: Stage,
    context: &str,
) -> Result<Message, SessionError> {
    match link.recv() {
        Ok(Message::Bye(ByePayload { reason })) if stage != Stage::Closing => {
            Err(SessionError::Aborted {
                stage,
                reason: reason.unwrap_or_else(|| "no reason given".into()),
            })
        }
        Ok(m) => Ok(m),
        Err(source) => Err(SessionError::Transport {
            stage,
            context: context.to_string(),
            source,
        }),
    }
}

fn send_at<T: Transport>(
    link: &mut T,
    m: &Message,
    stage: Stage,
    context: &str,
) -> Result<(), SessionError> {
    link.send(m).map_err(|source| SessionError::Transport {
        stage,
        context: context.to_string(),
        source,
    })
}

fn unexpected(stage: Stage, expected: &str, got: &Message) -> SessionError {
    SessionError::Protocol {
        stage,
        detail: format!("expected {expected}, got {}", got.kind()),
    }
}

fn violation(stage: Stage, detail: impl Into<String>) -> SessionError {
    SessionError::Protocol {
        stage,
        detail: detail.into(),
    }
}

fn hello(cfg: &SessionConfig) -> Message {
    Message::Hello(HelloPayload {
        config: Some(cfg.to_flat()),
    })
}

fn check_hello(cfg: &SessionConfig, m: Message) -> Result<(), SessionError> {
    match m {
        Message::Hello(HelloPayload { config: Some(peer) }) => {
            let mine = cfg.to_flat();
            if peer == mine {
                Ok(())
            } else {
                Err(SessionError::Handshake(describe_mismatch(&mine, &peer)))
            }
        }
        Message::Hello(HelloPayload { config: None }) => {
            Err(SessionError::Handshake("peer sent no configuration".into()))
        }
        other => Err(unexpected(Stage::Handshake, "HELLO", &other)),
    }
}

fn describe_mismatch(mine: &FlatConfig, peer: &FlatConfig) -> String {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(mine), serde_json::to_value(peer))
    else {
        return "configurations differ".into();
    };
    let keys: Vec<&str> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.as_str())
        .collect();
    format!("configurations differ in {}", keys.join(", "))
}

/// Alice opens with her configuration and checks Bob's reply.
pub fn handshake_alice<T: Transport>(
    cfg: &SessionConfig,
    link: &mut T,
) -> Result<(), SessionError> {
    send_at(link, &hello(cfg), Stage::Handshake, "before any exchange")?;
    let reply = recv_at(link, Stage::Handshake, "waiting for Bob's HELLO")?;
    check_hello(cfg, reply)
}

/// Bob answers with his own configuration, then checks Alice's.
pub fn handshake_bob<T: Transport>(cfg: &SessionConfig, link: &mut T) -> Result<(), SessionError> {
    let first = recv_at(link, Stage::Handshake, "waiting for Alice's HELLO")?;
    send_at(link, &hello(cfg), Stage::Handshake, "replying to HELLO")?;
    check_hello(cfg, first)
}

fn exchange_summaries<T: Transport>(
    mine: SessionSummary,
    link: &mut T,
    send_first: bool,
) -> Result<(), SessionError> {
    let ctx = "summaries computed locally";
    let check = |m: Message| match m {
        Message::Summary(peer) if peer == mine => Ok(()),
        Message::Summary(_) => Err(SessionError::SummaryMismatch),
        other => Err(unexpected(Stage::Summary, "SUMMARY", &other)),
    };
    if send_first {
        send_at(link, &Message::Summary(mine), Stage::Summary, ctx)?;
        check(recv_at(link, Stage::Summary, ctx)?)
    } else {
        let got = recv_at(link, Stage::Summary, ctx)?;
        send_at(link, &Message::Summary(mine), Stage::Summary, ctx)?;
        check(got)
    }
}

fn unpack(bits: &PackedBits, n: usize, stage: Stage, what: &str) -> Result<Vec<u8>, SessionError> {
    bits.unpack(n)
        .map_err(|e| violation(stage, format!("{what}: {e}")))
}

/// Alice's side of sifting, the error test and the summary.
pub fn alice_exchange<T: Transport>(
    cfg: &SessionConfig,
    view: &AliceView,
    link: &mut T,
) -> Result<PartyOutcome, SessionError> {
    let ctx = format!("{} slots recorded", view.slots.len());
    let declared = match recv_at(link, Stage::Sifting, &ctx)? {
        Message::Detections(d) => d,
        other => return Err(unexpected(Stage::Sifting, "DETECTIONS", &other)),
    };
    let bob_z = unpack(
        &declared.bases,
        declared.slots.len(),
        Stage::Sifting,
        "bases",
    )?;

    // Bob's slots are ascending, so a merge walk finds Alice's settings.
    let mut settings = Vec::with_capacity(declared.slots.len());
    let mut cursor = 0;
    let mut n_multi_pair = 0u64;
    for &slot in &declared.slots {
        while cursor < view.slots.len() && view.slots[cursor].slot < slot {
            cursor += 1;
        }
        match view.slots.get(cursor) {
            Some(s) if s.slot == slot => {
                settings.push(*s);
                n_multi_pair += (s.n_pairs >= 2) as u64;
            }
            _ => {
                return Err(violation(
                    Stage::Sifting,
                    format!("Bob declared slot {slot} that Alice has no record of"),
                ))
            }
        }
    }
    let alice_x: Vec<u8> = settings.iter().map(|s| s.x).collect();
    let kept_slots = sift(&alice_x, &bob_z, &declared.slots)?;
    let ctx = format!(
        "{} coincidences declared, {} kept",
        declared.slots.len(),
        kept_slots.len()
    );
    send_at(
        link,
        &Message::SiftKeep(SiftKeepPayload {
            keep: kept_slots.clone(),
        }),
        Stage::Sifting,
        &ctx,
    )?;

    let sifted_key: Vec<u8> = settings
        .iter()
        .zip(&bob_z)
        .filter(|(s, z)| s.x == **z)
        .map(|(s, _)| s.y)
        .collect();

    let mut rng = stream(cfg.seeds.alice, SAMPLING_STREAM);
    let disclosed = choose_sample_positions(sifted_key.len(), cfg.sample_fraction, &mut rng)?;
    let positions: Vec<u64> = disclosed.iter().map(|&p| p as u64).collect();
    send_at(
        link,
        &Message::SampleRequest(SampleRequestPayload { positions }),
        Stage::ErrorTest,
        &ctx,
    )?;
    let bob_sample = match recv_at(link, Stage::ErrorTest, &ctx)? {
        Message::SampleBits(b) => {
            unpack(&b.bits, disclosed.len(), Stage::ErrorTest, "sample bits")?
        }
        other => return Err(unexpected(Stage::ErrorTest, "SAMPLE_BITS", &other)),
    };
    let alice_sample: Vec<u8> = disclosed.iter().map(|&p| sifted_key[p]).collect();
    send_at(
        link,
        &Message::SampleBits(SampleBitsPayload {
            bits: PackedBits::pack(&alice_sample),
        }),
        Stage::ErrorTest,
        &ctx,
    )?;

    let summary = summarize(
        cfg,
        view.n_slots,
        declared.slots.len(),
        n_multi_pair,
        &alice_sample,
        &bob_sample,
        sifted_key.len(),
    )?;
    exchange_summaries(summary, link, true)?;
    send_at(
        link,
        &Message::Bye(ByePayload::default()),
        Stage::Closing,
        "session complete",
    )?;
    match recv_at(link, Stage::Closing, "session complete")? {
        Message::Bye(_) => {}
        other => return Err(unexpected(Stage::Closing, "BYE", &other)),
    }
    let final_key = remove_disclosed(&sifted_key, &disclosed);
    Ok(PartyOutcome {
        summary,
        kept_slots,
        sifted_key,
        disclosed,
        final_key,
    })
}

/// Bob's side of sifting, the error test and the summary.
pub fn bob_exchange<T: Transport>(
    cfg: &SessionConfig,
    view: &BobView,
    link: &mut T,
) -> Result<PartyOutcome, SessionError> {
    let slots: Vec<u64> = view.detections.iter().map(|d| d.slot).collect();
    let bases: Vec<u8> = view.detections.iter().map(|d| d.z).collect();
    let ctx = format!("{} coincidences recorded", slots.len());
    send_at(
        link,
        &Message::Detections(DetectionsPayload {
            slots,
            bases: PackedBits::pack(&bases),
            bits: None,
            multi: None,
        }),
        Stage::Sifting,
        &ctx,
    )?;
    let keep = match recv_at(link, Stage::Sifting, &ctx)? {
        Message::SiftKeep(k) => k.keep,
        other => return Err(unexpected(Stage::Sifting, "SIFT_KEEP", &other)),
    };
    let mut sifted_key = Vec::with_capacity(keep.len());
    let mut cursor = 0;
    for &slot in &keep {
        while cursor < view.detections.len() && view.detections[cursor].slot < slot {
            cursor += 1;
        }
        match view.detections.get(cursor) {
            Some(d) if d.slot == slot => sifted_key.push(d.bit),
            _ => {
                return Err(violation(
                    Stage::Sifting,
                    format!("Alice kept undeclared slot {slot}"),
                ))
            }
        }
    }

    let ctx = format!(
        "{} coincidences, {} sifted",
        view.detections.len(),
        keep.len()
    );
    let positions = match recv_at(link, Stage::ErrorTest, &ctx)? {
        Message::SampleRequest(r) => r.positions,
        other => return Err(unexpected(Stage::ErrorTest, "SAMPLE_REQUEST", &other)),
    };
    let mut disclosed = Vec::with_capacity(positions.len());
    for &p in &positions {
        match usize::try_from(p).ok().filter(|&p| p < sifted_key.len()) {
            Some(p) => disclosed.push(p),
            None => {
                return Err(violation(
                    Stage::ErrorTest,
                    format!("sample position {p} beyond the sifted key"),
                ))
            }
        }
    }
    let bob_sample: Vec<u8> = disclosed.iter().map(|&p| sifted_key[p]).collect();
    send_at(
        link,
        &Message::SampleBits(SampleBitsPayload {
            bits: PackedBits::pack(&bob_sample),
        }),
        Stage::ErrorTest,
        &ctx,
    )?;
    let alice_sample = match recv_at(link, Stage::ErrorTest, &ctx)? {
        Message::SampleBits(b) => {
            unpack(&b.bits, disclosed.len(), Stage::ErrorTest, "sample bits")?
        }
        other => return Err(unexpected(Stage::ErrorTest, "SAMPLE_BITS", &other)),
    };

    let n_multi_pair = view.detections.iter().filter(|d| d.multi_pair).count() as u64;
    let summary = summarize(
        cfg,
        view.n_slots,
        view.detections.len(),
        n_multi_pair,
        &alice_sample,
        &bob_sample,
        sifted_key.len(),
    )?;
    exchange_summaries(summary, link, false)?;
    match recv_at(link, Stage::Closing, "session complete")? {
        Message::Bye(_) => {}
        other => return Err(unexpected(Stage::Closing, "BYE", &other)),
    }
    send_at(
        link,
        &Message::Bye(ByePayload::default()),
        Stage::Closing,
        "session complete",
    )?;
    let final_key = remove_disclosed(&sifted_key, &disclosed);
    Ok(PartyOutcome {
        summary,
        kept_slots: keep,
        sifted_key,
        disclosed,
        final_key,
    })
}

fn summarize(
    cfg: &SessionConfig,
    n_slots: u64,
    n_coincidences: usize,
    n_multi_pair: u64,
    alice_sample: &[u8],
    bob_sample: &[u8],
    n_sifted: usize,
) -> Result<SessionSummary, SessionError> {
    let qber = if alice_sample.is_empty() {
        None
    } else {
        let errors = alice_sample
            .iter()
            .zip(bob_sample)
            .filter(|(a, b)| a != b)
            .count();
        Some(QberReport::from_counts(
            alice_sample.len() as u64,
            errors as u64,
        )?)
    };
    finalize(FinalizeInputs {
        n_slots,
        duration_s: cfg.duration_s,
        n_coincidences: n_coincidences as u64,
        n_multi_pair,
        n_sifted: n_sifted as u64,
        qber,
        n_disclosed: alice_sample.len() as u64,
    })
}

/// Both parties' results of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub summary: SessionSummary,
    pub alice: PartyOutcome,
    pub bob: PartyOutcome,
}

/// Simulates a session and runs both parties over the given link, Bob on
/// a helper thread. The endpoints are dropped as soon as their party
/// finishes so that a failure on one side unblocks the other.
pub fn run_session<A, B>(
    cfg: &SessionConfig,
    alice_link: A,
    bob_link: B,
) -> Result<SessionReport, SessionError>
where
    A: Transport,
    B: Transport + Send,
{
    let sim = simulate(cfg)?;
    let alice_view = sim.alice_view();
    let bob_view = sim.bob_view();
    drop(sim);
    let (alice, bob) = thread::scope(|scope| {
        let bob = scope.spawn(move || {
            let mut link = bob_link;
            handshake_bob(cfg, &mut link)?;
            bob_exchange(cfg, &bob_view, &mut link)
        });
        let alice = {
            let mut link = alice_link;
            handshake_alice(cfg, &mut link)
                .and_then(|()| alice_exchange(cfg, &alice_view, &mut link))
        };
        let bob = bob.join().unwrap_or_else(|_| {
            Err(SessionError::Protocol {
                stage: Stage::Closing,
                detail: "Bob's thread panicked".into(),
            })
        });
        (alice, bob)
    });
    match (alice, bob) {
        (Ok(alice), Ok(bob)) => Ok(SessionReport {
            summary: alice.summary,
            alice,
            bob,
        }),
        (Err(a), Err(b)) if a.is_peer_closed() && !b.is_peer_closed() => Err(b),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Convenience wrapper over an in-memory link.
pub fn run_session_in_process(cfg: &SessionConfig) -> Result<SessionReport, SessionError> {
    let (a, b) = crate::transport::InProcessTransport::pair();
    run_session(cfg, a, b)
}

/// Networked Alice: handshake, simulate the quantum link, replay Bob's raw
/// record to him, then reconcile.
pub fn serve_alice<T: Transport>(
    cfg: &SessionConfig,
    link: &mut T,
) -> Result<PartyOutcome, SessionError> {
    handshake_alice(cfg, link)?;
    let sim = simulate(cfg)?;
    let bob = sim.bob_view();
    let replay = Message::Detections(DetectionsPayload {
        slots: bob.detections.iter().map(|d| d.slot).collect(),
        bases: PackedBits::pack(&bob.detections.iter().map(|d| d.z).collect::<Vec<_>>()),
        bits: Some(PackedBits::pack(
            &bob.detections.iter().map(|d| d.bit).collect::<Vec<_>>(),
        )),
        multi: Some(PackedBits::pack(
            &bob.detections
                .iter()
                .map(|d| d.multi_pair as u8)
                .collect::<Vec<_>>(),
        )),
    });
    let ctx = format!("{} coincidences simulated", bob.detections.len());
    send_at(link, &replay, Stage::QuantumLink, &ctx)?;
    alice_exchange(cfg, &sim.alice_view(), link)
}

/// Networked Bob: handshake, receive the raw record, then reconcile.
pub fn connect_bob<T: Transport>(
    cfg: &SessionConfig,
    link: &mut T,
) -> Result<PartyOutcome, SessionError> {
    handshake_bob(cfg, link)?;
    let replay = match recv_at(
        link,
        Stage::QuantumLink,
        "waiting for the measurement record",
    )? {
        Message::Detections(d) => d,
        other => return Err(unexpected(Stage::QuantumLink, "DETECTIONS", &other)),
    };
    let n = replay.slots.len();
    let stage = Stage::QuantumLink;
    let z = unpack(&replay.bases, n, stage, "bases")?;
    let bits = unpack(
        replay
            .bits
            .as_ref()
            .ok_or_else(|| violation(stage, "record without bits"))?,
        n,
        stage,
        "bits",
    )?;
    let multi = unpack(
        replay
            .multi
            .as_ref()
            .ok_or_else(|| violation(stage, "record without multi-pair flags"))?,
        n,
        stage,
        "multi",
    )?;
    let view = BobView {
        n_slots: cfg.n_slots(),
        detections: (0..n)
            .map(|i| BobDetection {
                slot: replay.slots[i],
                z: z[i],
                bit: bits[i],
                multi_pair: multi[i] == 1,
            })
            .collect(),
    };
    bob_exchange(cfg, &view, link)
}

/// Mean of `(cos 2θ, sin 2θ)` over the slots of a session.
pub fn mean_double_angle(model: &ChannelModel, n_slots: u64) -> (f64, f64) {
    match *model {
        ChannelModel::Static { theta } => ((2.0 * theta).cos(), (2.0 * theta).sin()),
        ChannelModel::PerSlotUniform { lo, hi } => {
            if hi > lo {
                let w = 2.0 * (hi - lo);
                (
                    ((2.0 * hi).sin() - (2.0 * lo).sin()) / w,
                    ((2.0 * lo).cos() - (2.0 * hi).cos()) / w,
                )
            } else {
                ((2.0 * lo).cos(), (2.0 * lo).sin())
            }
        }
        ChannelModel::RandomWalk { theta0, step_sigma } => {
            // E[e^{2iθ(s)}] = e^{2iθ0}·r^s with r = e^{-2σ²}, averaged over s < n
            let r = (-2.0 * step_sigma * step_sigma).exp();
            let n = n_slots.max(1) as f64;
            let damping = if r < 1.0 {
                (1.0 - r.powf(n)) / (n * (1.0 - r))
            } else {
                1.0
            };
            (
                damping * (2.0 * theta0).cos(),
                damping * (2.0 * theta0).sin(),
            )
        }
    }
}

/// Channel average of a vector quantity that is affine in `(cos 2θ, sin 2θ)`,
/// as every Born probability after a rotation is.
fn channel_average<const K: usize>(
    model: &ChannelModel,
    n_slots: u64,
    f: impl Fn(f64) -> Result<[f64; K], SessionError>,
) -> Result<[f64; K], SessionError> {
    let (ec, es) = mean_double_angle(model, n_slots);
    let at0 = f(0.0)?;
    let at45 = f(std::f64::consts::FRAC_PI_4)?;
    let at90 = f(std::f64::consts::FRAC_PI_2)?;
    Ok(std::array::from_fn(|k| {
        let a = (at0[k] + at90[k]) / 2.0;
        let b = (at0[k] - at90[k]) / 2.0;
        let c = at45[k] - a;
        a + b * ec + c * es
    }))
}

/// Per-pair-slot probabilities of the session's observables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotExpectation {
    /// A registered coincidence.
    pub p_coincidence: f64,
    /// A registered coincidence with matching bases.
    pub p_sifted: f64,
    /// A sifted bit that disagrees with Alice's.
    pub p_sifted_error: f64,
}

impl SlotExpectation {
    pub fn qber(&self) -> Option<f64> {
        (self.p_sifted > 0.0).then(|| self.p_sifted_error / self.p_sifted)
    }
}

/// Closed-form counterpart of [`simulate`] for one slot carrying a pair.
pub fn slot_expectation(cfg: &SessionConfig) -> Result<SlotExpectation, SessionError> {
    cfg.validate()?;
    let n_slots = cfg.n_slots();
    let mut out = SlotExpectation {
        p_coincidence: 0.0,
        p_sifted: 0.0,
        p_sifted_error: 0.0,
    };
    match cfg.protocol {
        Protocol::Dfs2 => {
            let source = werner_mix(&psi_minus(), cfg.visibility)?;
            for s in 0..4u8 {
                let (x, y) = (s >> 1, s & 1);
                let encoded = encode_state(x, y, &source);
                for z in 0..2u8 {
                    let truth = channel_average(&cfg.channel, n_slots, |theta| {
                        Ok(dfs_outcome_probs(
                            &apply_collective(&channel_unitary(theta), &encoded),
                            z,
                        ))
                    })?;
                    for (o, &p_true) in truth.iter().enumerate() {
                        let seen = coincidence_distribution(Some(o), &cfg.detectors);
                        for (k, &p_seen) in seen.iter().enumerate() {
                            let w = p_true * p_seen / 8.0;
                            out.p_coincidence += w;
                            if x == z {
                                out.p_sifted += w;
                                if outcome_index_to_bit(k) != y {
                                    out.p_sifted_error += w;
                                }
                            }
                        }
                    }
                }
            }
        }
        Protocol::Bb84 => {
            let source = werner_mix(&psi_minus(), cfg.visibility)?;
            let (p_herald, _) = herald_photon1(&source, &basis_ket(BasisLabel::Plus))?;
            let trigger = [p_herald, 1.0 - p_herald];
            for s in 0..4u8 {
                let (x, y) = (s >> 1, s & 1);
                let prepared = bb84_prepare(x, y, cfg.visibility)?;
                for z in 0..2u8 {
                    let port1 = channel_average(&cfg.channel, n_slots, |theta| {
                        Ok(bb84_bit_probs(
                            &prepared.evolve(&rotation_unitary(theta)),
                            z,
                        ))
                    })?;
                    for (p1, &pp1) in port1.iter().enumerate() {
                        for (p2, &pp2) in trigger.iter().enumerate() {
                            let seen = coincidence_distribution(Some(2 * p1 + p2), &cfg.detectors);
                            // only the |+⟩ trigger port (D3) heralds
                            for k in [0usize, 2] {
                                let w = pp1 * pp2 * seen[k] / 8.0;
                                out.p_coincidence += w;
                                if x == z {
                                    out.p_sifted += w;
                                    if (k >> 1) as u8 != y {
                                        out.p_sifted_error += w;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-slot probabilities for a slot without pairs, where only dark counts
/// click. Bob's bit is then independent of Alice's.
pub fn dark_slot_expectation(cfg: &SessionConfig) -> SlotExpectation {
    let seen = coincidence_distribution(None, &cfg.detectors);
    let p_coincidence = match cfg.protocol {
        Protocol::Dfs2 => seen.iter().sum(),
        Protocol::Bb84 => seen[0] + seen[2],
    };
    SlotExpectation {
        p_coincidence,
        p_sifted: p_coincidence / 2.0,
        p_sifted_error: p_coincidence / 4.0,
    }
}

/// Expected session summary in closed form: counts are rounded
/// expectations and the error rate is exact.
pub fn expected_summary(cfg: &SessionConfig) -> Result<SessionSummary, SessionError> {
    let pair = slot_expectation(cfg)?;
    let dark = dark_slot_expectation(cfg);
    let mu = cfg.mu();
    let n_slots = cfg.n_slots();
    let p_pair = -(-mu).exp_m1();
    let p_empty = 1.0 - p_pair;
    let p_multi = p_pair - mu * (-mu).exp();
    let slot = SlotExpectation {
        p_coincidence: p_pair * pair.p_coincidence + p_empty * dark.p_coincidence,
        p_sifted: p_pair * pair.p_sifted + p_empty * dark.p_sifted,
        p_sifted_error: p_pair * pair.p_sifted_error + p_empty * dark.p_sifted_error,
    };
    let n_coincidences = (n_slots as f64 * slot.p_coincidence).round() as u64;
    let n_sifted = (n_slots as f64 * slot.p_sifted).round() as u64;
    let n_compared = if n_sifted == 0 {
        0
    } else {
        ((n_sifted as f64 * cfg.sample_fraction).round() as u64).clamp(1, n_sifted)
    };
    let qber = match slot.qber() {
        Some(q) if n_compared > 0 => Some(QberReport {
            n_compared,
            n_errors: (q * n_compared as f64).round() as u64,
            qber: q,
            stderr: (q * (1.0 - q) / n_compared as f64).sqrt(),
        }),
        _ => None,
    };
    let mut summary = finalize(FinalizeInputs {
        n_slots,
        duration_s: cfg.duration_s,
        n_coincidences,
        n_multi_pair: 0,
        n_sifted,
        qber,
        n_disclosed: n_compared,
    })?;
    summary.multi_pair_fraction = if slot.p_coincidence > 0.0 {
        p_multi * pair.p_coincidence / slot.p_coincidence
    } else {
        0.0
    };
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::InProcessTransport;

    fn short(protocol: Protocol, seconds: f64) -> SessionConfig {
        SessionConfig {
            protocol,
            duration_s: seconds,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn poisson_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(poisson_pairs(0.0, &mut rng).unwrap(), 0);
        }
        assert!(poisson_pairs(1.0, &mut rng).is_err());
        assert!(poisson_pairs(-0.1, &mut rng).is_err());
    }

    #[test]
    fn poisson_mean_and_tail() {
        let mu = 0.04;
        let n = 10_000_000u64;
        let src = PairSource::new(mu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut total, mut multi) = (0u64, 0u64);
        for _ in 0..n {
            let k = src.sample(&mut rng) as u64;
            total += k;
            multi += (k >= 2) as u64;
        }
        let mean = total as f64 / n as f64;
        assert!(
            (mean - mu).abs() < 4.0 * (mu / n as f64).sqrt(),
            "mean {mean}"
        );
        let tail = 1.0 - (-mu).exp() * (1.0 + mu);
        assert!((tail - 7.789e-4).abs() < 1e-6);
        let f = multi as f64 / n as f64;
        assert!(
            (f - tail).abs() < 4.0 * (tail / n as f64).sqrt(),
            "tail {f}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig::default().validate().is_ok());
        let bad = [
            SessionConfig {
                clock_hz: 0.0,
                ..Default::default()
            },
            SessionConfig {
                pair_rate_hz: -1.0,
                ..Default::default()
            },
            SessionConfig {
                duration_s: 0.0,
                ..Default::default()
            },
            SessionConfig {
                pair_rate_hz: 2e5,
                ..Default::default()
            },
            SessionConfig {
                visibility: 1.1,
                ..Default::default()
            },
            SessionConfig {
                sample_fraction: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(SessionError::Config(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn flat_config_round_trip_and_defaults() {
        let cfg = SessionConfig {
            channel: ChannelModel::RandomWalk {
                theta0: 0.25,
                step_sigma: 0.001,
            },
            detectors: DetectorParams {
                efficiency: [0.9, 0.8, 0.9, 0.9],
                dark_count_prob: [1e-4; 4],
                coincidence_window_ns: 5.0,
            },
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SessionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_flat(), cfg.to_flat());

        let partial: SessionConfig =
            serde_json::from_str(r#"{"protocol":"bb84","theta_deg":30}"#).unwrap();
        assert_eq!(partial.protocol, Protocol::Bb84);
        assert!(
            matches!(partial.channel, ChannelModel::Static { theta } if (theta - 30f64.to_radians()).abs() < 1e-15)
        );
        assert_eq!(partial.duration_s, 50.0);
        assert!(serde_json::from_str::<SessionConfig>(r#"{"bogus":1}"#).is_err());
        assert!(serde_json::from_str::<SessionConfig>(r#"{"visibility":2}"#).is_err());
    }

    #[test]
    fn summary_json_is_flat() {
        let s = finalize(FinalizeInputs {
            n_slots: 100,
            duration_s: 1.0,
            n_coincidences: 10,
            n_multi_pair: 1,
            n_sifted: 5,
            qber: Some(QberReport::from_counts(5, 0).unwrap()),
            n_disclosed: 5,
        })
        .unwrap();
        let v = serde_json::to_value(s).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "n_slots",
            "n_coincidences",
            "n_sifted",
            "raw_rate_hz",
            "sifted_rate_hz",
            "qber",
            "key_rate",
            "multi_pair_fraction",
            "final_key_bits",
        ] {
            assert!(obj.contains_key(key), "{key}");
        }
        assert!(obj.values().all(|v| !v.is_object() && !v.is_array()));
        let back: SessionSummary = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn finalize_rules() {
        let base = FinalizeInputs {
            n_slots: 5_000_000,
            duration_s: 50.0,
            n_coincidences: 200_000,
            n_multi_pair: 4_000,
            n_sifted: 100_000,
            qber: Some(QberReport::from_counts(10_000, 600).unwrap()),
            n_disclosed: 10_000,
        };
        let ok = finalize(base).unwrap();
        assert!(ok.key_rate.secure);
        assert!((ok.key_rate.rate - 0.3451).abs() < 1e-4);
        assert_eq!(
            ok.final_key_bits,
            (90_000.0 * ok.key_rate.rate).floor() as u64
        );
        assert_eq!(ok.multi_pair_fraction, 0.02);
        assert_eq!(ok.sifted_rate_hz, 2000.0);

        let bad = finalize(FinalizeInputs {
            qber: Some(QberReport::from_counts(10_000, 1_500).unwrap()),
            ..base
        })
        .unwrap();
        assert!(!bad.key_rate.secure);
        assert_eq!(bad.final_key_bits, 0);
    }

    #[test]
    fn empty_source_yields_no_key() {
        let cfg = SessionConfig {
            pair_rate_hz: 0.0,
            duration_s: 1.0,
            ..Default::default()
        };
        let report = run_session_in_process(&cfg).unwrap();
        let s = report.summary;
        assert_eq!((s.n_coincidences, s.n_sifted, s.final_key_bits), (0, 0, 0));
        assert!(s.qber.is_none());
        assert!(!s.key_rate.secure);
        let json = serde_json::to_value(s).unwrap();
        assert!(json["qber"].is_null());
    }

    #[test]
    fn both_parties_agree() {
        let report = run_session_in_process(&short(Protocol::Dfs2, 2.0)).unwrap();
        assert_eq!(report.alice.kept_slots, report.bob.kept_slots);
        assert_eq!(report.alice.disclosed, report.bob.disclosed);
        assert_eq!(report.alice.summary, report.bob.summary);
        let q = report.summary.qber.unwrap();
        let agree = report
            .alice
            .disclosed
            .iter()
            .filter(|&&p| report.alice.sifted_key[p] == report.bob.sifted_key[p])
            .count() as u64;
        assert_eq!(agree, q.n_compared - q.n_errors);
        assert_eq!(
            report.alice.final_key.len() as u64,
            report.summary.n_sifted - q.n_compared
        );
    }

    #[test]
    fn single_coincidence_sifting() {
        let cfg = short(Protocol::Dfs2, 1.0);
        for (x, z, kept) in [(1u8, 1u8, 1usize), (0, 1, 0)] {
            let alice = AliceView {
                n_slots: 10,
                slots: vec![AliceSlot {
                    slot: 4,
                    n_pairs: 1,
                    x,
                    y: 1,
                }],
            };
            let bob = BobView {
                n_slots: 10,
                detections: vec![BobDetection {
                    slot: 4,
                    z,
                    bit: 1,
                    multi_pair: false,
                }],
            };
            let (mut a, mut b) = InProcessTransport::pair();
            let (ra, rb) = thread::scope(|s| {
                let h = s.spawn(|| bob_exchange(&cfg, &bob, &mut b));
                let ra = alice_exchange(&cfg, &alice, &mut a);
                (ra, h.join().unwrap())
            });
            let (ra, rb) = (ra.unwrap(), rb.unwrap());
            assert_eq!(ra.sifted_key.len(), kept);
            assert_eq!(rb.sifted_key.len(), kept);
        }
    }

    #[test]
    fn undeclared_slot_is_a_violation() {
        let cfg = short(Protocol::Dfs2, 1.0);
        let alice = AliceView {
            n_slots: 10,
            slots: vec![AliceSlot {
                slot: 4,
                n_pairs: 1,
                x: 0,
                y: 0,
            }],
        };
        let bob = BobView {
            n_slots: 10,
            detections: vec![BobDetection {
                slot: 5,
                z: 0,
                bit: 0,
                multi_pair: false,
            }],
        };
        let (a, mut b) = InProcessTransport::pair();
        let bob_cfg = cfg.clone();
        let ra = thread::scope(|s| {
            s.spawn(move || {
                let _ = bob_exchange(&bob_cfg, &bob, &mut b);
            });
            let mut a = a;
            alice_exchange(&cfg, &alice, &mut a)
        });
        assert!(matches!(
            ra,
            Err(SessionError::Protocol {
                stage: Stage::Sifting,
                ..
            })
        ));
    }

    #[test]
    fn handshake_mismatch_fails_both_sides() {
        let cfg_a = short(Protocol::Dfs2, 1.0);
        let mut cfg_b = cfg_a.clone();
        cfg_b.seeds.bob = 77;
        let (mut a, mut b) = InProcessTransport::pair();
        let (ra, rb) = thread::scope(|s| {
            let h = s.spawn(|| handshake_bob(&cfg_b, &mut b));
            (handshake_alice(&cfg_a, &mut a), h.join().unwrap())
        });
        assert!(matches!(ra, Err(SessionError::Handshake(ref m)) if m.contains("seed_bob")));
        assert!(matches!(rb, Err(SessionError::Handshake(_))));
    }

    #[test]
    fn sessions_are_deterministic() {
        let cfg = SessionConfig {
            channel: ChannelModel::PerSlotUniform { lo: -0.5, hi: 0.5 },
            detectors: DetectorParams::uniform(0.7, 1e-3),
            ..short(Protocol::Bb84, 1.0)
        };
        let a = run_session_in_process(&cfg).unwrap();
        let b = run_session_in_process(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seeds.source = 99;
        assert_ne!(
            run_session_in_process(&other).unwrap().alice.sifted_key,
            a.alice.sifted_key
        );
    }

    #[test]
    fn simulation_records_are_consistent() {
        let cfg = SessionConfig {
            detectors: DetectorParams::uniform(0.5, 0.0),
            ..short(Protocol::Dfs2, 1.0)
        };
        let sim = simulate(&cfg).unwrap();
        assert_eq!(sim.n_slots, 100_000);
        assert!(sim
            .slots
            .windows(2)
            .all(|w| w[0].slot_index < w[1].slot_index));
        for r in &sim.slots {
            assert!(r.n_pairs >= 1);
            if let Some(ev) = r.event {
                assert!(ev.is_coincidence);
                assert_eq!(ev.slot_index, r.slot_index);
                assert_eq!(ev.multi_pair, r.n_pairs >= 2);
            }
        }
        // efficiency 0.5 on both arms: a quarter of the pair slots coincide
        let frac = sim.n_coincidences() as f64 / sim.slots.len() as f64;
        let n = sim.slots.len() as f64;
        assert!((frac - 0.25).abs() < 4.0 * (0.25 * 0.75 / n).sqrt());
    }

    #[test]
    fn expected_qber_matches_closed_form() {
        for protocol in [Protocol::Dfs2, Protocol::Bb84] {
            for deg in [0.0f64, 10.0, 27.0, 45.0] {
                let cfg = SessionConfig {
                    protocol,
                    channel: ChannelModel::Static {
                        theta: deg.to_radians(),
                    },
                    ..Default::default()
                };
                let q = slot_expectation(&cfg).unwrap().qber().unwrap();
                let want = crate::protocol::predicted_qber(protocol, deg.to_radians(), 0.88);
                assert!((q - want).abs() < 1e-12, "{protocol} {deg}: {q} vs {want}");
            }
        }
    }

    #[test]
    fn uniform_channel_average_against_quadrature() {
        let (lo, hi) = (-0.3f64, 0.9f64);
        let model = ChannelModel::PerSlotUniform { lo, hi };
        let cfg = SessionConfig {
            protocol: Protocol::Bb84,
            channel: model,
            ..Default::default()
        };
        let q = slot_expectation(&cfg).unwrap().qber().unwrap();
        // midpoint rule for the mean of 0.06 + 0.88·sin²θ over [lo, hi]
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mean: f64 = (0..n)
            .map(|i| {
                crate::protocol::predicted_qber(Protocol::Bb84, lo + (i as f64 + 0.5) * h, 0.88)
            })
            .sum::<f64>()
            / n as f64;
        assert!((q - mean).abs() < 1e-9);
    }

    #[test]
    fn random_walk_average_against_direct_sum() {
        let model = ChannelModel::RandomWalk {
            theta0: 0.4,
            step_sigma: 0.002,
        };
        let n = 20_000u64;
        let (ec, _) = mean_double_angle(&model, n);
        let direct: f64 = (0..n)
            .map(|s| (0.8f64).cos() * (-2.0 * 4e-6 * s as f64).exp())
            .sum::<f64>()
            / n as f64;
        assert!((ec - direct).abs() < 1e-12);
    }

    #[test]
    fn detector_losses_in_closed_form() {
        let cfg = SessionConfig {
            detectors: DetectorParams::uniform(0.5, 0.0),
            ..short(Protocol::Dfs2, 10.0)
        };
        let e = slot_expectation(&cfg).unwrap();
        assert!((e.p_coincidence - 0.25).abs() < 1e-12);
        assert!((e.p_sifted - 0.125).abs() < 1e-12);
        let bb = SessionConfig {
            protocol: Protocol::Bb84,
            ..cfg
        };
        // heralding keeps half of the pairs
        assert!((slot_expectation(&bb).unwrap().p_coincidence - 0.125).abs() < 1e-12);
    }

    #[test]
    fn dark_only_coincidences() {
        for protocol in [Protocol::Dfs2, Protocol::Bb84] {
            let cfg = SessionConfig {
                protocol,
                pair_rate_hz: 400.0,
                detectors: DetectorParams::uniform(0.9, 0.02),
                sample_fraction: 1.0,
                ..short(protocol, 20.0)
            };
            let sim = simulate(&cfg).unwrap();
            assert!(sim
                .slots
                .iter()
                .any(|r| r.n_pairs == 0 && r.event.is_some()));
            assert!(sim.slots.iter().all(|r| r.n_pairs > 0 || r.event.is_some()));
            let got = run_session_in_process(&cfg).unwrap().summary;
            let want = expected_summary(&cfg).unwrap();
            let tol = |n: u64| 4.0 * (n as f64).sqrt();
            assert!(
                (got.n_coincidences.abs_diff(want.n_coincidences) as f64)
                    < tol(want.n_coincidences)
            );
            let (gq, wq) = (got.qber.unwrap(), want.qber.unwrap());
            assert!(
                (gq.qber - wq.qber).abs() < 4.0 * wq.stderr,
                "{protocol}: {} vs {}",
                gq.qber,
                wq.qber
            );
            let sd = (want.multi_pair_fraction / got.n_coincidences as f64).sqrt();
            assert!((got.multi_pair_fraction - want.multi_pair_fraction).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn expected_summary_bookkeeping() {
        let s = expected_summary(&SessionConfig::default()).unwrap();
        let mu: f64 = 0.04;
        assert_eq!(s.n_coincidences, (5e6 * (1.0 - (-mu).exp())).round() as u64);
        assert!((s.multi_pair_fraction - 0.019_866_670).abs() < 1e-8);
        assert!((s.qber.unwrap().qber - 0.06).abs() < 1e-12);
        let none = expected_summary(&SessionConfig {
            pair_rate_hz: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(none.qber.is_none() && none.n_coincidences == 0);
    }
}

//! DFS-encoded BB84 over two photons, and the single-photon BB84 baseline.
//!
//! Alice encodes her basis `x` and bit `y` by switching modulators M1–M3 on
//! photon 1 of a singlet pair. The light traverses M3 first, then M2, then
//! M1; this is the only order for which all four encoder rows land on the
//! intended logical states. Bob switches M4 on photon 1 for the diagonal
//! basis and reads both photons behind polarizing beam splitters.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{eom_unitary, rotation_unitary, Detector, Modulator};
use crate::qstate::{
    apply_collective, apply_photon, basis_ket, born_probs, psi_minus, sample_outcome, tensor,
    werner_mix, BasisLabel, Photon, PolarizationUnitary, QstateError, SinglePhotonDensity,
    SinglePhotonKet, TwoPhotonDensity, TwoPhotonKet, TwoPhotonState,
};

/// Key distillation is possible only strictly below this error rate.
pub const SECURITY_THRESHOLD: f64 = 0.11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("sifted keys are empty")]
    EmptyKey,
    #[error("length mismatch: {0}")]
    Misaligned(String),
    #[error("sample fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("qber {0} outside [0, 1]")]
    QberOutOfRange(f64),
    #[error("visibility {0} outside [0, 1]")]
    VisibilityOutOfRange(f64),
    #[error(transparent)]
    State(#[from] QstateError),
}

/// Which protocol a session or sweep point runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Two-photon encoding in the decoherence-free subspace.
    Dfs2,
    /// Heralded single-photon BB84.
    Bb84,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Dfs2 => "dfs2",
            Protocol::Bb84 => "bb84",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dfs2" | "dfs" => Ok(Protocol::Dfs2),
            "bb84" => Ok(Protocol::Bb84),
            other => Err(format!(
                "unknown protocol `{other}` (expected dfs2 or bb84)"
            )),
        }
    }
}

/// Basis bit shared by Alice's `x` and Bob's `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// `{|H̄⟩, |V̄⟩}`, or `{H, V}` for single photons.
    Rectilinear,
    /// `{|+'⟩, |−'⟩}`, or `{+, −}` for single photons.
    Diagonal,
}

impl Basis {
    pub fn from_bit(bit: u8) -> Self {
        if bit & 1 == 0 {
            Basis::Rectilinear
        } else {
            Basis::Diagonal
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }
}

/// On/off state of M1, M2, M3 for one encoder row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModulatorPattern {
    pub m1: bool,
    pub m2: bool,
    pub m3: bool,
}

/// Encoder table: which modulators fire for basis `x` and bit `y`.
pub fn modulator_pattern(x: u8, y: u8) -> ModulatorPattern {
    let (m1, m2, m3) = match (x & 1, y & 1) {
        (0, 0) => (false, false, false),
        (0, 1) => (true, true, false),
        (1, 0) => (false, true, true),
        _ => (true, false, true),
    };
    ModulatorPattern { m1, m2, m3 }
}

/// Logical state for `(x, y)`, expanded in the product basis:
/// `|V̄⟩ = ψ⁻`, `|H̄⟩ = φ⁺`, `|+'⟩ = (H+ − V−)/√2`, `|−'⟩ = (H− + V+)/√2`.
pub fn encoded_target(x: u8, y: u8) -> TwoPhotonKet {
    let h = basis_ket(BasisLabel::H);
    let v = basis_ket(BasisLabel::V);
    let p = basis_ket(BasisLabel::Plus);
    let m = basis_ket(BasisLabel::Minus);
    let combine = |a: TwoPhotonKet, sa: f64, b: TwoPhotonKet, sb: f64| {
        let (a, b) = (a.amps(), b.amps());
        let amps = std::array::from_fn(|i| (a[i] * sa + b[i] * sb) * FRAC_1_SQRT_2);
        TwoPhotonKet::new(amps).expect("Bell-type combination has unit norm")
    };
    match (x & 1, y & 1) {
        (0, 0) => combine(tensor(&h, &v), 1.0, tensor(&v, &h), -1.0),
        (0, 1) => combine(tensor(&h, &h), 1.0, tensor(&v, &v), 1.0),
        (1, 0) => combine(tensor(&h, &m), 1.0, tensor(&v, &p), 1.0),
        _ => combine(tensor(&h, &p), 1.0, tensor(&v, &m), -1.0),
    }
}

/// One encoder row: the inputs, the modulator pattern and the logical state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedSymbol {
    pub x: u8,
    pub y: u8,
    pub modulators: ModulatorPattern,
    pub target: TwoPhotonKet,
}

pub fn encoded_symbol(x: u8, y: u8) -> EncodedSymbol {
    EncodedSymbol {
        x: x & 1,
        y: y & 1,
        modulators: modulator_pattern(x, y),
        target: encoded_target(x, y),
    }
}

/// Product of the energized modulators on photon 1, in matrix order
/// `M1·M2·M3` (M3 acts first).
pub fn alice_unitary(x: u8, y: u8) -> PolarizationUnitary {
    let pattern = modulator_pattern(x, y);
    [
        (Modulator::M1, pattern.m1),
        (Modulator::M2, pattern.m2),
        (Modulator::M3, pattern.m3),
    ]
    .iter()
    .fold(PolarizationUnitary::identity(), |acc, &(m, on)| {
        acc.then_after(&eom_unitary(m.setting(on)))
    })
}

/// Encodes `(x, y)` onto a singlet source, pure or mixed.
pub fn encode_state<S: TwoPhotonState>(x: u8, y: u8, source: &S) -> S {
    apply_photon(&alice_unitary(x, y), Photon::One, source)
}

/// Element placed in front of Bob's photon-1 beam splitter.
pub fn bob_pre_rotation(z: u8) -> PolarizationUnitary {
    eom_unitary(Modulator::M4.setting(z & 1 == 1))
}

/// Polarizer kets seen by D1 and D3 once M4 is folded into the analyzer:
/// a click behind `U` at port `H` projects onto `U†|H⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BobAnalyzers {
    pub photon1: SinglePhotonKet,
    pub photon2: SinglePhotonKet,
}

pub fn bob_analyzers(z: u8) -> BobAnalyzers {
    let h = basis_ket(BasisLabel::H);
    BobAnalyzers {
        photon1: h.evolve(&bob_pre_rotation(z).adjoint()),
        photon2: h,
    }
}

/// A two-detector coincidence, one per photon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoincidenceOutcome {
    pub photon1: Detector,
    pub photon2: Detector,
}

impl CoincidenceOutcome {
    pub fn from_index(outcome: usize) -> Self {
        let (photon1, photon2) = crate::optics::outcome_detectors(outcome);
        Self { photon1, photon2 }
    }
}

/// `(D1, D4)` and `(D2, D3)` read as 0, everything else as 1.
pub fn outcome_to_bit(o: CoincidenceOutcome) -> u8 {
    match (o.photon1, o.photon2) {
        (Detector::D1, Detector::D4) | (Detector::D2, Detector::D3) => 0,
        _ => 1,
    }
}

/// Bit read from an outcome index `2·port1 + port2`.
pub fn outcome_index_to_bit(outcome: usize) -> u8 {
    outcome_to_bit(CoincidenceOutcome::from_index(outcome))
}

/// Which detector sits on which output port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortAssignment {
    pub detector: Detector,
    pub photon: Photon,
    /// Polarization transmitted to the detector by the beam splitter.
    pub port: BasisLabel,
}

pub fn decode_convention() -> [PortAssignment; 4] {
    [
        PortAssignment {
            detector: Detector::D1,
            photon: Photon::One,
            port: BasisLabel::H,
        },
        PortAssignment {
            detector: Detector::D2,
            photon: Photon::One,
            port: BasisLabel::V,
        },
        PortAssignment {
            detector: Detector::D3,
            photon: Photon::Two,
            port: BasisLabel::H,
        },
        PortAssignment {
            detector: Detector::D4,
            photon: Photon::Two,
            port: BasisLabel::V,
        },
    ]
}

/// Outcome probabilities of Bob's measurement in basis `z`.
pub fn dfs_outcome_probs(state: &TwoPhotonDensity, z: u8) -> [f64; 4] {
    let a = bob_analyzers(z);
    born_probs(state, &a.photon1, &a.photon2)
}

/// Keeps the coincidence slots in which Alice's and Bob's bases agree.
/// The three lists are aligned element by element: `alice_x[i]` and
/// `bob_z[i]` are the bases used in slot `coincidence_slots[i]`.
pub fn sift(
    alice_x: &[u8],
    bob_z: &[u8],
    coincidence_slots: &[u64],
) -> Result<Vec<u64>, ProtocolError> {
    if alice_x.len() != coincidence_slots.len() || bob_z.len() != coincidence_slots.len() {
        return Err(ProtocolError::Misaligned(format!(
            "{} slots, {} bases from Alice, {} from Bob",
            coincidence_slots.len(),
            alice_x.len(),
            bob_z.len()
        )));
    }
    Ok(coincidence_slots
        .iter()
        .zip(alice_x.iter().zip(bob_z))
        .filter(|(_, (x, z))| *x & 1 == *z & 1)
        .map(|(&slot, _)| slot)
        .collect())
}

/// Error-test statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberReport {
    pub n_compared: u64,
    pub n_errors: u64,
    pub qber: f64,
    pub stderr: f64,
}

impl QberReport {
    pub fn from_counts(n_compared: u64, n_errors: u64) -> Result<Self, ProtocolError> {
        if n_compared == 0 {
            return Err(ProtocolError::EmptyKey);
        }
        if n_errors > n_compared {
            return Err(ProtocolError::Misaligned(format!(
                "{n_errors} errors in {n_compared} compared bits"
            )));
        }
        let qber = n_errors as f64 / n_compared as f64;
        Ok(Self {
            n_compared,
            n_errors,
            qber,
            stderr: (qber * (1.0 - qber) / n_compared as f64).sqrt(),
        })
    }
}

/// Positions of the sifted key disclosed for the error test, ascending.
/// `round(n·fraction)` positions are drawn, at least one when `n > 0`.
pub fn choose_sample_positions<R: Rng + ?Sized>(
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>, ProtocolError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ProtocolError::InvalidFraction(fraction));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut positions = index::sample(rng, n, k).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

/// Compares the two keys at the given positions.
pub fn qber_on_positions(
    alice: &[u8],
    bob: &[u8],
    positions: &[usize],
) -> Result<QberReport, ProtocolError> {
    if alice.len() != bob.len() {
        return Err(ProtocolError::Misaligned(format!(
            "keys of length {} and {}",
            alice.len(),
            bob.len()
        )));
    }
    let mut errors = 0u64;
    for &p in positions {
        let (a, b) = match (alice.get(p), bob.get(p)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(ProtocolError::Misaligned(format!(
                    "position {p} beyond key length {}",
                    alice.len()
                )))
            }
        };
        errors += (a != b) as u64;
    }
    QberReport::from_counts(positions.len() as u64, errors)
}

/// Outcome of the error test: the report and the disclosed positions, which
/// must be dropped from the key.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTest {
    pub report: QberReport,
    pub disclosed: Vec<usize>,
}

pub fn estimate_qber<R: Rng + ?Sized>(
    alice_bits: &[u8],
    bob_bits: &[u8],
    sample_fraction: f64,
    rng: &mut R,
) -> Result<ErrorTest, ProtocolError> {
    if alice_bits.is_empty() || bob_bits.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }
    let disclosed = choose_sample_positions(alice_bits.len(), sample_fraction, rng)?;
    let report = qber_on_positions(alice_bits, bob_bits, &disclosed)?;
    Ok(ErrorTest { report, disclosed })
}

/// Drops the disclosed positions (ascending) from a key.
pub fn remove_disclosed(key: &[u8], disclosed: &[usize]) -> Vec<u8> {
    let mut skip = disclosed.iter().peekable();
    key.iter()
        .enumerate()
        .filter_map(|(i, &b)| {
            if skip.peek() == Some(&&i) {
                skip.next();
                None
            } else {
                Some(b)
            }
        })
        .collect()
}

/// Shannon entropy of a biased coin, in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Asymptotic one-way rate `1 − 2·H₂(e)` per sifted bit.
pub fn asymptotic_rate(qber: f64) -> f64 {
    1.0 - 2.0 * binary_entropy(qber)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub qber_in: f64,
    /// Secret bits per sifted bit.
    pub rate: f64,
    pub secure: bool,
}

impl KeyRateResult {
    /// No estimate available: nothing can be distilled.
    pub fn insecure(qber_in: f64) -> Self {
        Self {
            qber_in,
            rate: 0.0,
            secure: false,
        }
    }
}

/// Key rate under an arbitrary rate formula, gated by the threshold.
pub fn key_rate_with(
    qber: f64,
    formula: impl Fn(f64) -> f64,
) -> Result<KeyRateResult, ProtocolError> {
    if !(0.0..=1.0).contains(&qber) {
        return Err(ProtocolError::QberOutOfRange(qber));
    }
    let secure = qber < SECURITY_THRESHOLD;
    let rate = if secure { formula(qber).max(0.0) } else { 0.0 };
    Ok(KeyRateResult {
        qber_in: qber,
        rate,
        secure,
    })
}

pub fn key_rate(qber: f64) -> Result<KeyRateResult, ProtocolError> {
    key_rate_with(qber, asymptotic_rate)
}

fn check_visibility(v: f64) -> Result<(), ProtocolError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ProtocolError::VisibilityOutOfRange(v))
    }
}

/// Ideal single-photon BB84 state: `{H, V}` for `x = 0`, `{−, +}` for
/// `x = 1`, with `y = 0` picking the first. Bit 0 is always the state that
/// exits towards D1 in Bob's matching basis.
pub fn bb84_ideal(x: u8, y: u8) -> SinglePhotonKet {
    basis_ket(match (x & 1, y & 1) {
        (0, 0) => BasisLabel::H,
        (0, 1) => BasisLabel::V,
        (1, 0) => BasisLabel::Minus,
        _ => BasisLabel::Plus,
    })
}

/// Heralded single photon: `V·|s⟩⟨s| + (1 − V)·I/2`.
pub fn bb84_prepare(x: u8, y: u8, visibility: f64) -> Result<SinglePhotonDensity, ProtocolError> {
    check_visibility(visibility)?;
    Ok(bb84_ideal(x, y).projector().depolarize(visibility))
}

/// Polarization that reaches D1 when Bob measures photon 1 in basis `z`.
pub fn bb84_bit0_analyzer(z: u8) -> SinglePhotonKet {
    bob_analyzers(z).photon1
}

/// `[P(bit 0), P(bit 1)]` for a single photon measured in basis `z`.
pub fn bb84_bit_probs(state: &SinglePhotonDensity, z: u8) -> [f64; 2] {
    let p0 = state.expectation(&bb84_bit0_analyzer(z)).clamp(0.0, 1.0);
    [p0, 1.0 - p0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bb84Round {
    pub sift_ok: bool,
    pub bob_bit: u8,
}

/// One baseline round: prepare, rotate by the channel, measure in `z`.
pub fn bb84_round<R: Rng + ?Sized>(
    x: u8,
    y: u8,
    z: u8,
    theta: f64,
    visibility: f64,
    rng: &mut R,
) -> Result<Bb84Round, ProtocolError> {
    let arrived = bb84_prepare(x, y, visibility)?.evolve(&rotation_unitary(theta));
    let bob_bit = sample_outcome(&bb84_bit_probs(&arrived, z), rng)? as u8;
    Ok(Bb84Round {
        sift_ok: x & 1 == z & 1,
        bob_bit,
    })
}

/// Closed-form matched-basis error rate.
pub fn predicted_qber(protocol: Protocol, theta: f64, visibility: f64) -> f64 {
    let base = (1.0 - visibility) / 2.0;
    match protocol {
        Protocol::Dfs2 => base,
        Protocol::Bb84 => base + visibility * theta.sin().powi(2),
    }
}

/// Matched-basis bit distribution `[P(0), P(1)]` for one symbol, from the
/// full state evolution with ideal detectors.
pub fn symbol_bit_probs(
    protocol: Protocol,
    x: u8,
    y: u8,
    theta: f64,
    visibility: f64,
) -> Result<[f64; 2], ProtocolError> {
    check_visibility(visibility)?;
    match protocol {
        Protocol::Dfs2 => {
            let source = werner_mix(&psi_minus(), visibility)?;
            let arrived = apply_collective(&rotation_unitary(theta), &encode_state(x, y, &source));
            let probs = dfs_outcome_probs(&arrived, x);
            let mut bits = [0.0; 2];
            for (o, p) in probs.iter().enumerate() {
                bits[outcome_index_to_bit(o) as usize] += p;
            }
            Ok(bits)
        }
        Protocol::Bb84 => {
            let arrived = bb84_prepare(x, y, visibility)?.evolve(&rotation_unitary(theta));
            Ok(bb84_bit_probs(&arrived, x))
        }
    }
}

/// Matched-basis error probability of one symbol (one curve of the
/// per-state error plot).
pub fn symbol_error_probability(
    protocol: Protocol,
    x: u8,
    y: u8,
    theta: f64,
    visibility: f64,
) -> Result<f64, ProtocolError> {
    let bits = symbol_bit_probs(protocol, x, y, theta, visibility)?;
    Ok(bits[1 - (y & 1) as usize])
}

/// Pooled error rate over the four equiprobable symbols, from linear algebra.
pub fn exact_qber(protocol: Protocol, theta: f64, visibility: f64) -> Result<f64, ProtocolError> {
    let mut total = 0.0;
    for x in 0..2 {
        for y in 0..2 {
            total += symbol_error_probability(protocol, x, y, theta, visibility)?;
        }
    }
    Ok(total / 4.0)
}

/// Samples `shots` matched-basis rounds and returns the observed error rate.
///
/// Each round draws the symbol and one Born-rule outcome from `rng`.
pub fn monte_carlo_qber<R: Rng + ?Sized>(
    protocol: Protocol,
    theta: f64,
    visibility: f64,
    shots: u64,
    rng: &mut R,
) -> Result<QberReport, ProtocolError> {
    let mut error_probs = [[0.0; 2]; 4];
    for (sym, slot) in error_probs.iter_mut().enumerate() {
        let (x, y) = ((sym >> 1) as u8, (sym & 1) as u8);
        let p = symbol_error_probability(protocol, x, y, theta, visibility)?.clamp(0.0, 1.0);
        *slot = [1.0 - p, p];
    }
    let mut errors = 0u64;
    for _ in 0..shots {
        let sym = (rng.random::<u32>() & 3) as usize;
        errors += sample_outcome(&error_probs[sym], rng)? as u64;
    }
    QberReport::from_counts(shots, errors)
}

//! Wave plates, modulators, the rotating channel and the detector layer.
//!
//! Every angle in this module is the polarization-action parameter θ: a
//! half-wave plate described by `HwpParameter(θ)` physically sits at θ/2
//! to its optical axis. The physical plate angle never crosses an API.

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::PolarizationUnitary;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("random-walk channel queried at slot {requested} after slot {last}")]
    OutOfOrder { requested: u64, last: u64 },
    #[error("invalid channel model: {0}")]
    InvalidChannel(String),
    #[error("invalid detector parameters: {0}")]
    InvalidDetector(String),
}

/// Action parameter of a half-wave plate, canonicalized to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HwpParameter(f64);

impl HwpParameter {
    pub fn new(theta: f64) -> Self {
        let mut t = theta.rem_euclid(2.0 * PI);
        if t > PI {
            t -= 2.0 * PI;
        }
        Self(t)
    }

    pub fn theta(self) -> f64 {
        self.0
    }
}

/// Half-wave plate: `H → cosθ H − sinθ V`, `V → −(sinθ H + cosθ V)`.
pub fn hwp_unitary(p: HwpParameter) -> PolarizationUnitary {
    let (s, c) = p.theta().sin_cos();
    PolarizationUnitary::from_real([[c, -s], [-s, -c]])
}

/// Collective rotation: `H → cosθ H − sinθ V`, `V → sinθ H + cosθ V`.
pub fn rotation_unitary(theta: f64) -> PolarizationUnitary {
    let (s, c) = theta.sin_cos();
    PolarizationUnitary::from_real([[c, s], [-s, c]])
}

/// The plate pair used to realize the rotation in each arm: a compensating
/// plate at zero (traversed first) followed by the noise plate.
pub fn channel_unitary(theta: f64) -> PolarizationUnitary {
    let compensator = hwp_unitary(HwpParameter::new(0.0));
    let noise = hwp_unitary(HwpParameter::new(theta));
    noise.then_after(&compensator)
}

/// The four electro-optic modulators of the setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulator {
    M1,
    M2,
    M3,
    /// Bob's basis switch.
    M4,
}

impl Modulator {
    /// Axis angle of the device in radians.
    pub fn axis_angle(self) -> f64 {
        match self {
            Modulator::M1 => 0.0,
            Modulator::M2 => FRAC_PI_4,
            Modulator::M3 | Modulator::M4 => FRAC_PI_8,
        }
    }

    pub fn setting(self, on: bool) -> EomSetting {
        EomSetting {
            on,
            axis_angle: self.axis_angle(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EomSetting {
    pub on: bool,
    pub axis_angle: f64,
}

/// An energized modulator acts as a half-wave plate at its axis angle;
/// a dark one does nothing.
pub fn eom_unitary(e: EomSetting) -> PolarizationUnitary {
    if e.on {
        hwp_unitary(HwpParameter::new(2.0 * e.axis_angle))
    } else {
        PolarizationUnitary::identity()
    }
}

/// How the collective rotation angle evolves from slot to slot. Angles are
/// radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    Static { theta: f64 },
    PerSlotUniform { lo: f64, hi: f64 },
    RandomWalk { theta0: f64, step_sigma: f64 },
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel::Static { theta: 0.0 }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), OpticsError> {
        let ok = match *self {
            ChannelModel::Static { theta } => theta.is_finite(),
            ChannelModel::PerSlotUniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ChannelModel::RandomWalk { theta0, step_sigma } => {
                theta0.is_finite() && step_sigma.is_finite() && step_sigma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(OpticsError::InvalidChannel(format!("{self:?}")))
        }
    }
}

/// Stateful per-slot sampler of the channel angle.
///
/// The random-walk variant keeps the walk position, so slots must be queried
/// in non-decreasing order. Querying the same slot twice returns the same
/// angle.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    model: ChannelModel,
    rng: ChaCha8Rng,
    walk_slot: u64,
    walk_theta: f64,
}

impl ChannelSampler {
    pub fn new(model: ChannelModel, seed: u64) -> Result<Self, OpticsError> {
        model.validate()?;
        let walk_theta = match model {
            ChannelModel::RandomWalk { theta0, .. } => theta0,
            _ => 0.0,
        };
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            walk_slot: 0,
            walk_theta,
        })
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// Channel angle at `slot_index`.
    pub fn theta_at(&mut self, slot_index: u64) -> Result<f64, OpticsError> {
        match self.model {
            ChannelModel::Static { theta } => Ok(theta),
            ChannelModel::PerSlotUniform { lo, hi } => {
                if hi > lo {
                    Ok(self.rng.random_range(lo..=hi))
                } else {
                    Ok(lo)
                }
            }
            ChannelModel::RandomWalk { step_sigma, .. } => {
                if slot_index < self.walk_slot {
                    return Err(OpticsError::OutOfOrder {
                        requested: slot_index,
                        last: self.walk_slot,
                    });
                }
                let steps = slot_index - self.walk_slot;
                if steps > 0 && step_sigma > 0.0 {
                    // A sum of k iid N(0, σ²) steps is N(0, kσ²).
                    let spread = step_sigma * (steps as f64).sqrt();
                    let normal = Normal::new(0.0, spread)
                        .map_err(|e| OpticsError::InvalidChannel(e.to_string()))?;
                    self.walk_theta += normal.sample(&mut self.rng);
                }
                self.walk_slot = slot_index;
                Ok(self.walk_theta)
            }
        }
    }
}

/// Detectors behind the two polarizing beam splitters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    /// Photon 1, H port.
    D1,
    /// Photon 1, V port.
    D2,
    /// Photon 2, H port.
    D3,
    /// Photon 2, V port.
    D4,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::D1, Detector::D2, Detector::D3, Detector::D4];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Splits a two-photon outcome index `2·port1 + port2` into its detectors.
pub fn outcome_detectors(outcome: usize) -> (Detector, Detector) {
    let d1 = if outcome & 0b10 == 0 {
        Detector::D1
    } else {
        Detector::D2
    };
    let d2 = if outcome & 0b01 == 0 {
        Detector::D3
    } else {
        Detector::D4
    };
    (d1, d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Indexed D1..D4.
    pub efficiency: [f64; 4],
    /// Probability of a spurious click per detector per coincidence window.
    pub dark_count_prob: [f64; 4],
    pub coincidence_window_ns: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self::ideal()
    }
}

impl DetectorParams {
    pub fn ideal() -> Self {
        Self {
            efficiency: [1.0; 4],
            dark_count_prob: [0.0; 4],
            coincidence_window_ns: 5.0,
        }
    }

    pub fn uniform(efficiency: f64, dark_count_prob: f64) -> Self {
        Self {
            efficiency: [efficiency; 4],
            dark_count_prob: [dark_count_prob; 4],
            coincidence_window_ns: 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        for (i, &e) in self.efficiency.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(OpticsError::InvalidDetector(format!(
                    "efficiency[D{}] = {e}",
                    i + 1
                )));
            }
        }
        for (i, &d) in self.dark_count_prob.iter().enumerate() {
            if !(0.0..1.0).contains(&d) {
                return Err(OpticsError::InvalidDetector(format!(
                    "dark_count_prob[D{}] = {d}",
                    i + 1
                )));
            }
        }
        if !(self.coincidence_window_ns > 0.0 && self.coincidence_window_ns.is_finite()) {
            return Err(OpticsError::InvalidDetector(format!(
                "coincidence_window_ns = {}",
                self.coincidence_window_ns
            )));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.efficiency.iter().all(|&e| e == 1.0) && self.dark_count_prob.iter().all(|&d| d == 0.0)
    }

    fn click_probs(&self, true_outcome: Option<usize>) -> [f64; 4] {
        let mut p = self.dark_count_prob;
        if let Some(o) = true_outcome {
            let (a, b) = outcome_detectors(o);
            for d in [a, b] {
                let i = d.index();
                p[i] = 1.0 - (1.0 - self.efficiency[i]) * (1.0 - self.dark_count_prob[i]);
            }
        }
        p
    }
}

/// What the detectors registered in one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub slot_index: u64,
    pub detector_photon1: Option<Detector>,
    pub detector_photon2: Option<Detector>,
    pub is_coincidence: bool,
    pub multi_pair: bool,
}

impl DetectionEvent {
    /// Outcome index `2·port1 + port2` of a coincidence.
    pub fn outcome(&self) -> Option<usize> {
        match (self.detector_photon1, self.detector_photon2) {
            (Some(a), Some(b)) if self.is_coincidence => {
                Some(2 * (a == Detector::D2) as usize + (b == Detector::D4) as usize)
            }
            _ => None,
        }
    }
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random::<f64>() < p
    }
}

fn single_arm(a: bool, b: bool, da: Detector, db: Detector) -> Option<Detector> {
    match (a, b) {
        (true, false) => Some(da),
        (false, true) => Some(db),
        _ => None,
    }
}

/// Applies detector efficiency and dark counts to a true outcome.
///
/// A photon arriving at its port clicks with the port's efficiency; every
/// detector can additionally click with its dark-count probability. Both
/// detectors of one arm clicking is discarded, so a coincidence needs exactly
/// one click per arm. Certain events (probability 0 or 1) consume no draws.
pub fn detect<R: Rng + ?Sized>(
    slot_index: u64,
    true_outcome: Option<usize>,
    params: &DetectorParams,
    rng: &mut R,
) -> DetectionEvent {
    let probs = params.click_probs(true_outcome);
    let fired = probs.map(|p| bernoulli(p, rng));
    let detector_photon1 = single_arm(fired[0], fired[1], Detector::D1, Detector::D2);
    let detector_photon2 = single_arm(fired[2], fired[3], Detector::D3, Detector::D4);
    DetectionEvent {
        slot_index,
        detector_photon1,
        detector_photon2,
        is_coincidence: detector_photon1.is_some() && detector_photon2.is_some(),
        multi_pair: false,
    }
}

/// Exact probability of each registered coincidence `2·port1 + port2` given
/// the true outcome, by enumerating all 16 click patterns. The remainder
/// `1 - Σ` is the probability of no coincidence.
pub fn coincidence_distribution(true_outcome: Option<usize>, params: &DetectorParams) -> [f64; 4] {
    let probs = params.click_probs(true_outcome);
    let mut out = [0.0; 4];
    for pattern in 0u8..16 {
        let fired: [bool; 4] = std::array::from_fn(|i| pattern & (1 << i) != 0);
        let weight: f64 = (0..4)
            .map(|i| if fired[i] { probs[i] } else { 1.0 - probs[i] })
            .product();
        let a = single_arm(fired[0], fired[1], Detector::D1, Detector::D2);
        let b = single_arm(fired[2], fired[3], Detector::D3, Detector::D4);
        if let (Some(a), Some(b)) = (a, b) {
            out[2 * (a == Detector::D2) as usize + (b == Detector::D4) as usize] += weight;
        }
    }
    out
}

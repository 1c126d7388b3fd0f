//! Two-photon polarization correlation fringes of the source.
//!
//! Photon 1 passes a polarizer at θ₁, photon 2 a fixed polarizer at the
//! analyzer angle (curve 0) or at the analyzer angle plus 90° (curve 1).
//! The coincidence probability is a sinusoid in 2θ₁, fitted by least
//! squares to `A + B cos 2θ₁ + C sin 2θ₁`.

use std::io::Write;

use dfsqkd::qstate::{born_probs, psi_minus, werner_mix, SinglePhotonKet};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct FringeSpec {
    pub visibility: f64,
    pub analyzer2_deg: f64,
    pub theta1_deg: Vec<f64>,
    pub shots_per_point: u64,
    pub seed: u64,
    /// Fit the exact probabilities instead of the sampled counts.
    pub exact: bool,
}

impl FringeSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(CliError::Config(format!(
                "visibility {} outside [0, 1]",
                self.visibility
            )));
        }
        if self.shots_per_point == 0 {
            return Err(CliError::Config(
                "shots per point must be at least 1".into(),
            ));
        }
        if self.theta1_deg.len() < 3 {
            return Err(CliError::Config(
                "fringe scan needs at least three angles".into(),
            ));
        }
        if !self.analyzer2_deg.is_finite() || self.theta1_deg.iter().any(|t| !t.is_finite()) {
            return Err(CliError::Config("fringe angles must be finite".into()));
        }
        Ok(())
    }
}

/// `start, start + step, ...` up to and including `stop`.
pub fn angle_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, CliError> {
    let valid = step > 0.0 && stop >= start;
    if !valid {
        return Err(CliError::Config(format!(
            "bad angle grid {start}:{step}:{stop}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FringePoint {
    pub theta1_deg: f64,
    pub curve_id: u8,
    pub probability: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinusoidFit {
    pub offset: f64,
    pub amplitude: f64,
    /// θ₁ of the fitted maximum, in degrees within [0, 180).
    pub max_at_deg: f64,
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringeResult {
    #[serde(skip)]
    pub points: Vec<FringePoint>,
    pub curves: [SinusoidFit; 2],
    /// Shift between the two fitted maxima, folded into [0, 90].
    pub phase_shift_deg: f64,
    pub visibility: f64,
}

/// Least-squares fit of `A + B cos 2θ + C sin 2θ`.
pub fn fit_sinusoid(theta_deg: &[f64], y: &[f64]) -> Result<SinusoidFit, CliError> {
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for (&t, &v) in theta_deg.iter().zip(y) {
        let r = 2.0 * t.to_radians();
        let row = Vector3::new(1.0, r.cos(), r.sin());
        normal += row * row.transpose();
        rhs += row * v;
    }
    let coef = normal
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| CliError::Runtime("fringe fit is degenerate".into()))?;
    let (a, b, c) = (coef[0], coef[1], coef[2]);
    let amplitude = b.hypot(c);
    let max_at_deg = (0.5 * c.atan2(b).to_degrees()).rem_euclid(180.0);
    let visibility = if a > 0.0 { amplitude / a } else { 0.0 };
    Ok(SinusoidFit {
        offset: a,
        amplitude,
        max_at_deg,
        visibility,
    })
}

pub fn coincidence_probability(
    visibility: f64,
    theta1_deg: f64,
    theta2_deg: f64,
) -> Result<f64, CliError> {
    let rho = werner_mix(&psi_minus(), visibility).map_err(|e| CliError::Config(e.to_string()))?;
    let a1 = SinglePhotonKet::linear(theta1_deg.to_radians());
    let a2 = SinglePhotonKet::linear(theta2_deg.to_radians());
    Ok(born_probs(&rho, &a1, &a2)[0])
}

pub fn run_fringe(spec: &FringeSpec) -> Result<FringeResult, CliError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(2 * spec.theta1_deg.len());
    for curve_id in 0..2u8 {
        let theta2 = spec.analyzer2_deg + 90.0 * curve_id as f64;
        for &theta1 in &spec.theta1_deg {
            let probability =
                coincidence_probability(spec.visibility, theta1, theta2)?.clamp(0.0, 1.0);
            let count = Binomial::new(spec.shots_per_point, probability)
                .map_err(|e| CliError::Runtime(e.to_string()))?
                .sample(&mut rng);
            points.push(FringePoint {
                theta1_deg: theta1,
                curve_id,
                probability,
                count,
            });
        }
    }
    let fit_curve = |id: u8| {
        let (t, y): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.curve_id == id)
            .map(|p| {
                let y = if spec.exact {
                    p.probability
                } else {
                    p.count as f64 / spec.shots_per_point as f64
                };
                (p.theta1_deg, y)
            })
            .unzip();
        fit_sinusoid(&t, &y)
    };
    let curves = [fit_curve(0)?, fit_curve(1)?];
    let d = (curves[0].max_at_deg - curves[1].max_at_deg).rem_euclid(180.0);
    let phase_shift_deg = d.min(180.0 - d);
    let visibility = (curves[0].visibility + curves[1].visibility) / 2.0;
    Ok(FringeResult {
        points,
        curves,
        phase_shift_deg,
        visibility,
    })
}

pub fn write_fringe_csv<W: Write>(points: &[FringePoint], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)
            .map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))
}

//! One- and two-photon polarization states.
//!
//! Two-photon objects live in the product basis ordered `(HH, HV, VH, VV)`,
//! with photon 1 as the left tensor factor. Kets, density operators and
//! single-arm unitaries are thin wrappers around fixed-size `nalgebra`
//! matrices of `Complex64`.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

/// A probability amplitude.
pub type ComplexAmplitude = Complex64;

/// Tolerance for exact algebraic identities.
pub const ALGEBRA_TOL: f64 = 1e-12;
/// Tolerance for quantities accumulated through a pipeline of operations.
pub const PIPELINE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QstateError {
    #[error("photon index must be 1 or 2, got {0}")]
    InvalidPhoton(u8),
    #[error("visibility {0} outside [0, 1]")]
    VisibilityOutOfRange(f64),
    #[error("probability {0} is negative beyond tolerance")]
    NegativeProbability(f64),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("heralding probability {0} is too small to condition on")]
    HeraldImpossible(f64),
    #[error("state has zero norm")]
    ZeroNorm,
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Labels of the four single-photon BB84 polarizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisLabel {
    H,
    V,
    Plus,
    Minus,
}

/// Which arm of the photon pair an element acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Photon {
    One,
    Two,
}

impl TryFrom<u8> for Photon {
    type Error = QstateError;

    fn try_from(index: u8) -> Result<Self, Self::Error> {
        match index {
            1 => Ok(Photon::One),
            2 => Ok(Photon::Two),
            other => Err(QstateError::InvalidPhoton(other)),
        }
    }
}

/// Normalized single-photon Jones vector `h|H⟩ + v|V⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinglePhotonKet(Vector2<Complex64>);

impl SinglePhotonKet {
    /// Builds and normalizes a ket from its two amplitudes.
    pub fn new(h: Complex64, v: Complex64) -> Result<Self, QstateError> {
        let vec = Vector2::new(h, v);
        let norm = vec.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(QstateError::ZeroNorm);
        }
        Ok(Self(vec / c(norm)))
    }

    /// Linear polarization at `angle` radians from horizontal.
    pub fn linear(angle: f64) -> Self {
        Self(Vector2::new(c(angle.cos()), c(angle.sin())))
    }

    pub fn h(&self) -> Complex64 {
        self.0[0]
    }

    pub fn v(&self) -> Complex64 {
        self.0[1]
    }

    pub fn as_vector(&self) -> &Vector2<Complex64> {
        &self.0
    }

    /// The orthogonal partner `(-v*, h*)`, i.e. the other output port of a
    /// polarizer set to this ket.
    pub fn orthogonal(&self) -> Self {
        Self(Vector2::new(-self.0[1].conj(), self.0[0].conj()))
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap2(&self, other: &Self) -> f64 {
        self.0.dotc(&other.0).norm_sqr()
    }

    pub fn evolve(&self, u: &PolarizationUnitary) -> Self {
        Self(u.0 * self.0)
    }

    pub fn projector(&self) -> SinglePhotonDensity {
        SinglePhotonDensity(self.0 * self.0.adjoint())
    }
}

/// The unit ket for one of the four standard polarizations.
pub fn basis_ket(label: BasisLabel) -> SinglePhotonKet {
    let (h, v) = match label {
        BasisLabel::H => (1.0, 0.0),
        BasisLabel::V => (0.0, 1.0),
        BasisLabel::Plus => (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        BasisLabel::Minus => (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    };
    SinglePhotonKet(Vector2::new(c(h), c(v)))
}

/// Pure two-photon state over `(HH, HV, VH, VV)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhotonKet(Vector4<Complex64>);

impl TwoPhotonKet {
    pub fn new(amps: [Complex64; 4]) -> Result<Self, QstateError> {
        let vec = Vector4::from(amps);
        let norm = vec.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(QstateError::ZeroNorm);
        }
        Ok(Self(vec / c(norm)))
    }

    /// Real amplitudes, normalized.
    pub fn from_real(amps: [f64; 4]) -> Result<Self, QstateError> {
        Self::new(amps.map(c))
    }

    pub fn amps(&self) -> [Complex64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn as_vector(&self) -> &Vector4<Complex64> {
        &self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn projector(&self) -> TwoPhotonDensity {
        TwoPhotonDensity(self.0 * self.0.adjoint())
    }
}

/// `(HV - VH)/√2`, the singlet emitted by the source.
pub fn psi_minus() -> TwoPhotonKet {
    TwoPhotonKet(Vector4::new(
        c(0.0),
        c(FRAC_1_SQRT_2),
        c(-FRAC_1_SQRT_2),
        c(0.0),
    ))
}

/// `(HV + VH)/√2`.
pub fn psi_plus() -> TwoPhotonKet {
    TwoPhotonKet(Vector4::new(
        c(0.0),
        c(FRAC_1_SQRT_2),
        c(FRAC_1_SQRT_2),
        c(0.0),
    ))
}

/// `(HH + VV)/√2`.
pub fn phi_plus() -> TwoPhotonKet {
    TwoPhotonKet(Vector4::new(
        c(FRAC_1_SQRT_2),
        c(0.0),
        c(0.0),
        c(FRAC_1_SQRT_2),
    ))
}

/// `(HH - VV)/√2`.
pub fn phi_minus() -> TwoPhotonKet {
    TwoPhotonKet(Vector4::new(
        c(FRAC_1_SQRT_2),
        c(0.0),
        c(0.0),
        c(-FRAC_1_SQRT_2),
    ))
}

/// `a ⊗ b` with photon 1 on the left.
pub fn tensor(a: &SinglePhotonKet, b: &SinglePhotonKet) -> TwoPhotonKet {
    let (ah, av, bh, bv) = (a.h(), a.v(), b.h(), b.v());
    TwoPhotonKet(Vector4::new(ah * bh, ah * bv, av * bh, av * bv))
}

/// Phase-insensitive fidelity `|⟨a|b⟩|²` of two pure states.
pub fn overlap2(a: &TwoPhotonKet, b: &TwoPhotonKet) -> f64 {
    a.0.dotc(&b.0).norm_sqr()
}

/// Two-photon density operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhotonDensity(Matrix4<Complex64>);

impl TwoPhotonDensity {
    pub fn maximally_mixed() -> Self {
        Self(Matrix4::identity() * c(0.25))
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// `max |ρ - ρ†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        (self.0 - self.0.adjoint()).camax()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let ev = self.0.symmetric_eigenvalues();
        let mut out = [ev[0], ev[1], ev[2], ev[3]];
        out.sort_by(f64::total_cmp);
        out
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn expectation(&self, ket: &TwoPhotonKet) -> f64 {
        ket.0.dotc(&(self.0 * ket.0)).re
    }

    /// Fidelity against a pure reference state.
    pub fn fidelity(&self, ket: &TwoPhotonKet) -> f64 {
        self.expectation(ket)
    }
}

/// Single-photon density operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinglePhotonDensity(Matrix2<Complex64>);

impl SinglePhotonDensity {
    pub fn maximally_mixed() -> Self {
        Self(Matrix2::identity() * c(0.5))
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (self.0 - self.0.adjoint()).camax()
    }

    pub fn eigenvalues(&self) -> [f64; 2] {
        let ev = self.0.symmetric_eigenvalues();
        let mut out = [ev[0], ev[1]];
        out.sort_by(f64::total_cmp);
        out
    }

    /// Probability of passing a polarizer set to `ket`.
    pub fn expectation(&self, ket: &SinglePhotonKet) -> f64 {
        ket.0.dotc(&(self.0 * ket.0)).re
    }

    pub fn evolve(&self, u: &PolarizationUnitary) -> Self {
        Self(u.0 * self.0 * u.0.adjoint())
    }

    /// `w·ρ + (1 - w)·I/2`.
    pub fn depolarize(&self, weight: f64) -> Self {
        Self(self.0 * c(weight) + Matrix2::identity() * c((1.0 - weight) / 2.0))
    }

    /// Largest entrywise distance to another density.
    pub fn distance(&self, other: &Self) -> f64 {
        (self.0 - other.0).camax()
    }
}

/// A 2×2 unitary acting on one photon's polarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationUnitary(Matrix2<Complex64>);

impl PolarizationUnitary {
    pub fn identity() -> Self {
        Self(Matrix2::identity())
    }

    /// Builds a unitary from a real matrix given row by row.
    pub fn from_real(rows: [[f64; 2]; 2]) -> Self {
        Self(Matrix2::new(
            c(rows[0][0]),
            c(rows[0][1]),
            c(rows[1][0]),
            c(rows[1][1]),
        ))
    }

    /// Wraps an arbitrary complex matrix. The caller is responsible for
    /// unitarity; see [`PolarizationUnitary::unitarity_defect`].
    pub fn from_matrix(m: Matrix2<Complex64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// `self · other`: `other` acts on the light first.
    pub fn then_after(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    /// `‖U U† - I‖∞` (largest entry).
    pub fn unitarity_defect(&self) -> f64 {
        (self.0 * self.0.adjoint() - Matrix2::identity()).camax()
    }

    pub fn determinant(&self) -> Complex64 {
        self.0.determinant()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.0 - other.0).camax()
    }

    fn on_photon(&self, which: Photon) -> Matrix4<Complex64> {
        match which {
            Photon::One => self.0.kronecker(&Matrix2::identity()),
            Photon::Two => Matrix2::identity().kronecker(&self.0),
        }
    }
}

/// Anything a two-photon operator can be applied to.
pub trait TwoPhotonState: Sized {
    fn transform(&self, op: &Matrix4<Complex64>) -> Self;
}

impl TwoPhotonState for TwoPhotonKet {
    fn transform(&self, op: &Matrix4<Complex64>) -> Self {
        Self(op * self.0)
    }
}

impl TwoPhotonState for TwoPhotonDensity {
    fn transform(&self, op: &Matrix4<Complex64>) -> Self {
        Self(op * self.0 * op.adjoint())
    }
}

/// Applies `U ⊗ I` (photon 1) or `I ⊗ U` (photon 2).
pub fn apply_photon<S: TwoPhotonState>(u: &PolarizationUnitary, which: Photon, state: &S) -> S {
    state.transform(&u.on_photon(which))
}

/// Applies `U ⊗ U`, the same element on both arms.
pub fn apply_collective<S: TwoPhotonState>(u: &PolarizationUnitary, state: &S) -> S {
    state.transform(&u.0.kronecker(&u.0))
}

/// Isotropic mixture `V·|ψ⟩⟨ψ| + (1 - V)·I/4`.
pub fn werner_mix(pure: &TwoPhotonKet, visibility: f64) -> Result<TwoPhotonDensity, QstateError> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(QstateError::VisibilityOutOfRange(visibility));
    }
    let proj = pure.projector().0;
    Ok(TwoPhotonDensity(
        proj * c(visibility) + Matrix4::identity() * c((1.0 - visibility) / 4.0),
    ))
}

/// Outcome probabilities for one polarizer per photon, ordered
/// `(a1, a2), (a1, a2⊥), (a1⊥, a2), (a1⊥, a2⊥)`.
pub fn born_probs(
    state: &TwoPhotonDensity,
    analyzer1: &SinglePhotonKet,
    analyzer2: &SinglePhotonKet,
) -> [f64; 4] {
    let ports1 = [*analyzer1, analyzer1.orthogonal()];
    let ports2 = [*analyzer2, analyzer2.orthogonal()];
    let mut out = [0.0; 4];
    for (i, p1) in ports1.iter().enumerate() {
        for (j, p2) in ports2.iter().enumerate() {
            out[2 * i + j] = state.expectation(&tensor(p1, p2));
        }
    }
    out
}

/// Draws an outcome index from a discrete distribution.
///
/// Consumes exactly one uniform draw. Zero-probability outcomes are never
/// returned.
pub fn sample_outcome<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize, QstateError> {
    let mut total = 0.0;
    for &p in probs {
        if p < -ALGEBRA_TOL || !p.is_finite() {
            return Err(QstateError::NegativeProbability(p));
        }
        total += p.max(0.0);
    }
    if (total - 1.0).abs() > PIPELINE_TOL {
        return Err(QstateError::NotNormalized(total));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_nonzero = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last_nonzero)
}

/// Projects photon 2 onto `analyzer2` and returns the success probability
/// together with the normalized conditional state of photon 1.
pub fn herald_photon1(
    state: &TwoPhotonDensity,
    analyzer2: &SinglePhotonKet,
) -> Result<(f64, SinglePhotonDensity), QstateError> {
    let a = analyzer2.as_vector();
    let rho = state.matrix();
    let mut cond = Matrix2::<Complex64>::zeros();
    for i in 0..2 {
        for k in 0..2 {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..2 {
                for l in 0..2 {
                    acc += a[j].conj() * rho[(2 * i + j, 2 * k + l)] * a[l];
                }
            }
            cond[(i, k)] = acc;
        }
    }
    let prob = cond.trace().re;
    if prob < ALGEBRA_TOL {
        return Err(QstateError::HeraldImpossible(prob));
    }
    Ok((prob, SinglePhotonDensity(cond / c(prob))))
}

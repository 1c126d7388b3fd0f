//! Simulation of two-photon, decoherence-free quantum key distribution
//! over a channel that rotates polarization, with a one-photon BB84
//! baseline for comparison.
//!
//! The layers build on each other: [`qstate`] holds the polarization
//! algebra, [`optics`] the wave plates, modulators, channel and detectors,
//! [`protocol`] the encoding, decoding, sifting and error estimation,
//! [`transport`] the framed classical channel and [`session`] the full
//! time-slotted run of both parties.

pub mod optics;
pub mod protocol;
pub mod qstate;
pub mod session;
pub mod transport;

//! Waveform design toolkit for OTFS dual-functional radar-communication.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] builds the deterministic OTFS operators (DFT factor, shift
//!   operators, reduced-CP arrangement, ambiguity-function kernels) and
//!   validates symbol placements.
//! * [`channel`] samples Bernoulli-Gaussian delay-Doppler channels, builds the
//!   pilot dictionary and performs LMMSE channel estimation.
//! * [`metrics`] evaluates the communication metric (SINR and the capacity
//!   lower bound) and the sensing metric (expected ISL, mainlobe, power).
//! * [`optimizer`] solves the weighted design problem by alternating
//!   optimization with an ADMM/SCA pilot sub-solver.
//! * [`montecarlo`] holds brute-force oracles and the BER link simulation.
//! * [`patterns`] and [`experiment`] provide the named pilot archetypes and
//!   the experiment runners behind the command line front-end.

pub mod channel;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod linalg;
pub mod metrics;
pub mod montecarlo;
pub mod optimizer;
pub mod patterns;
pub mod registry;

pub use error::{DfrcError, Result};
pub use linalg::{CMat, CVec, C64};

//! Quantum error mitigation on a density-matrix simulator.
//!
//! The crate is organized around a small gate-level circuit IR and a noisy
//! density-matrix backend, with three mitigation layers on top:
//!
//! * [`zne`] -- zero-noise extrapolation via unitary folding,
//! * [`pec`] -- probabilistic error cancellation via quasi-probability
//!   sampling of the CX gate under a depolarizing noise model,
//! * [`readout`] -- measurement-error mitigation through calibration
//!   matrices,
//!
//! plus [`tomography`] for state reconstruction and entanglement fidelity,
//! and [`experiment`] drivers for the quantum-routing and bucket-brigade
//! QRAM benchmarks.

pub mod circuit;
pub mod executor;
pub mod experiment;
pub mod linalg;
pub mod pec;
pub mod readout;
pub mod rng;
pub mod sim;
pub mod tomography;
pub mod zne;

pub use circuit::{BasisSet, Circuit, GateKind, GateOp};
pub use executor::{Executor, SimulatorExecutor};
pub use experiment::{ExperimentConfig, MitigationResult};pub use sim::{CountsDistribution, DensityMatrix, NoiseModel, Observable};

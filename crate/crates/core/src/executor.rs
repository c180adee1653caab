//! Pluggable backend boundary between the mitigation layers and whatever
//! runs the circuits.
//!
//! The mitigation code only needs measured counts (shots mode) or exact
//! values (simulator-backed fast path); a hardware client could implement
//! [`Executor`] without touching ZNE, PEC, or tomography.

use thiserror::Error;

use crate::circuit::Circuit;
use crate::pec::{pec_exact_density, PecError};
use crate::sim::{
    apply_confusion, expectation, sample_counts, simulate, CountsDistribution, DensityMatrix,
    NoiseModel, Observable, SimError,
};

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pec(#[from] PecError),
    #[error("measured qubit {0} outside circuit width {1}")]
    BadMeasuredQubit(usize, usize),
}

/// Circuit-running capability: seeded counts plus exact fast paths backed
/// by the simulator. Stateless between calls; deterministic given
/// (circuit, seed).
pub trait Executor: Sync {
    /// Z-basis counts over the measured qubits after the readout model.
    fn counts(&self, c: &Circuit, shots: u64, seed: u64)
        -> Result<CountsDistribution, ExecutorError>;

    /// Exact measured-outcome probabilities (through the readout map,
    /// without shot noise).
    fn exact_probabilities(&self, c: &Circuit) -> Result<Vec<f64>, ExecutorError>;

    /// Exact pre-measurement expectation over the measured qubits.
    fn exact_expectation(&self, c: &Circuit, o: &Observable)
        -> Result<f64, ExecutorError>;
}

/// Density-matrix-simulator backend. Measures either the full register or a
/// fixed qubit subset (traced out, in the listed order).
#[derive(Debug, Clone)]
pub struct SimulatorExecutor {
    noise: NoiseModel,
    measured: Option<Vec<usize>>,
}

impl SimulatorExecutor {
    pub fn new(noise: NoiseModel) -> Self {
        SimulatorExecutor {
            noise,
            measured: None,
        }
    }

    pub fn with_measured_qubits(noise: NoiseModel, measured: Vec<usize>) -> Self {
        SimulatorExecutor {
            noise,
            measured: Some(measured),
        }
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn measured_qubits(&self, width: usize) -> Vec<usize> {
        self.measured
            .clone()
            .unwrap_or_else(|| (0..width).collect())
    }

    fn reduced_state(&self, c: &Circuit) -> Result<(DensityMatrix, Vec<usize>), ExecutorError> {
        let rho = simulate(c, &self.noise)?;
        let measured = self.measured_qubits(c.width());
        for &q in &measured {
            if q >= c.width() {
                return Err(ExecutorError::BadMeasuredQubit(q, c.width()));
            }
        }
        if measured.len() == c.width() && measured.iter().enumerate().all(|(i, &q)| i == q) {
            Ok((rho, measured))
        } else {
            let reduced = rho.reduce_to(&measured)?;
            Ok((reduced, measured))
        }
    }

    /// Exact measured probabilities with the inverse-channel superoperator
    /// applied at every CX site: the deterministic full-expansion PEC path.
    pub fn exact_pec_probabilities(&self, c: &Circuit) -> Result<Vec<f64>, ExecutorError> {
        let rho = pec_exact_density(c, &self.noise)?;
        let measured = self.measured_qubits(c.width());
        let reduced = if measured.len() == c.width() {
            rho
        } else {
            rho.reduce_to(&measured)?
        };
        let probs = reduced.diagonal_probabilities()?;
        Ok(apply_confusion(
            &probs,
            &self.noise.readout_for(&measured),
            measured.len(),
        ))
    }
}

impl Executor for SimulatorExecutor {
    fn counts(
        &self,
        c: &Circuit,
        shots: u64,
        seed: u64,
    ) -> Result<CountsDistribution, ExecutorError> {
        let (rho, measured) = self.reduced_state(c)?;
        Ok(sample_counts(
            &rho,
            shots,
            &self.noise.readout_for(&measured),
            seed,
        )?)
    }

    fn exact_probabilities(&self, c: &Circuit) -> Result<Vec<f64>, ExecutorError> {
        let (rho, measured) = self.reduced_state(c)?;
        let probs = rho.diagonal_probabilities()?;
        Ok(apply_confusion(
            &probs,
            &self.noise.readout_for(&measured),
            measured.len(),
        ))
    }

    fn exact_expectation(&self, c: &Circuit, o: &Observable) -> Result<f64, ExecutorError> {
        let (rho, _) = self.reduced_state(c)?;
        Ok(expectation(&rho, o)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_qram_circuit, build_routing_circuit, transpile, BasisSet};
    use crate::sim::Confusion;

    fn device(c: &Circuit) -> Circuit {
        transpile(c, &BasisSet::device_default()).unwrap()
    }

    #[test]
    fn counts_are_deterministic_per_seed() {
        let c = device(&build_routing_circuit());
        let exec = SimulatorExecutor::new(NoiseModel::with_cx_depolarizing(3, 0.02));
        let a = exec.counts(&c, 5000, 9).unwrap();
        let b = exec.counts(&c, 5000, 9).unwrap();
        assert_eq!(a, b);
        let c2 = exec.counts(&c, 5000, 10).unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn measured_subset_reduces_to_pair() {
        let c = device(&build_qram_circuit(&[]).unwrap());
        let exec = SimulatorExecutor::with_measured_qubits(NoiseModel::ideal(6), vec![0, 5]);
        let probs = exec.exact_probabilities(&c).unwrap();
        assert_eq!(probs.len(), 4);
        // Bell pair between address and output: only |00> and |11|.
        assert!((probs[0] - 0.5).abs() < 1e-10);
        assert!((probs[3] - 0.5).abs() < 1e-10);
        assert!(probs[1].abs() < 1e-10 && probs[2].abs() < 1e-10);
    }

    #[test]
    fn exact_probabilities_include_readout_map() {
        let c = Circuit::new(1, "idle");
        let mut noise = NoiseModel::ideal(1);
        noise.readout = vec![Confusion::asymmetric(0.1, 0.0)];
        let exec = SimulatorExecutor::new(noise);
        let probs = exec.exact_probabilities(&c).unwrap();
        assert!((probs[0] - 0.9).abs() < 1e-12);
        assert!((probs[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_pec_path_removes_gate_noise() {
        let c = device(&build_routing_circuit());
        let exec = SimulatorExecutor::new(NoiseModel::with_cx_depolarizing(3, 0.05));
        let probs = exec.exact_pec_probabilities(&c).unwrap();
        for (i, &p) in probs.iter().enumerate() {
            let ideal = if [0, 1, 3, 4].contains(&i) { 0.25 } else { 0.0 };
            assert!((p - ideal).abs() < 1e-9, "outcome {i}: {p}");
        }
    }

    #[test]
    fn bad_measured_qubit_errors() {
        let c = device(&build_routing_circuit());
        let exec = SimulatorExecutor::with_measured_qubits(NoiseModel::ideal(3), vec![0, 7]);
        assert!(matches!(
            exec.exact_probabilities(&c),
            Err(ExecutorError::BadMeasuredQubit(7, 3))
        ));
    }
}

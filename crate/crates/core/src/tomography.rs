//! State tomography from Pauli-basis measurement data, PSD projection, and
//! entanglement fidelity.
//!
//! The 3^m measurement settings are the tensor products of X, Y, Z. Every
//! Pauli-string expectation (strings containing I come from marginalizing
//! any compatible setting, duplicates averaged) feeds the linear-inversion
//! estimate rho' = 2^-m sum <sigma> sigma, which is then projected to the
//! nearest PSD trace-1 matrix by zeroing negative eigenvalues and rescaling.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{qubit_bit, GateOp};
use crate::linalg::{hermitian_eigen, kron, psd_sqrt, CMat, CVec};
use crate::sim::{DensityMatrix, Pauli, SimError};

#[derive(Debug, Error, PartialEq)]
pub enum TomographyError {
    #[error("missing measurement setting {0}")]
    MissingSetting(String),
    #[error("unknown or duplicate setting {0}")]
    BadSetting(String),
    #[error("expectation of {word} is {value}, outside [-1.05, 1.05]; upstream mitigation is broken")]
    ExpectationOutOfRange { word: String, value: f64 },
    #[error("probability vector for {0} has wrong length")]
    BadProbabilityVector(String),
    #[error("fidelity {0} outside [0, 1]")]
    NonPhysicalFidelity(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One tomography basis: a word over {X, Y, Z} plus the single-qubit
/// rotations (in the device basis) that map it onto Z measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSetting {
    basis: Vec<Pauli>,
}

impl MeasurementSetting {
    pub fn new(basis: Vec<Pauli>) -> Option<Self> {
        if basis.iter().any(|p| *p == Pauli::I) || basis.is_empty() {
            return None;
        }
        Some(MeasurementSetting { basis })
    }

    pub fn basis(&self) -> &[Pauli] {
        &self.basis
    }

    pub fn word(&self) -> String {
        self.basis.iter().map(|p| p.to_char()).collect()
    }

    /// Basis-change gates appended before Z measurement: X needs H, Y needs
    /// S-dagger then H, Z nothing; H is lowered to Rz(pi/2) sqrt-X Rz(pi/2)
    /// and S-dagger to Rz(-pi/2).
    pub fn basis_change_ops(&self) -> Vec<GateOp> {
        let mut ops = Vec::new();
        for (q, p) in self.basis.iter().enumerate() {
            match p {
                Pauli::Z | Pauli::I => {}
                Pauli::X => ops.extend(lowered_h(q)),
                Pauli::Y => {
                    ops.push(GateOp::rz(q, -FRAC_PI_2));
                    ops.extend(lowered_h(q));
                }
            }
        }
        ops
    }
}

fn lowered_h(q: usize) -> [GateOp; 3] {
    [
        GateOp::rz(q, FRAC_PI_2),
        GateOp::sqrt_x(q),
        GateOp::rz(q, FRAC_PI_2),
    ]
}

/// Lexicographic enumeration of the 3^m settings {X, Y, Z}^m.
pub fn generate_settings(width: usize) -> Vec<MeasurementSetting> {
    assert!(width >= 1);
    let axes = [Pauli::X, Pauli::Y, Pauli::Z];
    let mut out = Vec::with_capacity(3usize.pow(width as u32));
    let mut stack = vec![Vec::with_capacity(width)];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == width {
            out.push(MeasurementSetting { basis: prefix });
            continue;
        }
        for a in axes.iter().rev() {
            let mut next = prefix.clone();
            next.push(*a);
            stack.push(next);
        }
    }
    out
}

/// Where a dataset came from, recorded alongside the probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataProvenance {
    Raw,
    ReadoutMitigated,
    Zne,
    Pec,
    ZnePec,
}

/// A clipped-out-of-range entry: mitigated data may leave [0, 1] through
/// over-correction; clipping happens at tomography entry and is logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEvent {
    pub setting: String,
    pub outcome: usize,
    pub raw_value: f64,
}

/// Per-setting outcome distributions ready for reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyData {
    width: usize,
    provenance: DataProvenance,
    /// Per setting word: clipped, renormalized probabilities.
    probabilities: BTreeMap<String, Vec<f64>>,
    /// Pre-clip inputs, kept verbatim.
    raw_inputs: BTreeMap<String, Vec<f64>>,
    clip_events: Vec<ClipEvent>,
}

impl TomographyData {
    /// Ingest per-setting probability vectors, clipping each entry to
    /// [0, 1] and renormalizing the vector; out-of-range entries are logged.
    pub fn new(
        width: usize,
        provenance: DataProvenance,
        per_setting: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, TomographyError> {
        let dim = 1usize << width;
        let mut probabilities = BTreeMap::new();
        let mut raw_inputs = BTreeMap::new();
        let mut clip_events = Vec::new();
        for (word, probs) in per_setting {
            if probs.len() != dim {
                return Err(TomographyError::BadProbabilityVector(word));
            }
            if word.len() != width
                || word
                    .chars()
                    .any(|ch| !matches!(ch, 'X' | 'Y' | 'Z'))
                || probabilities.contains_key(&word)
            {
                return Err(TomographyError::BadSetting(word));
            }
            let mut clipped = Vec::with_capacity(dim);
            for (o, &p) in probs.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    clip_events.push(ClipEvent {
                        setting: word.clone(),
                        outcome: o,
                        raw_value: p,
                    });
                }
                clipped.push(p.clamp(0.0, 1.0));
            }
            let total: f64 = clipped.iter().sum();
            if total > 0.0 {
                for c in clipped.iter_mut() {
                    *c /= total;
                }
            }
            raw_inputs.insert(word.clone(), probs);
            probabilities.insert(word, clipped);
        }
        Ok(TomographyData {
            width,
            provenance,
            probabilities,
            raw_inputs,
            clip_events,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn provenance(&self) -> DataProvenance {
        self.provenance
    }

    pub fn clip_events(&self) -> &[ClipEvent] {
        &self.clip_events
    }

    pub fn probabilities(&self, word: &str) -> Option<&Vec<f64>> {
        self.probabilities.get(word)
    }
}

/// Reconstruction byproducts: how much negative-eigenvalue mass the PSD
/// projection removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDiagnostics {
    pub negative_mass_removed: f64,
    pub min_eigenvalue_before: f64,
}

/// All 4^m Pauli words over {I, X, Y, Z}, in lexicographic order.
fn pauli_words(width: usize) -> Vec<Vec<Pauli>> {
    let axes = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
    let mut words: Vec<Vec<Pauli>> = vec![vec![]];
    for _ in 0..width {
        let mut next = Vec::with_capacity(words.len() * 4);
        for w in &words {
            for a in axes {
                let mut v = w.clone();
                v.push(a);
                next.push(v);
            }
        }
        words = next;
    }
    words
}

/// Linear inversion from all 3^m setting distributions, followed by PSD
/// projection.
pub fn reconstruct(
    data: &TomographyData,
) -> Result<(DensityMatrix, ReconstructionDiagnostics), TomographyError> {
    let width = data.width;
    for setting in generate_settings(width) {
        if !data.probabilities.contains_key(&setting.word()) {
            return Err(TomographyError::MissingSetting(setting.word()));
        }
    }
    let mut expectations = Vec::with_capacity(4usize.pow(width as u32));
    for word in pauli_words(width) {
        if word.iter().all(|p| *p == Pauli::I) {
            expectations.push(1.0);
            continue;
        }
        // Average the marginalized estimate over every compatible setting
        // (3^(#I) of them).
        let mut compatible = Vec::new();
        for (setting, probs) in &data.probabilities {
            let chars: Vec<Pauli> = setting.chars().map(|c| Pauli::from_char(c).unwrap()).collect();
            let ok = word
                .iter()
                .zip(&chars)
                .all(|(w, s)| *w == Pauli::I || w == s);
            if ok {
                compatible.push(probs);
            }
        }
        let mask: usize = word
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != Pauli::I)
            .map(|(q, _)| 1usize << (width - 1 - q))
            .sum();
        let mut acc = 0.0;
        for probs in &compatible {
            let mut e = 0.0;
            for (o, &p) in probs.iter().enumerate() {
                let parity = (o & mask).count_ones() % 2;
                e += if parity == 0 { p } else { -p };
            }
            acc += e;
        }
        expectations.push(acc / compatible.len() as f64);
    }
    reconstruct_from_expectations(width, &expectations)
}

/// Linear-inversion core: assemble rho' = 2^-m sum <sigma> sigma from the
/// 4^m Pauli expectations (lexicographic order, identity first) and project
/// to the nearest PSD trace-1 matrix.
pub fn reconstruct_from_expectations(
    width: usize,
    expectations: &[f64],
) -> Result<(DensityMatrix, ReconstructionDiagnostics), TomographyError> {
    let words = pauli_words(width);
    assert_eq!(expectations.len(), words.len());
    let dim = 1usize << width;
    let mut rho = CMat::zeros(dim, dim);
    for (word, &e) in words.iter().zip(expectations) {
        if e.abs() > 1.05 {
            return Err(TomographyError::ExpectationOutOfRange {
                word: word.iter().map(|p| p.to_char()).collect(),
                value: e,
            });
        }
        let mut sigma = CMat::identity(1, 1);
        for p in word {
            sigma = kron(&sigma, &p.matrix());
        }
        rho += sigma.map(|x| x * (e / dim as f64));
    }
    let (vals, vecs) = hermitian_eigen(&rho);
    let min_eig = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let negative_mass: f64 = vals.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let kept: f64 = vals.iter().filter(|v| **v > 0.0).map(|v| *v).sum();
    let diag = CMat::from_diagonal(&CVec::from_iterator(
        vals.len(),
        vals.iter()
            .map(|&v| num_complex::Complex64::new(v.max(0.0) / kept, 0.0)),
    ));
    let projected = &vecs * diag * vecs.adjoint();
    Ok((
        DensityMatrix::from_matrix_unchecked(width, projected),
        ReconstructionDiagnostics {
            negative_mass_removed: negative_mass,
            min_eigenvalue_before: min_eig,
        },
    ))
}

/// Uhlmann fidelity F = (Tr sqrt(sqrt(rho) rho' sqrt(rho)))^2.
pub fn fidelity(rho: &DensityMatrix, rho_prime: &DensityMatrix) -> Result<f64, TomographyError> {
    if rho.dim() != rho_prime.dim() {
        return Err(TomographyError::Sim(SimError::DimMismatch(
            rho.dim(),
            rho_prime.dim(),
        )));
    }
    let s = psd_sqrt(rho.matrix());
    let inner = &s * rho_prime.matrix() * &s;
    let (vals, _) = hermitian_eigen(&inner);
    // Eigenvalues at the numerical-noise floor would blow up under the
    // square root (sqrt(1e-16) = 1e-8 per eigenvalue); drop them.
    let vmax = vals.iter().copied().fold(0.0, f64::max);
    let cutoff = vmax * 1e-12;
    let tr: f64 = vals
        .iter()
        .map(|&v| if v > cutoff { v.sqrt() } else { 0.0 })
        .sum();
    let f = tr * tr;
    if !(-1e-9..=1.0 + 1e-9).contains(&f) {
        return Err(TomographyError::NonPhysicalFidelity(f));
    }
    Ok(f)
}

/// Fidelity against a reference state, with the rank-1 shortcut
/// <psi|rho'|psi> = Tr[rho rho'] recorded as a cross-check whenever the
/// reference is pure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub reference: String,
    /// Tr[rho rho'] when the reference is rank-1; must agree with the
    /// Uhlmann value.
    pub pure_state_shortcut: Option<f64>,
    pub negative_mass_removed: f64,
}

pub fn fidelity_report(
    reference_label: impl Into<String>,
    rho: &DensityMatrix,
    rho_prime: &DensityMatrix,
    diagnostics: Option<ReconstructionDiagnostics>,
) -> Result<FidelityReport, TomographyError> {
    let f = fidelity(rho, rho_prime)?;
    let shortcut = if rho.purity() > 1.0 - 1e-9 {
        let tr = (rho.matrix() * rho_prime.matrix())
            .diagonal()
            .iter()
            .sum::<num_complex::Complex64>();
        Some(tr.re)
    } else {
        None
    };
    Ok(FidelityReport {
        fidelity: f,
        reference: reference_label.into(),
        pure_state_shortcut: shortcut,
        negative_mass_removed: diagnostics.map_or(0.0, |d| d.negative_mass_removed),
    })
}

/// Convenience: exact per-setting probabilities of a state, as produced by
/// appending the setting's basis change and reading the diagonal.
pub fn exact_setting_probabilities(
    rho: &DensityMatrix,
    setting: &MeasurementSetting,
) -> Vec<f64> {
    let mut rotated = rho.clone();
    for op in setting.basis_change_ops() {
        rotated.apply_op(&op);
    }
    (0..rotated.dim())
        .map(|i| rotated.matrix()[(i, i)].re)
        .collect()
}

/// Helper shared by tests and drivers: parity of outcome `o` on all
/// measured qubits (full-weight Pauli expectation of the setting).
pub fn full_weight_expectation(probs: &[f64], width: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(o, &p)| {
            let ones: u32 = (0..width).map(|q| qubit_bit(o, q, width) as u32).sum();
            if ones % 2 == 0 {
                p
            } else {
                -p
            }
        })
        .sum()
}

//! Probabilistic error cancellation for the depolarizing CX model.
//!
//! The ideal CX is written as a signed combination of implementable noisy
//! operations: the noisy CX followed by one of the 16 two-qubit Paulis.
//! Inverting the two-qubit depolarizing channel in the Pauli-conjugation
//! basis gives the closed-form coefficients
//!
//!   eta_I = (16 - eps) / (16 (1 - eps)),
//!   eta_P = -eps / (16 (1 - eps))        for the 15 non-identity Paulis,
//!   gamma = (16 + 14 eps) / (16 (1 - eps)).
//!
//! Monte Carlo sampling draws a term per CX site with probability
//! |eta| / gamma, executes the fragment-substituted circuits, and combines
//! them with the signed importance-sampling estimator
//! (gamma_total / s) sum_i sigma_i <E>_i. A deterministic inverse-channel
//! path (exact superoperator application at every CX site) serves as the
//! full-expansion reference.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitError, GateOp};
use crate::rng;
use crate::sim::{evolve_with, DensityMatrix, NoiseModel, Observable, Pauli, SimError};
use crate::zne::{extrapolate, fold_circuit, Extrapolation, Extrapolator, FoldingStrategy, ScaleSchedule, ZneError};

#[derive(Debug, Error)]
pub enum PecError {
    #[error("depolarizing level {0} outside [0, 1)")]
    EpsilonOutOfRange(f64),
    #[error("circuit contains a CSWAP; transpile to the device basis first")]
    UntranspiledCircuit,
    #[error("need one representation per CX site: {got} reps for {sites} sites")]
    RepCountMismatch { got: usize, sites: usize },
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("only {ok} of {total} samples succeeded; at least half are required")]
    TooManyFailures { ok: usize, total: usize },
    #[error("no results to combine")]
    EmptyResults,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Zne(#[from] ZneError),
}

/// One term of a quasi-probability representation: a signed coefficient and
/// the Pauli fragment appended after the noisy gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PecTerm {
    pub eta: f64,
    /// Fragment Paulis on (control, target).
    pub fragment: (char, char),
}

/// Signed decomposition of the ideal CX under matched depolarizing noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiProbRep {
    pub epsilon: f64,
    pub terms: Vec<PecTerm>,
    pub one_norm: f64,
}

/// The 16 two-qubit Pauli labels in lexicographic order, II first.
pub fn pauli_pairs() -> Vec<(Pauli, Pauli)> {
    let ps = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
    let mut out = Vec::with_capacity(16);
    for a in ps {
        for b in ps {
            out.push((a, b));
        }
    }
    out
}

/// Gate ops realizing a Pauli conjugation on qubit `q` in the device basis:
/// Z becomes Rz(pi) and Y becomes X then Rz(pi), both up to global phase.
pub fn pauli_ops(p: Pauli, q: usize) -> Vec<GateOp> {
    match p {
        Pauli::I => vec![],
        Pauli::X => vec![GateOp::x(q)],
        Pauli::Z => vec![GateOp::rz(q, PI)],
        Pauli::Y => vec![GateOp::x(q), GateOp::rz(q, PI)],
    }
}

impl QuasiProbRep {
    pub fn sum_eta(&self) -> f64 {
        self.terms.iter().map(|t| t.eta).sum()
    }

    /// Fragment gate list of term `idx` materialized on the CX's qubit pair.
    pub fn fragment_ops(&self, idx: usize, qa: usize, qb: usize) -> Vec<GateOp> {
        let (a, b) = self.terms[idx].fragment;
        let mut ops = pauli_ops(Pauli::from_char(a).unwrap(), qa);
        ops.extend(pauli_ops(Pauli::from_char(b).unwrap(), qb));
        ops
    }
}

/// Closed-form representation of the ideal CX as noisy-CX-plus-Pauli terms
/// under two-qubit depolarizing noise of level `eps`.
pub fn represent_cx_depolarizing(eps: f64) -> Result<QuasiProbRep, PecError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(PecError::EpsilonOutOfRange(eps));
    }
    if eps == 0.0 {
        return Ok(QuasiProbRep {
            epsilon: 0.0,
            terms: vec![PecTerm {
                eta: 1.0,
                fragment: ('I', 'I'),
            }],
            one_norm: 1.0,
        });
    }
    let denom = 16.0 * (1.0 - eps);
    let eta_identity = (16.0 - eps) / denom;
    let eta_pauli = -eps / denom;
    let terms: Vec<PecTerm> = pauli_pairs()
        .into_iter()
        .map(|(a, b)| PecTerm {
            eta: if (a, b) == (Pauli::I, Pauli::I) {
                eta_identity
            } else {
                eta_pauli
            },
            fragment: (a.to_char(), b.to_char()),
        })
        .collect();
    let one_norm = (16.0 + 14.0 * eps) / denom;
    debug_assert!((terms.iter().map(|t| t.eta).sum::<f64>() - 1.0).abs() < 1e-12);
    Ok(QuasiProbRep {
        epsilon: eps,
        terms,
        one_norm,
    })
}

/// Representations cached per distinct noise level.
#[derive(Debug, Default)]
pub struct RepCache {
    map: BTreeMap<u64, QuasiProbRep>,
}

impl RepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, eps: f64) -> Result<&QuasiProbRep, PecError> {
        let key = eps.to_bits();
        if !self.map.contains_key(&key) {
            self.map.insert(key, represent_cx_depolarizing(eps)?);
        }
        Ok(&self.map[&key])
    }
}

/// One representation per CX site of `c`, in site order, using the noise
/// model's per-instance levels.
pub fn reps_for_circuit(c: &Circuit, noise: &NoiseModel) -> Result<Vec<QuasiProbRep>, PecError> {
    let mut cache = RepCache::new();
    let mut reps = Vec::new();
    for (idx, op) in c.ops().iter().enumerate() {
        match op.kind.name() {
            "CSWAP" => return Err(PecError::UntranspiledCircuit),
            "CX" => reps.push(cache.get(noise.epsilon_for(idx))?.clone()),
            _ => {}
        }
    }
    Ok(reps)
}

/// Product of per-site one-norms.
pub fn gamma_total(reps: &[QuasiProbRep]) -> f64 {
    reps.iter().map(|r| r.one_norm).product()
}

/// A fragment-substituted ancillary circuit with its accumulated sign.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCircuit {
    pub circuit: Circuit,
    pub sign: f64,
    /// Chosen term index per CX site.
    pub term_indices: Vec<usize>,
}

/// Draw `s` ancillary circuits: at every CX site, term i is chosen with
/// probability |eta_i| / gamma and its Pauli fragment appended after the
/// CX. Deterministic given the seed; sample i uses the stream (seed, i).
pub fn sample_circuits(
    c: &Circuit,
    reps: &[QuasiProbRep],
    s: usize,
    seed: u64,
) -> Result<Vec<SampledCircuit>, PecError> {
    if s == 0 {
        return Err(PecError::ZeroSamples);
    }
    let sites = c.ops().iter().filter(|op| op.kind.name() == "CX").count();
    if c.ops().iter().any(|op| op.kind.name() == "CSWAP") {
        return Err(PecError::UntranspiledCircuit);
    }
    if reps.len() != sites {
        return Err(PecError::RepCountMismatch {
            got: reps.len(),
            sites,
        });
    }
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let mut r = rng::stream(seed, &[i as u64]);
        let mut ops = Vec::with_capacity(c.len());
        let mut sign = 1.0f64;
        let mut indices = Vec::with_capacity(sites);
        let mut site = 0usize;
        for op in c.ops() {
            ops.push(op.clone());
            if op.kind.name() == "CX" {
                let rep = &reps[site];
                let idx = draw_term(rep, &mut r);
                sign *= rep.terms[idx].eta.signum();
                ops.extend(rep.fragment_ops(idx, op.qubits[0], op.qubits[1]));
                indices.push(idx);
                site += 1;
            }
        }
        out.push(SampledCircuit {
            circuit: c.replaced_ops(ops)?,
            sign,
            term_indices: indices,
        });
    }
    Ok(out)
}

fn draw_term<R: Rng>(rep: &QuasiProbRep, r: &mut R) -> usize {
    let u: f64 = r.gen::<f64>() * rep.one_norm;
    let mut acc = 0.0;
    for (i, t) in rep.terms.iter().enumerate() {
        acc += t.eta.abs();
        if u < acc {
            return i;
        }
    }
    rep.terms.len() - 1
}

/// The importance-sampled signed mean (gamma_total / s) sum_i sigma_i y_i.
pub fn pec_estimate(results: &[(f64, f64)], gamma_total: f64) -> Result<f64, PecError> {
    if results.is_empty() {
        return Err(PecError::EmptyResults);
    }
    let s = results.len() as f64;
    Ok(results.iter().map(|(sign, y)| sign * y).sum::<f64>() * gamma_total / s)
}

/// Component-wise estimator for vector-valued per-sample results.
pub fn pec_estimate_components(
    signs: &[f64],
    rows: &[Vec<f64>],
    gamma_total: f64,
) -> Result<Vec<f64>, PecError> {
    if rows.is_empty() || signs.len() != rows.len() {
        return Err(PecError::EmptyResults);
    }
    let dim = rows[0].len();
    let s = rows.len() as f64;
    let mut out = vec![0.0; dim];
    for (sign, row) in signs.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += sign * v;
        }
    }
    for o in out.iter_mut() {
        *o *= gamma_total / s;
    }
    Ok(out)
}

/// Per-sample record kept for offline re-derivation of the estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PecSampleRecord {
    pub sign: f64,
    pub term_indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Outcome of a sampled PEC run over one circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PecOutcome {
    pub gamma_total: f64,
    pub samples: Vec<PecSampleRecord>,
    pub estimate: Vec<f64>,
    /// Standard error of each estimate component from the sample spread.
    pub std_err: Vec<f64>,
    pub failures: Vec<(usize, String)>,
}

/// Sample, execute, combine. The executor maps (sample index, sampled
/// circuit) to a vector of per-sample values (expectations or outcome
/// probabilities); it must apply the same noise model the representations
/// were built from. Aborts when fewer than half the samples succeed.
pub fn pec_execute<F>(
    c: &Circuit,
    noise: &NoiseModel,
    s: usize,
    seed: u64,
    mut executor: F,
) -> Result<PecOutcome, PecError>
where
    F: FnMut(usize, &SampledCircuit) -> Result<Vec<f64>, String>,
{
    let reps = reps_for_circuit(c, noise)?;
    let gamma = gamma_total(&reps);
    let sampled = sample_circuits(c, &reps, s, seed)?;
    let mut samples = Vec::with_capacity(s);
    let mut failures = Vec::new();
    for (i, sc) in sampled.iter().enumerate() {
        match executor(i, sc) {
            Ok(values) => samples.push(PecSampleRecord {
                sign: sc.sign,
                term_indices: sc.term_indices.clone(),
                values,
            }),
            Err(msg) => failures.push((i, msg)),
        }
    }
    if samples.len() * 2 < s {
        return Err(PecError::TooManyFailures {
            ok: samples.len(),
            total: s,
        });
    }
    let signs: Vec<f64> = samples.iter().map(|r| r.sign).collect();
    let rows: Vec<Vec<f64>> = samples.iter().map(|r| r.values.clone()).collect();
    let estimate = pec_estimate_components(&signs, &rows, gamma)?;
    let std_err = signed_std_err(&signs, &rows, gamma);
    Ok(PecOutcome {
        gamma_total: gamma,
        samples,
        estimate,
        std_err,
        failures,
    })
}

fn signed_std_err(signs: &[f64], rows: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = rows.len();
    let dim = rows.first().map_or(0, |r| r.len());
    if n < 2 {
        return vec![0.0; dim];
    }
    let mut out = vec![0.0; dim];
    for d in 0..dim {
        let vals: Vec<f64> = signs.iter().zip(rows).map(|(s, r)| s * r[d]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        out[d] = gamma * (var / n as f64).sqrt();
    }
    out
}

/// Deterministic full-expansion path: evolve the density matrix and apply
/// the inverse-channel superoperator sum_P eta_P P rho P at every CX site.
/// With matched noise this cancels the depolarizing exactly, so the result
/// equals the noiseless state up to floating-point error.
pub fn pec_exact_density(c: &Circuit, noise: &NoiseModel) -> Result<DensityMatrix, PecError> {
    let mut cache = RepCache::new();
    let rho = evolve_with(c, noise, |rho, _site, (qa, qb), eps| {
        let rep = cache
            .get(eps)
            .map_err(|_| SimError::EpsilonOutOfRange(eps))?;
        let dim = rho.dim();
        let width = rho.width();
        let mut acc = crate::linalg::CMat::zeros(dim, dim);
        for (i, term) in rep.terms.iter().enumerate() {
            let mut branch = rho.clone();
            for op in rep.fragment_ops(i, qa, qb) {
                branch.apply_op(&op);
            }
            acc += branch.matrix().map(|x| x * term.eta);
        }
        *rho = DensityMatrix::from_matrix_unchecked(width, acc);
        Ok(())
    })?;
    Ok(rho)
}

/// Exact PEC expectation through the inverse-channel path.
pub fn pec_exact_expectation(
    c: &Circuit,
    noise: &NoiseModel,
    obs: &Observable,
) -> Result<f64, PecError> {
    let rho = pec_exact_density(c, noise)?;
    Ok(crate::sim::expectation(&rho, obs)?)
}

/// Per-lambda PEC results with their extrapolation to lambda = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatenationOutcome {
    pub lambdas: Vec<f64>,
    pub per_lambda: Vec<PecOutcome>,
    pub extrapolated: Vec<f64>,
    pub fits: Vec<Extrapolation>,
}

/// ZNE-over-PEC concatenation: fold the circuit at every lambda of the
/// schedule, run sampled PEC on each noise-scaled circuit (every folded CX
/// copy is an independent noisy site with its own representation), and
/// extrapolate the PEC-mitigated values to lambda = 0 component-wise.
#[allow(clippy::too_many_arguments)]
pub fn zne_pec_concatenate<F>(
    c: &Circuit,
    sched: &ScaleSchedule,
    strategy: &FoldingStrategy,
    x: &Extrapolator,
    noise: &NoiseModel,
    s: usize,
    seed: u64,
    mut executor: F,
) -> Result<ConcatenationOutcome, PecError>
where
    F: FnMut(usize, usize, &SampledCircuit) -> Result<Vec<f64>, String>,
{
    let mut per_lambda = Vec::new();
    for (i, &lambda) in sched.lambdas().iter().enumerate() {
        let folded = fold_circuit(c, lambda, &strategy.for_lambda_index(i))?;
        let outcome = pec_execute(
            &folded,
            noise,
            s,
            rng::derive_seed(seed, &[i as u64]),
            |j, sc| executor(i, j, sc),
        )?;
        per_lambda.push(outcome);
    }
    let dim = per_lambda[0].estimate.len();
    let mut extrapolated = Vec::with_capacity(dim);
    let mut fits = Vec::with_capacity(dim);
    for d in 0..dim {
        let pts: Vec<(f64, f64)> = sched
            .lambdas()
            .iter()
            .zip(&per_lambda)
            .map(|(&l, o)| (l, o.estimate[d]))
            .collect();
        let fit = extrapolate(&pts, x)?;
        extrapolated.push(fit.value);
        fits.push(fit);
    }
    Ok(ConcatenationOutcome {
        lambdas: sched.lambdas().to_vec(),
        per_lambda,
        extrapolated,
        fits,
    })
}

/// Pauli-transfer-matrix helpers over two qubits. A channel's PTM is
/// R[i][j] = Tr[P_i Lambda(P_j)] / 4; composition of channels is matrix
/// multiplication, which makes inverse-channel decompositions a linear
/// algebra problem and gives the test oracle for the closed-form
/// representation.
pub mod ptm {
    use nalgebra::DMatrix;

    use super::pauli_pairs;
    use crate::circuit::GateOp;
    use crate::linalg::{kron, CMat};
    use crate::sim::Pauli;

    /// 4x4 matrix of a two-qubit Pauli label.
    pub fn pauli_matrix(pair: (Pauli, Pauli)) -> CMat {
        kron(&pair.0.matrix(), &pair.1.matrix())
    }

    /// PTM of an arbitrary two-qubit channel given by its action on 4x4
    /// matrices.
    pub fn ptm_of<F: Fn(&CMat) -> CMat>(channel: F) -> DMatrix<f64> {
        let basis: Vec<CMat> = pauli_pairs().into_iter().map(pauli_matrix).collect();
        let mut r = DMatrix::<f64>::zeros(16, 16);
        for (j, pj) in basis.iter().enumerate() {
            let out = channel(pj);
            for (i, pi) in basis.iter().enumerate() {
                let tr = (pi * &out).trace();
                debug_assert!(tr.im.abs() < 1e-10);
                r[(i, j)] = tr.re / 4.0;
            }
        }
        r
    }

    /// PTM of conjugation by a unitary.
    pub fn unitary_ptm(u: &CMat) -> DMatrix<f64> {
        ptm_of(|rho| u * rho * u.adjoint())
    }

    /// PTM of the ideal CX (control = first qubit).
    pub fn cx_ptm() -> DMatrix<f64> {
        unitary_ptm(&GateOp::cx(0, 1).matrix())
    }

    /// PTM of the two-qubit depolarizing channel
    /// D(rho) = (1 - eps) rho + eps Tr[rho] I/4.
    pub fn depolarizing_ptm(eps: f64) -> DMatrix<f64> {
        ptm_of(|rho| {
            let tr = rho.trace();
            let mixed = CMat::identity(4, 4).map(|x| x * (tr * 0.25 * eps));
            rho.map(|x| x * (1.0 - eps)) + mixed
        })
    }

    /// PTM of conjugation by a two-qubit Pauli (always diagonal +-1).
    pub fn pauli_conjugation_ptm(pair: (Pauli, Pauli)) -> DMatrix<f64> {
        let p = pauli_matrix(pair);
        unitary_ptm(&p)
    }

    /// PTM of the signed combination sum_i eta_i (Pauli_i after `base`).
    pub fn combination_ptm(etas: &[f64], base: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::<f64>::zeros(16, 16);
        for ((eta, pair), _) in etas.iter().zip(pauli_pairs()).zip(0..) {
            acc += pauli_conjugation_ptm(pair) * *eta;
        }
        acc * base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_routing_circuit, transpile, BasisSet};
    use crate::linalg::max_abs_diff;
    use crate::sim::{expectation, simulate, NoiseModel, Observable};

    fn device_routing() -> Circuit {
        transpile(&build_routing_circuit(), &BasisSet::device_default()).unwrap()
    }

    fn one_cx() -> Circuit {
        Circuit::with_ops(2, "cx", vec![GateOp::cx(0, 1)]).unwrap()
    }

    #[test]
    fn noiseless_rep_is_the_gate_itself() {
        let rep = represent_cx_depolarizing(0.0).unwrap();
        assert_eq!(rep.terms.len(), 1);
        assert_eq!(rep.terms[0].eta, 1.0);
        assert_eq!(rep.one_norm, 1.0);
    }

    #[test]
    fn closed_form_values_at_two_percent() {
        let rep = represent_cx_depolarizing(0.02).unwrap();
        assert_eq!(rep.terms.len(), 16);
        let eta_i = rep.terms[0].eta;
        assert!((eta_i - 1.0191326530612246).abs() < 1e-12);
        for t in &rep.terms[1..] {
            assert!((t.eta - (-0.0012755102040816327)).abs() < 1e-12);
            assert!(t.eta < 0.0);
        }
        assert!((rep.one_norm - 1.0382653061224488).abs() < 1e-12);
        let positives = rep.terms.iter().filter(|t| t.eta > 0.0).count();
        assert_eq!(positives, 1);
    }

    #[test]
    fn trace_preserving_condition_over_eps_range() {
        for eps in [0.0, 0.001, 0.01, 0.05, 0.2, 0.6] {
            let rep = represent_cx_depolarizing(eps).unwrap();
            assert!((rep.sum_eta() - 1.0).abs() < 1e-12, "eps {eps}");
        }
        assert!(matches!(
            represent_cx_depolarizing(1.0),
            Err(PecError::EpsilonOutOfRange(_))
        ));
    }

    /// Independent oracle: build the depolarizing PTM, invert numerically,
    /// decompose the inverse in the Pauli-conjugation basis, and compare to
    /// the closed-form coefficients.
    #[test]
    fn closed_form_matches_ptm_inversion_oracle() {
        for eps in [0.001, 0.01, 0.05, 0.2] {
            let rep = represent_cx_depolarizing(eps).unwrap();
            let d = ptm::depolarizing_ptm(eps);
            let d_inv = d.clone().try_inverse().expect("depolarizing PTM invertible");
            // The conjugation PTMs are diagonal, so the decomposition is a
            // 16x16 linear solve on the diagonals.
            let mut a = nalgebra::DMatrix::<f64>::zeros(16, 16);
            for (col, pair) in pauli_pairs().into_iter().enumerate() {
                let c = ptm::pauli_conjugation_ptm(pair);
                for row in 0..16 {
                    a[(row, col)] = c[(row, row)];
                }
            }
            let rhs = nalgebra::DVector::from_iterator(16, (0..16).map(|i| d_inv[(i, i)]));
            let etas = a.lu().solve(&rhs).expect("decomposition solvable");
            for (i, t) in rep.terms.iter().enumerate() {
                assert!(
                    (t.eta - etas[i]).abs() < 1e-12,
                    "eps {eps} term {i}: closed {} oracle {}",
                    t.eta,
                    etas[i]
                );
            }
            let gamma_oracle: f64 = etas.iter().map(|e| e.abs()).sum();
            assert!((rep.one_norm - gamma_oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn combination_reproduces_ideal_cx_ptm() {
        for eps in [0.001, 0.01, 0.05, 0.2] {
            let rep = represent_cx_depolarizing(eps).unwrap();
            let etas: Vec<f64> = rep.terms.iter().map(|t| t.eta).collect();
            let noisy = ptm::depolarizing_ptm(eps) * ptm::cx_ptm();
            let combined = ptm::combination_ptm(&etas, &noisy);
            let ideal = ptm::cx_ptm();
            let err = (&combined - &ideal)
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "eps {eps}: PTM error {err}");
        }
    }

    #[test]
    fn noiseless_sampling_returns_the_circuit() {
        let c = device_routing();
        let reps = reps_for_circuit(&c, &NoiseModel::ideal(3)).unwrap();
        let samples = sample_circuits(&c, &reps, 5, 9).unwrap();
        for s in samples {
            assert_eq!(s.circuit.ops(), c.ops());
            assert_eq!(s.sign, 1.0);
        }
    }

    #[test]
    fn sampling_untranspiled_circuit_errors() {
        let c = build_routing_circuit();
        let err = reps_for_circuit(&c, &NoiseModel::ideal(3));
        assert!(matches!(err, Err(PecError::UntranspiledCircuit)));
    }

    #[test]
    fn routing_samples_have_eight_sites_and_recorded_signs() {
        let c = device_routing();
        let noise = NoiseModel::with_cx_depolarizing(3, 0.02);
        let reps = reps_for_circuit(&c, &noise).unwrap();
        assert_eq!(reps.len(), 8);
        let samples = sample_circuits(&c, &reps, 20, 4).unwrap();
        assert_eq!(samples.len(), 20);
        for s in &samples {
            assert_eq!(s.term_indices.len(), 8);
            let neg = s.term_indices.iter().filter(|&&i| i != 0).count();
            let want = if neg % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(s.sign, want);
        }
        // Determinism.
        let again = sample_circuits(&c, &reps, 20, 4).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn identity_fragment_frequency_matches_eta_ratio() {
        let c = one_cx();
        let noise = NoiseModel::with_cx_depolarizing(2, 0.05);
        let reps = reps_for_circuit(&c, &noise).unwrap();
        let s = 100_000;
        let samples = sample_circuits(&c, &reps, s, 123).unwrap();
        let identity = samples.iter().filter(|x| x.term_indices[0] == 0).count();
        let p = reps[0].terms[0].eta / reps[0].one_norm;
        let sigma = (p * (1.0 - p) / s as f64).sqrt();
        let frac = identity as f64 / s as f64;
        assert!((frac - p).abs() < 3.0 * sigma, "{frac} vs {p}");
    }

    #[test]
    fn estimator_reduces_to_plain_mean() {
        let results = vec![(1.0, 0.2), (1.0, 0.4), (1.0, 0.6)];
        let v = pec_estimate(&results, 1.0).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(pec_estimate(&[], 1.0).is_err());
    }

    /// Exhaustive 16-term expansion on a single CX: the signed combination
    /// of exact noisy expectations recovers the noiseless value.
    #[test]
    fn full_expansion_single_cx_is_exact() {
        let eps = 0.1;
        let c = one_cx();
        let noise = NoiseModel::with_cx_depolarizing(2, eps);
        let rep = represent_cx_depolarizing(eps).unwrap();
        let obs = Observable::pauli("ZI").unwrap();
        let mut acc = 0.0;
        for i in 0..rep.terms.len() {
            let mut ops = c.ops().to_vec();
            ops.extend(rep.fragment_ops(i, 0, 1));
            let noisy = c.replaced_ops(ops).unwrap();
            let rho = simulate(&noisy, &noise).unwrap();
            acc += rep.terms[i].eta * expectation(&rho, &obs).unwrap();
        }
        assert!((acc - 1.0).abs() < 1e-10, "got {acc}");
    }

    #[test]
    fn inverse_channel_path_recovers_noiseless_routing() {
        let c = device_routing();
        let noise = NoiseModel::with_cx_depolarizing(3, 0.02);
        let exact = pec_exact_density(&c, &noise).unwrap();
        let ideal = simulate(&c, &NoiseModel::ideal(3)).unwrap();
        assert!(max_abs_diff(exact.matrix(), ideal.matrix()) < 1e-9);
        let zzz = pec_exact_expectation(&c, &noise, &Observable::pauli("ZZZ").unwrap()).unwrap();
        assert!(zzz.abs() < 1e-9);
    }

    /// The exhaustive two-site expansion agrees with the inverse-channel
    /// superoperator path.
    #[test]
    fn full_expansion_matches_inverse_channel_on_two_cx() {
        let eps = 0.07;
        let c = Circuit::with_ops(
            2,
            "two",
            vec![GateOp::sqrt_x(0), GateOp::cx(0, 1), GateOp::rz(1, 0.4), GateOp::cx(1, 0)],
        )
        .unwrap();
        let noise = NoiseModel::with_cx_depolarizing(2, eps);
        let rep = represent_cx_depolarizing(eps).unwrap();
        let obs = Observable::pauli("ZZ").unwrap();
        let sites: Vec<usize> = c
            .ops()
            .iter()
            .enumerate()
            .filter(|(_, op)| op.kind.name() == "CX")
            .map(|(i, _)| i)
            .collect();
        let mut acc = 0.0;
        for i0 in 0..16 {
            for i1 in 0..16 {
                let mut ops = Vec::new();
                for (idx, op) in c.ops().iter().enumerate() {
                    ops.push(op.clone());
                    if idx == sites[0] {
                        ops.extend(rep.fragment_ops(i0, op.qubits[0], op.qubits[1]));
                    } else if idx == sites[1] {
                        ops.extend(rep.fragment_ops(i1, op.qubits[0], op.qubits[1]));
                    }
                }
                let noisy = c.replaced_ops(ops).unwrap();
                let rho = simulate(&noisy, &noise).unwrap();
                acc += rep.terms[i0].eta
                    * rep.terms[i1].eta
                    * expectation(&rho, &obs).unwrap();
            }
        }
        let via_inverse = pec_exact_expectation(&c, &noise, &obs).unwrap();
        assert!((acc - via_inverse).abs() < 1e-10, "{acc} vs {via_inverse}");
        let ideal = expectation(&simulate(&c, &NoiseModel::ideal(2)).unwrap(), &obs).unwrap();
        assert!((acc - ideal).abs() < 1e-10);
    }

    #[test]
    fn sampled_estimator_is_unbiased_on_one_cx() {
        let eps = 0.1;
        let c = one_cx();
        let noise = NoiseModel::with_cx_depolarizing(2, eps);
        let obs = Observable::pauli("ZI").unwrap();
        let s = 20_000;
        let outcome = pec_execute(&c, &noise, s, 31, |_, sc| {
            let rho = simulate(&sc.circuit, &noise).map_err(|e| e.to_string())?;
            Ok(vec![expectation(&rho, &obs).map_err(|e| e.to_string())?])
        })
        .unwrap();
        // Noiseless value is 1; four standard errors of slack.
        let err = (outcome.estimate[0] - 1.0).abs();
        assert!(
            err < 4.0 * outcome.std_err[0].max(1e-6),
            "estimate {} stderr {}",
            outcome.estimate[0],
            outcome.std_err[0]
        );
    }

    #[test]
    fn estimator_spread_grows_with_epsilon() {
        let c = one_cx();
        let obs = Observable::pauli("ZI").unwrap();
        let spread = |eps: f64| {
            let noise = NoiseModel::with_cx_depolarizing(2, eps);
            let outcome = pec_execute(&c, &noise, 4000, 77, |_, sc| {
                let rho = simulate(&sc.circuit, &noise).map_err(|e| e.to_string())?;
                Ok(vec![expectation(&rho, &obs).map_err(|e| e.to_string())?])
            })
            .unwrap();
            outcome.std_err[0]
        };
        assert!(spread(0.1) > spread(0.01));
    }

    #[test]
    fn gamma_total_is_product_of_site_norms() {
        let c = device_routing();
        let noise = NoiseModel::with_cx_depolarizing(3, 0.02);
        let reps = reps_for_circuit(&c, &noise).unwrap();
        let gamma = gamma_total(&reps);
        let single = represent_cx_depolarizing(0.02).unwrap().one_norm;
        assert!((gamma - single.powi(8)).abs() < 1e-12);
    }

    #[test]
    fn pec_execute_noiseless_equals_unmitigated() {
        let c = device_routing();
        let noise = NoiseModel::ideal(3);
        let obs = Observable::Projector { width: 3, index: 0 };
        let outcome = pec_execute(&c, &noise, 10, 3, |_, sc| {
            let rho = simulate(&sc.circuit, &noise).map_err(|e| e.to_string())?;
            Ok(vec![expectation(&rho, &obs).map_err(|e| e.to_string())?])
        })
        .unwrap();
        assert!((outcome.estimate[0] - 0.25).abs() < 1e-10);
        assert!((outcome.gamma_total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pec_execute_aborts_on_majority_failure() {
        let c = one_cx();
        let noise = NoiseModel::with_cx_depolarizing(2, 0.05);
        let err = pec_execute(&c, &noise, 10, 3, |i, _| {
            if i < 4 {
                Ok(vec![0.0])
            } else {
                Err("device offline".into())
            }
        });
        assert!(matches!(
            err,
            Err(PecError::TooManyFailures { ok: 4, total: 10 })
        ));
    }

    #[test]
    fn concatenation_noiseless_executor_extrapolates_constant() {
        let c = device_routing();
        let noise = NoiseModel::ideal(3);
        let obs = Observable::Projector { width: 3, index: 0 };
        let sched = ScaleSchedule::new(vec![1.0, 3.0, 5.0]).unwrap();
        let outcome = zne_pec_concatenate(
            &c,
            &sched,
            &FoldingStrategy::LocalLeft,
            &Extrapolator::Polynomial(2),
            &noise,
            4,
            5,
            |_, _, sc| {
                let rho = simulate(&sc.circuit, &noise).map_err(|e| e.to_string())?;
                Ok(vec![expectation(&rho, &obs).map_err(|e| e.to_string())?])
            },
        )
        .unwrap();
        for o in &outcome.per_lambda {
            assert!((o.estimate[0] - 0.25).abs() < 1e-10);
        }
        assert!((outcome.extrapolated[0] - 0.25).abs() < 1e-9);
        assert_eq!(outcome.per_lambda.len(), 3);
    }

    #[test]
    fn concatenation_inverse_channel_per_lambda_is_exact() {
        // Full-expansion PEC applied to each noise-scaled circuit: each
        // lambda point equals the noiseless value and so does the
        // extrapolation.
        let c = device_routing();
        let noise = NoiseModel::with_cx_depolarizing(3, 0.02);
        let obs = Observable::pauli("XZZ").unwrap();
        let ideal =
            expectation(&simulate(&c, &NoiseModel::ideal(3)).unwrap(), &obs).unwrap();
        let sched = ScaleSchedule::concatenation_default();
        let mut pts = Vec::new();
        for (i, &lambda) in sched.lambdas().iter().enumerate() {
            let folded =
                fold_circuit(&c, lambda, &FoldingStrategy::LocalLeft.for_lambda_index(i))
                    .unwrap();
            let v = pec_exact_expectation(&folded, &noise, &obs).unwrap();
            pts.push((lambda, v));
            assert!((v - ideal).abs() < 1e-8, "lambda {lambda}: {v} vs {ideal}");
        }
        let fit = extrapolate(&pts, &Extrapolator::Polynomial(2)).unwrap();
        assert!((fit.value - ideal).abs() < 1e-6);
    }
}

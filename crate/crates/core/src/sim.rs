//! Density-matrix simulator with depolarizing CX noise and a confusion-matrix
//! readout model.
//!
//! The simulator stands in for the noisy device: gates act as rho -> U rho
//! U^dagger, every CX is followed by a two-qubit depolarizing channel on its
//! qubit pair, and measurement samples the diagonal through a per-qubit
//! readout confusion map.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{apply_gate_left, apply_gate_right_adjoint, qubit_bit, Circuit, GateOp};
use crate::linalg::{hermitian_eigen, CMat, C_ONE, C_ZERO};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("gate {0} is not in the device basis")]
    NonBasisGate(String),
    #[error("depolarizing level {0} outside [0, 1)")]
    EpsilonOutOfRange(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("diagonal entry {0} below the -1e-9 negativity tolerance")]
    NegativeProbability(f64),
    #[error("readout confusion matrix is not column-stochastic")]
    BadConfusion,
    #[error("shot count must be at least 1")]
    ZeroShots,
    #[error("width {0} beyond simulator limit")]
    WidthOverflow(usize),
    #[error("matrix is not a density matrix: {0}")]
    InvalidState(String),
}

const MAX_SIM_WIDTH: usize = 10;

/// 2^m x 2^m Hermitian, PSD, trace-1 state of an m-qubit register.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    width: usize,
    mat: CMat,
}

impl DensityMatrix {
    /// |0...0><0...0| on `width` qubits.
    pub fn ground(width: usize) -> Self {
        let dim = 1usize << width;
        let mut mat = CMat::zeros(dim, dim);
        mat[(0, 0)] = C_ONE;
        DensityMatrix { width, mat }
    }

    /// Pure state |psi><psi| from a statevector.
    pub fn from_statevector(width: usize, amps: &[Complex64]) -> Result<Self, SimError> {
        let dim = 1usize << width;
        if amps.len() != dim {
            return Err(SimError::DimMismatch(amps.len(), dim));
        }
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidState(format!("norm {norm}")));
        }
        let mut mat = CMat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                mat[(i, j)] = amps[i] * amps[j].conj();
            }
        }
        Ok(DensityMatrix { width, mat })
    }

    /// Maximally mixed state I / 2^m.
    pub fn maximally_mixed(width: usize) -> Self {
        let dim = 1usize << width;
        let mat = CMat::identity(dim, dim).map(|x| x / dim as f64);
        DensityMatrix { width, mat }
    }

    /// Wrap an existing matrix, checking hermiticity and trace.
    pub fn from_matrix(width: usize, mat: CMat) -> Result<Self, SimError> {
        let dim = 1usize << width;
        if mat.nrows() != dim || mat.ncols() != dim {
            return Err(SimError::DimMismatch(mat.nrows(), dim));
        }
        let herm = (&mat - mat.adjoint())
            .iter()
            .map(|x| x.norm())
            .fold(0.0, f64::max);
        if herm > 1e-9 {
            return Err(SimError::InvalidState(format!("hermiticity defect {herm}")));
        }
        let tr: Complex64 = mat.diagonal().iter().sum();
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-9 {
            return Err(SimError::InvalidState(format!("trace {tr}")));
        }
        Ok(DensityMatrix { width, mat })
    }

    pub(crate) fn from_matrix_unchecked(width: usize, mat: CMat) -> Self {
        DensityMatrix { width, mat }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        1usize << self.width
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn trace(&self) -> Complex64 {
        self.mat.diagonal().iter().sum()
    }

    pub fn purity(&self) -> f64 {
        (&self.mat * &self.mat)
            .diagonal()
            .iter()
            .sum::<Complex64>()
            .re
    }

    /// Apply a gate as rho -> U rho U^dagger.
    pub fn apply_op(&mut self, op: &GateOp) {
        let u = op.matrix();
        apply_gate_left(&mut self.mat, &u, &op.qubits, self.width);
        apply_gate_right_adjoint(&mut self.mat, &u, &op.qubits, self.width);
    }

    /// Two-qubit depolarizing channel on (qa, qb):
    /// rho -> (1 - eps) rho + eps * (I/4 on the pair) kron (partial trace).
    pub fn depolarize_pair(&mut self, qa: usize, qb: usize, eps: f64) {
        if eps == 0.0 {
            return;
        }
        let rest = self.trace_out_matrix(&[qa, qb]);
        self.mix_in_identity_on(&[qa, qb], &rest, eps);
    }

    /// Single-qubit depolarizing analogue.
    pub fn depolarize_single(&mut self, q: usize, eps: f64) {
        if eps == 0.0 {
            return;
        }
        let rest = self.trace_out_matrix(&[q]);
        self.mix_in_identity_on(&[q], &rest, eps);
    }

    fn mix_in_identity_on(&mut self, qubits: &[usize], rest: &CMat, eps: f64) {
        let dim = self.dim();
        let sub = 1usize << qubits.len();
        let inv_sub = 1.0 / sub as f64;
        let keep: Vec<usize> = (0..self.width).filter(|q| !qubits.contains(q)).collect();
        for i in 0..dim {
            for j in 0..dim {
                let same_pair = qubits
                    .iter()
                    .all(|&q| qubit_bit(i, q, self.width) == qubit_bit(j, q, self.width));
                let mixed = if same_pair {
                    let (ri, rj) = (
                        compress_index(i, &keep, self.width),
                        compress_index(j, &keep, self.width),
                    );
                    rest[(ri, rj)] * inv_sub
                } else {
                    C_ZERO
                };
                self.mat[(i, j)] = self.mat[(i, j)] * (1.0 - eps) + mixed * eps;
            }
        }
    }

    fn trace_out_matrix(&self, drop: &[usize]) -> CMat {
        let keep: Vec<usize> = (0..self.width).filter(|q| !drop.contains(q)).collect();
        let rdim = 1usize << keep.len();
        let mut out = CMat::zeros(rdim, rdim);
        let dim = self.dim();
        for i in 0..dim {
            let ri = compress_index(i, &keep, self.width);
            for j in 0..dim {
                if drop
                    .iter()
                    .any(|&q| qubit_bit(i, q, self.width) != qubit_bit(j, q, self.width))
                {
                    continue;
                }
                let rj = compress_index(j, &keep, self.width);
                out[(ri, rj)] += self.mat[(i, j)];
            }
        }
        out
    }

    /// Reduced state over `keep` (in the given order), tracing out the rest.
    pub fn reduce_to(&self, keep: &[usize]) -> Result<DensityMatrix, SimError> {
        for &q in keep {
            if q >= self.width {
                return Err(SimError::WidthOverflow(q));
            }
        }
        let drop: Vec<usize> = (0..self.width).filter(|q| !keep.contains(q)).collect();
        // trace_out_matrix keeps ascending order; permute afterwards if the
        // caller asked for a different qubit order.
        let ascending: Vec<usize> = {
            let mut k = keep.to_vec();
            k.sort_unstable();
            k
        };
        let rest = self.trace_out_matrix(&drop);
        let kw = keep.len();
        if ascending == keep {
            return Ok(DensityMatrix {
                width: kw,
                mat: rest,
            });
        }
        let rdim = 1usize << kw;
        let mut out = CMat::zeros(rdim, rdim);
        let perm: Vec<usize> = keep
            .iter()
            .map(|q| ascending.iter().position(|a| a == q).unwrap())
            .collect();
        for i in 0..rdim {
            let pi = permute_bits(i, &perm, kw);
            for j in 0..rdim {
                let pj = permute_bits(j, &perm, kw);
                out[(i, j)] = rest[(pi, pj)];
            }
        }
        Ok(DensityMatrix {
            width: kw,
            mat: out,
        })
    }

    /// Diagonal as real probabilities. Entries in [-1e-9, 0) are clipped to
    /// zero; anything more negative is an error.
    pub fn diagonal_probabilities(&self) -> Result<Vec<f64>, SimError> {
        let mut p = Vec::with_capacity(self.dim());
        for x in self.mat.diagonal().iter() {
            if x.re < -1e-9 {
                return Err(SimError::NegativeProbability(x.re));
            }
            p.push(x.re.max(0.0));
        }
        Ok(p)
    }

    /// Max-norm hermiticity defect, trace defect, and most negative
    /// eigenvalue; used by validity checks.
    pub fn invariant_defects(&self) -> (f64, f64, f64) {
        let herm = (&self.mat - self.mat.adjoint())
            .iter()
            .map(|x| x.norm())
            .fold(0.0, f64::max);
        let tr = (self.trace().re - 1.0).abs();
        let (vals, _) = hermitian_eigen(&self.mat);
        let min_eig = vals.iter().copied().fold(f64::INFINITY, f64::min);
        (herm, tr, min_eig)
    }
}

/// new index of `i` after restriction to `keep` qubits (ascending order).
fn compress_index(i: usize, keep: &[usize], width: usize) -> usize {
    let mut out = 0usize;
    for (pos, &q) in keep.iter().enumerate() {
        out |= qubit_bit(i, q, width) << (keep.len() - 1 - pos);
    }
    out
}

fn permute_bits(i: usize, perm: &[usize], width: usize) -> usize {
    let mut out = 0usize;
    for (pos, &src) in perm.iter().enumerate() {
        out |= ((i >> (width - 1 - pos)) & 1) << (width - 1 - src);
    }
    out
}

/// Per-qubit 2x2 readout confusion matrix; entry [obs][true] is the
/// probability of reading `obs` given prepared `true`. Columns sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion(pub [[f64; 2]; 2]);

impl Confusion {
    pub fn ideal() -> Self {
        Confusion([[1.0, 0.0], [0.0, 1.0]])
    }

    /// p(1|0) = p(0|1) = p.
    pub fn symmetric(p: f64) -> Self {
        Confusion([[1.0 - p, p], [p, 1.0 - p]])
    }

    pub fn asymmetric(p10: f64, p01: f64) -> Self {
        // p10 = p(read 1 | true 0), p01 = p(read 0 | true 1).
        Confusion([[1.0 - p10, p01], [p10, 1.0 - p01]])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for col in 0..2 {
            let s = self.0[0][col] + self.0[1][col];
            if (s - 1.0).abs() > 1e-9 || self.0[0][col] < 0.0 || self.0[1][col] < 0.0 {
                return Err(SimError::BadConfusion);
            }
        }
        Ok(())
    }

    pub fn is_ideal(&self) -> bool {
        self.0 == [[1.0, 0.0], [0.0, 1.0]]
    }
}

/// Noise the simulator injects: per-CX depolarizing level (optionally
/// overridden per gate instance), an optional single-qubit level, and
/// per-qubit readout confusion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub epsilon_cx: f64,
    /// Overrides keyed by op index within the executed circuit.
    pub epsilon_cx_overrides: BTreeMap<usize, f64>,
    pub epsilon_1q: f64,
    pub readout: Vec<Confusion>,
}

impl NoiseModel {
    pub fn ideal(width: usize) -> Self {
        NoiseModel {
            epsilon_cx: 0.0,
            epsilon_cx_overrides: BTreeMap::new(),
            epsilon_1q: 0.0,
            readout: vec![Confusion::ideal(); width],
        }
    }

    pub fn with_cx_depolarizing(width: usize, eps: f64) -> Self {
        let mut n = Self::ideal(width);
        n.epsilon_cx = eps;
        n
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for &e in std::iter::once(&self.epsilon_cx)
            .chain(self.epsilon_cx_overrides.values())
            .chain(std::iter::once(&self.epsilon_1q))
        {
            if !(0.0..1.0).contains(&e) {
                return Err(SimError::EpsilonOutOfRange(e));
            }
        }
        for c in &self.readout {
            c.validate()?;
        }
        Ok(())
    }

    /// Depolarizing level of the CX at op index `idx`.
    pub fn epsilon_for(&self, idx: usize) -> f64 {
        *self.epsilon_cx_overrides.get(&idx).unwrap_or(&self.epsilon_cx)
    }

    pub fn has_readout_error(&self) -> bool {
        self.readout.iter().any(|c| !c.is_ideal())
    }

    /// Readout model restricted to a measured-qubit subset.
    pub fn readout_for(&self, qubits: &[usize]) -> Vec<Confusion> {
        qubits
            .iter()
            .map(|&q| self.readout.get(q).copied().unwrap_or(Confusion::ideal()))
            .collect()
    }
}

/// Measurement operator: a Pauli word or a Z-basis projector |a><a|.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    PauliString(Vec<Pauli>),
    Projector { width: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(&self) -> CMat {
        let i = Complex64::new(0.0, 1.0);
        match self {
            Pauli::I => CMat::identity(2, 2),
            Pauli::X => CMat::from_row_slice(2, 2, &[C_ZERO, C_ONE, C_ONE, C_ZERO]),
            Pauli::Y => CMat::from_row_slice(2, 2, &[C_ZERO, -i, i, C_ZERO]),
            Pauli::Z => CMat::from_row_slice(2, 2, &[C_ONE, C_ZERO, C_ZERO, -C_ONE]),
        }
    }

    pub fn to_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Option<Pauli> {
        match c {
            'I' => Some(Pauli::I),
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }
}

impl Observable {
    pub fn pauli(word: &str) -> Option<Observable> {
        word.chars()
            .map(Pauli::from_char)
            .collect::<Option<Vec<_>>>()
            .map(Observable::PauliString)
    }

    pub fn width(&self) -> usize {
        match self {
            Observable::PauliString(ps) => ps.len(),
            Observable::Projector { width, .. } => *width,
        }
    }

    pub fn matrix(&self) -> CMat {
        match self {
            Observable::PauliString(ps) => {
                let mut m = CMat::identity(1, 1);
                for p in ps {
                    m = m.kronecker(&p.matrix());
                }
                m
            }
            Observable::Projector { width, index } => {
                let dim = 1usize << width;
                let mut m = CMat::zeros(dim, dim);
                m[(*index, *index)] = C_ONE;
                m
            }
        }
    }
}

/// Shot counts over Z-basis outcomes, indexed by bit string (qubit 0 first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsDistribution {
    pub width: usize,
    pub shots: u64,
    pub counts: Vec<u64>,
}

impl CountsDistribution {
    pub fn probabilities(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.shots as f64)
            .collect()
    }
}

/// Run a device-basis circuit from |0...0>, injecting two-qubit
/// depolarizing noise after each CX (and optionally single-qubit noise
/// after each one-qubit gate).
pub fn simulate(c: &Circuit, noise: &NoiseModel) -> Result<DensityMatrix, SimError> {
    evolve_with(c, noise, |_, _, _, _| Ok(()))
}

/// Like [`simulate`], with a hook invoked after each CX's depolarizing
/// channel. The hook receives the CX site index (counting CXs in op order),
/// the qubit pair, and the site's depolarizing level.
pub fn evolve_with<F>(c: &Circuit, noise: &NoiseModel, mut after_cx: F) -> Result<DensityMatrix, SimError>
where
    F: FnMut(&mut DensityMatrix, usize, (usize, usize), f64) -> Result<(), SimError>,
{
    noise.validate()?;
    if c.width() > MAX_SIM_WIDTH {
        return Err(SimError::WidthOverflow(c.width()));
    }
    let basis = crate::circuit::BasisSet::device_default();
    let mut rho = DensityMatrix::ground(c.width());
    let mut cx_site = 0usize;
    for (idx, op) in c.ops().iter().enumerate() {
        if !basis.contains(&op.kind) {
            return Err(SimError::NonBasisGate(op.kind.name().to_string()));
        }
        rho.apply_op(op);
        if op.kind.name() == "CX" {
            let eps = noise.epsilon_for(idx);
            rho.depolarize_pair(op.qubits[0], op.qubits[1], eps);
            after_cx(&mut rho, cx_site, (op.qubits[0], op.qubits[1]), eps)?;
            cx_site += 1;
        } else if noise.epsilon_1q > 0.0 {
            rho.depolarize_single(op.qubits[0], noise.epsilon_1q);
        }
    }
    Ok(rho)
}

/// Tr[E rho]. Real to 1e-9 for Hermitian observables.
pub fn expectation(d: &DensityMatrix, o: &Observable) -> Result<f64, SimError> {
    if o.width() != d.width() {
        return Err(SimError::DimMismatch(o.width(), d.width()));
    }
    match o {
        Observable::Projector { index, .. } => Ok(d.matrix()[(*index, *index)].re),
        Observable::PauliString(_) => {
            let e = o.matrix();
            let mut tr = C_ZERO;
            for i in 0..d.dim() {
                for k in 0..d.dim() {
                    tr += e[(i, k)] * d.matrix()[(k, i)];
                }
            }
            debug_assert!(tr.im.abs() < 1e-9, "expectation has imaginary part {tr}");
            Ok(tr.re)
        }
    }
}

/// Push a probability vector through the per-qubit confusion maps.
pub fn apply_confusion(probs: &[f64], readout: &[Confusion], width: usize) -> Vec<f64> {
    let dim = 1usize << width;
    assert_eq!(probs.len(), dim);
    let mut p = probs.to_vec();
    for (q, conf) in readout.iter().enumerate() {
        if conf.is_ideal() {
            continue;
        }
        let mask = 1usize << (width - 1 - q);
        let mut next = vec![0.0; dim];
        for (i, &v) in p.iter().enumerate() {
            let bit = (i & mask != 0) as usize;
            next[i & !mask] += conf.0[0][bit] * v;
            next[i | mask] += conf.0[1][bit] * v;
        }
        p = next;
    }
    p
}

/// Sample shot counts from the state's diagonal through the readout model.
/// Deterministic for a fixed seed.
pub fn sample_counts(
    d: &DensityMatrix,
    shots: u64,
    readout: &[Confusion],
    seed: u64,
) -> Result<CountsDistribution, SimError> {
    if shots == 0 {
        return Err(SimError::ZeroShots);
    }
    for c in readout {
        c.validate()?;
    }
    let diag = d.diagonal_probabilities()?;
    let total: f64 = diag.iter().sum();
    let normed: Vec<f64> = diag.iter().map(|p| p / total).collect();
    let observed = apply_confusion(&normed, readout, d.width());
    let counts = multinomial(&observed, shots, &mut rng::stream(seed, &[]));
    Ok(CountsDistribution {
        width: d.width(),
        shots,
        counts,
    })
}

/// Exact multinomial draw via sequential conditional binomials.
fn multinomial<R: Rng>(probs: &[f64], shots: u64, rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = shots;
    let mut mass_left: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let q = if mass_left <= 0.0 {
            0.0
        } else {
            (p / mass_left).clamp(0.0, 1.0)
        };
        let draw = Binomial::new(remaining, q).expect("valid binomial").sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass_left -= p;
    }
    counts
}

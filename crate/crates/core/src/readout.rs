//! Measurement-error mitigation through calibration matrices.
//!
//! 2^m calibration circuits prepare each Z-basis state; their measured
//! distributions form the columns of the calibration matrix M. Raw results
//! are corrected by solving a simplex-constrained least-squares problem in
//! M, which coincides with M^-1 * raw whenever that product is already a
//! valid distribution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{qubit_bit, Circuit, GateOp};
use crate::sim::CountsDistribution;

#[derive(Debug, Error, PartialEq)]
pub enum ReadoutError {
    #[error("expected {expected} calibration distributions, got {got}")]
    MissingColumn { expected: usize, got: usize },
    #[error("calibration distribution {0} has zero shots")]
    ZeroShots(usize),
    #[error("calibration distributions disagree on width")]
    WidthMismatch,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("raw vector sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("constrained least-squares failed to converge")]
    NoConvergence,
}

/// Condition number above which M is flagged ill-conditioned and corrected
/// through the pseudo-inverse instead of the constrained solve.
pub const CONDITION_LIMIT: f64 = 1e6;

/// Column-stochastic 2^m x 2^m map from true to observed distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMatrix {
    qubits: usize,
    /// Row-major entries.
    entries: Vec<f64>,
    well_conditioned: bool,
    condition_number: f64,
}

impl CalibrationMatrix {
    pub fn identity(qubits: usize) -> Self {
        let dim = 1usize << qubits;
        let m = DMatrix::<f64>::identity(dim, dim);
        Self::from_matrix(qubits, &m)
    }

    pub fn from_matrix(qubits: usize, m: &DMatrix<f64>) -> Self {
        let cond = condition_number(m);
        CalibrationMatrix {
            qubits,
            entries: m
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
            well_conditioned: cond < CONDITION_LIMIT,
            condition_number: cond,
        }
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn dim(&self) -> usize {
        1usize << self.qubits
    }

    pub fn well_conditioned(&self) -> bool {
        self.well_conditioned
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.entries)
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim() + col]
    }
}

/// The 2^m state-preparation circuits: circuit j applies X to every qubit
/// whose bit is set in j.
pub fn build_calibration_circuits(qubits: usize) -> Vec<Circuit> {
    assert!(qubits >= 1, "need at least one qubit");
    let dim = 1usize << qubits;
    (0..dim)
        .map(|j| {
            let mut ops = Vec::new();
            for q in 0..qubits {
                if qubit_bit(j, q, qubits) == 1 {
                    ops.push(GateOp::x(q));
                }
            }
            Circuit::with_ops(qubits, format!("calib-{j:0width$b}", width = qubits), ops)
                .expect("calibration circuit is well formed")
        })
        .collect()
}

/// Column j of M is the empirical outcome distribution measured after
/// preparing |j>.
pub fn estimate_calibration_matrix(
    counts: &[CountsDistribution],
) -> Result<CalibrationMatrix, ReadoutError> {
    let qubits = counts.first().map(|c| c.width).unwrap_or(0);
    let dim = 1usize << qubits;
    if counts.len() != dim {
        return Err(ReadoutError::MissingColumn {
            expected: dim,
            got: counts.len(),
        });
    }
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for (j, dist) in counts.iter().enumerate() {
        if dist.width != qubits {
            return Err(ReadoutError::WidthMismatch);
        }
        if dist.shots == 0 {
            return Err(ReadoutError::ZeroShots(j));
        }
        for (i, p) in dist.probabilities().into_iter().enumerate() {
            m[(i, j)] = p;
        }
    }
    Ok(CalibrationMatrix::from_matrix(qubits, &m))
}

/// Correction outcome: the mitigated distribution plus solve diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mitigated {
    pub probabilities: Vec<f64>,
    /// Set when M was ill-conditioned and the pseudo-inverse fallback ran.
    pub ill_conditioned: bool,
}

/// Return the distribution p minimizing ||M p - raw||_2 subject to p >= 0
/// and sum(p) = 1.
pub fn apply_mitigation(m: &CalibrationMatrix, raw: &[f64]) -> Result<Mitigated, ReadoutError> {
    let dim = m.dim();
    if raw.len() != dim {
        return Err(ReadoutError::DimMismatch(raw.len(), dim));
    }
    let total: f64 = raw.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(ReadoutError::NotNormalized(total));
    }
    let mat = m.matrix();
    let rhs = DVector::from_column_slice(raw);
    if !m.well_conditioned() {
        let pinv = mat
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .map_err(|_| ReadoutError::NoConvergence)?;
        let p = &pinv * &rhs;
        return Ok(Mitigated {
            probabilities: project_to_simplex(p.as_slice()),
            ill_conditioned: true,
        });
    }
    let p = simplex_least_squares(&mat, &rhs)?;
    Ok(Mitigated {
        probabilities: p,
        ill_conditioned: false,
    })
}

/// Active-set solver for min ||M p - r||^2 with p >= 0 and 1^T p = 1.
///
/// Solves the equality-constrained problem on the free set via its KKT
/// system, clamps the most negative coordinate when infeasible, and releases
/// clamped coordinates whose multiplier turns negative.
fn simplex_least_squares(m: &DMatrix<f64>, r: &DVector<f64>) -> Result<Vec<f64>, ReadoutError> {
    let n = m.ncols();
    let mtm = m.transpose() * m;
    let mtr = m.transpose() * r;
    let mut active = vec![false; n];

    for _round in 0..(4 * n * n + 16) {
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        if free.is_empty() {
            return Err(ReadoutError::NoConvergence);
        }
        let k = free.len();
        // KKT system: [2 MtM_FF  1; 1^T  0] [p_F; mu] = [2 MtR_F; 1]
        let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = 2.0 * mtm[(i, j)];
            }
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
            rhs[a] = 2.0 * mtr[i];
        }
        rhs[k] = 1.0;
        let sol = kkt.lu().solve(&rhs).ok_or(ReadoutError::NoConvergence)?;
        let mut p = vec![0.0; n];
        for (a, &i) in free.iter().enumerate() {
            p[i] = sol[a];
        }
        let mu = sol[k];

        // Most negative free coordinate gets clamped.
        let worst = free
            .iter()
            .copied()
            .filter(|&i| p[i] < -1e-12)
            .min_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
        if let Some(i) = worst {
            active[i] = true;
            continue;
        }

        // Dual feasibility of clamped coordinates: nu_i = 2 g_i + mu >= 0
        // with g = MtM p - MtR.
        let pv = DVector::from_column_slice(&p);
        let g = &mtm * &pv - &mtr;
        let violated = (0..n)
            .filter(|&i| active[i])
            .map(|i| (i, 2.0 * g[i] + mu))
            .filter(|&(_, nu)| nu < -1e-10)
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((i, _)) = violated {
            active[i] = false;
            continue;
        }

        for x in p.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let s: f64 = p.iter().sum();
        for x in p.iter_mut() {
            *x /= s;
        }
        return Ok(p);
    }
    Err(ReadoutError::NoConvergence)
}

/// Euclidean projection onto the probability simplex.
fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let min = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_routing_circuit, transpile, BasisSet};
    use crate::rng;
    use crate::sim::{sample_counts, simulate, Confusion, NoiseModel};
    use rand::Rng;

    #[test]
    fn calibration_circuits_prepare_basis_states() {
        let circuits = build_calibration_circuits(3);
        assert_eq!(circuits.len(), 8);
        for (j, c) in circuits.iter().enumerate() {
            let rho = simulate(c, &NoiseModel::ideal(3)).unwrap();
            assert!((rho.matrix()[(j, j)].re - 1.0).abs() < 1e-12);
        }
        let one = build_calibration_circuits(1);
        assert!(one[0].is_empty());
        assert_eq!(one[1].ops(), &[GateOp::x(0)]);
        // m=2, j=2 = |10>: X on qubit 0 only under the qubit-0-first order.
        let two = build_calibration_circuits(2);
        assert_eq!(two[2].ops(), &[GateOp::x(0)]);
        assert_eq!(two[1].ops(), &[GateOp::x(1)]);
    }

    #[test]
    fn ideal_counts_give_identity_matrix() {
        let counts: Vec<CountsDistribution> = (0..4)
            .map(|j| {
                let mut c = vec![0u64; 4];
                c[j] = 1000;
                CountsDistribution {
                    width: 2,
                    shots: 1000,
                    counts: c,
                }
            })
            .collect();
        let m = estimate_calibration_matrix(&counts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.entry(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(m.well_conditioned());
    }

    #[test]
    fn estimated_single_qubit_matrix_matches_rates() {
        let conf = [Confusion::asymmetric(0.05, 0.1)];
        let circuits = build_calibration_circuits(1);
        let counts: Vec<CountsDistribution> = circuits
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let rho = simulate(c, &NoiseModel::ideal(1)).unwrap();
                sample_counts(&rho, 100_000, &conf, 100 + j as u64).unwrap()
            })
            .collect();
        let m = estimate_calibration_matrix(&counts).unwrap();
        // 3 sigma at 1e5 shots is under 0.005 for every entry.
        assert!((m.entry(0, 0) - 0.95).abs() < 0.005);
        assert!((m.entry(1, 0) - 0.05).abs() < 0.005);
        assert!((m.entry(0, 1) - 0.10).abs() < 0.005);
        assert!((m.entry(1, 1) - 0.90).abs() < 0.005);
    }

    #[test]
    fn tensor_product_confusion_estimates_kronecker_matrix() {
        let conf = [
            Confusion::asymmetric(0.04, 0.08),
            Confusion::symmetric(0.03),
        ];
        let circuits = build_calibration_circuits(2);
        let counts: Vec<CountsDistribution> = circuits
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let rho = simulate(c, &NoiseModel::ideal(2)).unwrap();
                sample_counts(&rho, 200_000, &conf, 500 + j as u64).unwrap()
            })
            .collect();
        let m = estimate_calibration_matrix(&counts).unwrap();
        // Kronecker oracle.
        let (a, b) = (conf[0].0, conf[1].0);
        for i in 0..4usize {
            for j in 0..4usize {
                let want = a[i >> 1][j >> 1] * b[i & 1][j & 1];
                assert!(
                    (m.entry(i, j) - want).abs() < 0.006,
                    "entry ({i},{j}): {} vs {want}",
                    m.entry(i, j)
                );
            }
        }
    }

    #[test]
    fn missing_column_and_zero_shots_error() {
        let counts = vec![CountsDistribution {
            width: 1,
            shots: 10,
            counts: vec![10, 0],
        }];
        assert!(matches!(
            estimate_calibration_matrix(&counts[..1]),
            Err(ReadoutError::MissingColumn { .. })
        ));
        let zero = vec![
            CountsDistribution {
                width: 1,
                shots: 10,
                counts: vec![10, 0],
            },
            CountsDistribution {
                width: 1,
                shots: 0,
                counts: vec![0, 0],
            },
        ];
        assert!(matches!(
            estimate_calibration_matrix(&zero),
            Err(ReadoutError::ZeroShots(1))
        ));
    }

    #[test]
    fn identity_mitigation_is_noop() {
        let m = CalibrationMatrix::identity(2);
        let raw = vec![0.1, 0.2, 0.3, 0.4];
        let out = apply_mitigation(&m, &raw).unwrap();
        for (a, b) in out.probabilities.iter().zip(raw.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(!out.ill_conditioned);
    }

    #[test]
    fn forward_multiply_then_invert_recovers_exactly() {
        let m = CalibrationMatrix::from_matrix(
            1,
            &DMatrix::from_row_slice(2, 2, &[0.95, 0.10, 0.05, 0.90]),
        );
        let p = [0.7, 0.3];
        let raw = [0.95 * p[0] + 0.10 * p[1], 0.05 * p[0] + 0.90 * p[1]];
        let out = apply_mitigation(&m, &raw).unwrap();
        assert!((out.probabilities[0] - 0.7).abs() < 1e-9);
        assert!((out.probabilities[1] - 0.3).abs() < 1e-9);
    }

    /// Slow projected-gradient oracle for the constrained problem.
    fn qp_oracle(m: &DMatrix<f64>, raw: &[f64]) -> Vec<f64> {
        let n = m.ncols();
        let r = DVector::from_column_slice(raw);
        let mut p = vec![1.0 / n as f64; n];
        let step = 0.2;
        for _ in 0..200_000 {
            let pv = DVector::from_column_slice(&p);
            let grad = m.transpose() * (m * &pv - &r) * 2.0;
            let moved: Vec<f64> = p
                .iter()
                .zip(grad.iter())
                .map(|(x, g)| x - step * g)
                .collect();
            p = project_to_simplex(&moved);
        }
        p
    }

    #[test]
    fn negative_inversion_is_projected_and_optimal() {
        // Raw data engineered so that M^-1 raw has a negative entry.
        let m_mat = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let m = CalibrationMatrix::from_matrix(1, &m_mat);
        let raw = [0.97, 0.03];
        let inv = m_mat.clone().try_inverse().unwrap();
        let unconstrained = &inv * DVector::from_column_slice(&raw);
        assert!(unconstrained[1] < 0.0);
        let out = apply_mitigation(&m, &raw).unwrap();
        assert!(out.probabilities[1].abs() < 1e-12);
        assert!((out.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let oracle = qp_oracle(&m_mat, &raw);
        for (a, b) in out.probabilities.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs oracle {b}");
        }
    }

    #[test]
    fn qp_matches_oracle_on_random_instances() {
        let mut rng = rng::stream(2024, &[]);
        for case in 0..12 {
            let n = 4usize;
            // Column-stochastic M biased toward the identity.
            let mut m = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut col: Vec<f64> = (0..n)
                    .map(|i| if i == j { 4.0 } else { rng.gen::<f64>() * 0.4 })
                    .collect();
                let s: f64 = col.iter().sum();
                for (i, v) in col.drain(..).enumerate() {
                    m[(i, j)] = v / s;
                }
            }
            // Raw observation that may be inconsistent with any simplex p.
            let mut raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|x| *x /= s);
            let cal = CalibrationMatrix::from_matrix(2, &m);
            let got = apply_mitigation(&cal, &raw).unwrap();
            let want = qp_oracle(&m, &raw);
            for (a, b) in got.probabilities.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn round_trip_random_well_conditioned() {
        let mut rng = rng::stream(99, &[]);
        let mut tested = 0;
        for _ in 0..200 {
            let n = 8usize;
            let mut m = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut col: Vec<f64> = (0..n)
                    .map(|i| if i == j { 10.0 } else { rng.gen::<f64>() * 0.5 })
                    .collect();
                let s: f64 = col.iter().sum();
                for (i, v) in col.drain(..).enumerate() {
                    m[(i, j)] = v / s;
                }
            }
            if condition_number(&m) >= 100.0 {
                continue;
            }
            tested += 1;
            let mut p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            let raw = &m * DVector::from_column_slice(&p);
            let cal = CalibrationMatrix::from_matrix(3, &m);
            let out = apply_mitigation(&cal, raw.as_slice()).unwrap();
            for (a, b) in out.probabilities.iter().zip(p.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
            if tested >= 100 {
                break;
            }
        }
        assert!(tested >= 100, "only {tested} well-conditioned cases drawn");
    }

    #[test]
    fn ill_conditioned_matrix_flags_and_falls_back() {
        // Nearly singular column-stochastic matrix.
        let m_mat = DMatrix::from_row_slice(2, 2, &[0.5 + 1e-9, 0.5, 0.5 - 1e-9, 0.5]);
        let cal = CalibrationMatrix::from_matrix(1, &m_mat);
        assert!(!cal.well_conditioned());
        let out = apply_mitigation(&cal, &[0.6, 0.4]).unwrap();
        assert!(out.ill_conditioned);
        let s: f64 = out.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(out.probabilities.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn rejects_unnormalized_and_mismatched_input() {
        let m = CalibrationMatrix::identity(1);
        assert!(matches!(
            apply_mitigation(&m, &[0.5, 0.2]),
            Err(ReadoutError::NotNormalized(_))
        ));
        assert!(matches!(
            apply_mitigation(&m, &[1.0]),
            Err(ReadoutError::DimMismatch(1, 2))
        ));
    }

    #[test]
    fn mitigated_distribution_closer_than_raw_under_symmetric_error() {
        let c = transpile(&build_routing_circuit(), &BasisSet::device_default()).unwrap();
        let rho = simulate(&c, &NoiseModel::ideal(3)).unwrap();
        let conf = vec![Confusion::symmetric(0.05); 3];
        let circuits = build_calibration_circuits(3);
        let counts: Vec<CountsDistribution> = circuits
            .iter()
            .enumerate()
            .map(|(j, cc)| {
                let r = simulate(cc, &NoiseModel::ideal(3)).unwrap();
                sample_counts(&r, 100_000, &conf, 1000 + j as u64).unwrap()
            })
            .collect();
        let m = estimate_calibration_matrix(&counts).unwrap();
        let raw = sample_counts(&rho, 100_000, &conf, 77)
            .unwrap()
            .probabilities();
        let mitigated = apply_mitigation(&m, &raw).unwrap().probabilities;
        let ideal_p: Vec<f64> = (0..8).map(|i| rho.matrix()[(i, i)].re).collect();
        let dist = |a: &[f64]| -> f64 {
            a.iter()
                .zip(ideal_p.iter())
                .map(|(x, y)| (x - y).abs())
                .sum()
        };
        assert!(dist(&mitigated) < dist(&raw));
    }
}

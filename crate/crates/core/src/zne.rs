//! Zero-noise extrapolation: digital noise scaling by unitary folding and
//! extrapolation of expectation values back to the zero-noise limit.
//!
//! Local folding maps each selected gate G to G (G^dag G)^k; global folding
//! applies the same rule to the whole circuit. Scaled expectation values are
//! fitted as a function of the scale factor lambda and evaluated at
//! lambda = 0.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitError, GateOp};
use crate::rng;

#[derive(Debug, Error)]
pub enum ZneError {
    #[error("noise scale factor {0} must be >= 1")]
    BadLambda(f64),
    #[error("schedule needs at least 2 strictly increasing lambdas starting at 1, got {0:?}")]
    BadSchedule(Vec<f64>),
    #[error("lambda values must be distinct")]
    DuplicateLambda,
    #[error("{model} fit needs at least {needed} points, got {got}")]
    Underdetermined {
        model: String,
        needed: usize,
        got: usize,
    },
    #[error("normal equations are singular")]
    SingularFit,
    #[error("fewer than 2 scale points succeeded: {0} failures")]
    TooFewPoints(usize),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// Where the extra folds of a fractional scale factor land.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldingStrategy {
    LocalLeft,
    LocalRight,
    /// Seeded random gate subset; deterministic given the seed.
    LocalRandom(u64),
    Global,
}

impl FoldingStrategy {
    /// Strategy for the lambda at position `idx` of a schedule. Random
    /// folding re-draws its subset per lambda from (seed, lambda index).
    pub fn for_lambda_index(&self, idx: usize) -> FoldingStrategy {
        match self {
            FoldingStrategy::LocalRandom(seed) => {
                FoldingStrategy::LocalRandom(rng::derive_seed(*seed, &[idx as u64]))
            }
            other => *other,
        }
    }
}

/// Strictly increasing noise scale factors with lambda_1 = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    lambdas: Vec<f64>,
}

impl ScaleSchedule {
    pub fn new(lambdas: Vec<f64>) -> Result<Self, ZneError> {
        let ok = lambdas.len() >= 2
            && (lambdas[0] - 1.0).abs() < 1e-12
            && lambdas.windows(2).all(|w| w[1] > w[0])
            && lambdas.iter().all(|&l| l >= 1.0);
        if !ok {
            return Err(ZneError::BadSchedule(lambdas));
        }
        Ok(ScaleSchedule { lambdas })
    }

    /// lambda = [1, 3, 5, 7, 9, 11, 13], the standalone default.
    pub fn standalone_default() -> Self {
        ScaleSchedule::new(vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0]).unwrap()
    }

    /// lambda = [1, 3, 5, 7, 9], the concatenation default.
    pub fn concatenation_default() -> Self {
        ScaleSchedule::new(vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

/// Fold `c` so its gate count grows to about lambda times the original
/// while the overall unitary is unchanged.
///
/// Every gate is folded k = floor((lambda-1)/2) times; for the fractional
/// remainder, one extra fold goes onto a subset of gates sized so the total
/// count is round(lambda * |c|). The strategy picks the subset (left
/// prefix, right suffix, or a seeded random draw); global folding folds the
/// whole gate list and uses a suffix for the remainder.
pub fn fold_circuit(
    c: &Circuit,
    lambda: f64,
    strategy: &FoldingStrategy,
) -> Result<Circuit, ZneError> {
    if lambda < 1.0 || !lambda.is_finite() {
        return Err(ZneError::BadLambda(lambda));
    }
    let n = c.len();
    if n == 0 {
        return Ok(c.clone());
    }
    let k = ((lambda - 1.0) / 2.0).floor() as usize;
    let base = n * (2 * k + 1);
    let target = (lambda * n as f64).round() as usize;
    let extra = if target > base {
        (((target - base) as f64) / 2.0).round() as usize
    } else {
        0
    }
    .min(n);

    let ops = match strategy {
        FoldingStrategy::Global => {
            let mut ops: Vec<GateOp> = c.ops().to_vec();
            let inverse_all: Vec<GateOp> = c.ops().iter().rev().map(|g| g.inverse()).collect();
            for _ in 0..k {
                ops.extend(inverse_all.iter().cloned());
                ops.extend_from_slice(c.ops());
            }
            if extra > 0 {
                let suffix = &c.ops()[n - extra..];
                ops.extend(suffix.iter().rev().map(|g| g.inverse()));
                ops.extend_from_slice(suffix);
            }
            ops
        }
        local => {
            let chosen: Vec<bool> = match local {
                FoldingStrategy::LocalLeft => (0..n).map(|i| i < extra).collect(),
                FoldingStrategy::LocalRight => (0..n).map(|i| i >= n - extra).collect(),
                FoldingStrategy::LocalRandom(seed) => {
                    let mut flags = vec![false; n];
                    let mut r = rng::stream(*seed, &[]);
                    for i in sample(&mut r, n, extra) {
                        flags[i] = true;
                    }
                    flags
                }
                FoldingStrategy::Global => unreachable!(),
            };
            let mut ops = Vec::with_capacity(target);
            for (i, g) in c.ops().iter().enumerate() {
                let folds = k + usize::from(chosen[i]);
                ops.push(g.clone());
                for _ in 0..folds {
                    ops.push(g.inverse());
                    ops.push(g.clone());
                }
            }
            ops
        }
    };
    Ok(c.replaced_ops(ops)?)
}

/// Extrapolation model fitted to (lambda, value) points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolator {
    Linear,
    Polynomial(usize),
    /// y(lambda) = a + b * c^lambda, fitted by nonlinear least squares.
    Exponential,
}

/// Fit summary: the value at lambda = 0 plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub value: f64,
    /// Model coefficients: polynomial c0..cd, or [a, b, c] for exponential.
    pub coefficients: Vec<f64>,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    /// Set when an exponential fit failed to converge and Polynomial(2)
    /// was used instead.
    pub fallback: bool,
}

/// Least-squares fit of the model to the points, evaluated at lambda = 0.
pub fn extrapolate(points: &[(f64, f64)], x: &Extrapolator) -> Result<Extrapolation, ZneError> {
    let mut seen = points.to_vec();
    seen.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if seen.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(ZneError::DuplicateLambda);
    }
    match x {
        Extrapolator::Linear => polynomial_fit(points, 1),
        Extrapolator::Polynomial(order) => polynomial_fit(points, *order),
        Extrapolator::Exponential => match exponential_fit(points) {
            Ok(fit) => Ok(fit),
            Err(e @ ZneError::Underdetermined { .. }) => Err(e),
            Err(_) => {
                let mut fit = polynomial_fit(points, 2)?;
                fit.fallback = true;
                Ok(fit)
            }
        },
    }
}

fn polynomial_fit(points: &[(f64, f64)], order: usize) -> Result<Extrapolation, ZneError> {
    let p = order + 1;
    if points.len() < p {
        return Err(ZneError::Underdetermined {
            model: format!("polynomial({order})"),
            needed: p,
            got: points.len(),
        });
    }
    // Ordinary least squares on the monomial basis via normal equations;
    // lambda stays small (<= 13) so no rescaling is needed.
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    for &(x, y) in points {
        let mut powers = vec![1.0; 2 * order + 1];
        for i in 1..powers.len() {
            powers[i] = powers[i - 1] * x;
        }
        for i in 0..p {
            aty[i] += y * powers[i];
            for j in 0..p {
                ata[(i, j)] += powers[i + j];
            }
        }
    }
    let coeffs = ata.lu().solve(&aty).ok_or(ZneError::SingularFit)?;
    let residual = rms_residual(points, |x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * x.powi(i as i32))
            .sum()
    });
    Ok(Extrapolation {
        value: coeffs[0],
        coefficients: coeffs.iter().copied().collect(),
        residual,
        fallback: false,
    })
}

/// Variable-projection fit of y = a + b c^lambda: for each decay base c the
/// optimal (a, b) solve a 2x2 linear system; a grid plus golden-section
/// refinement locates the best c in (0, 1).
fn exponential_fit(points: &[(f64, f64)]) -> Result<Extrapolation, ZneError> {
    if points.len() < 3 {
        return Err(ZneError::Underdetermined {
            model: "exponential".into(),
            needed: 3,
            got: points.len(),
        });
    }
    let linear_part = |c: f64| -> Option<(f64, f64, f64)> {
        let n = points.len() as f64;
        let (mut sw, mut sww, mut sy, mut swy) = (0.0, 0.0, 0.0, 0.0);
        for &(x, y) in points {
            let w = c.powf(x);
            sw += w;
            sww += w * w;
            sy += y;
            swy += w * y;
        }
        let det = n * sww - sw * sw;
        if det.abs() < 1e-300 {
            return None;
        }
        let b = (n * swy - sw * sy) / det;
        let a = (sy - b * sw) / n;
        let ss: f64 = points
            .iter()
            .map(|&(x, y)| {
                let e = y - a - b * c.powf(x);
                e * e
            })
            .sum();
        Some((a, b, ss))
    };

    const LO: f64 = 1e-4;
    const HI: f64 = 0.9999;
    let grid = 600;
    let mut best = (LO, f64::INFINITY);
    for i in 0..=grid {
        let c = LO + (HI - LO) * i as f64 / grid as f64;
        if let Some((_, _, ss)) = linear_part(c) {
            if ss < best.1 {
                best = (c, ss);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(ZneError::SingularFit);
    }
    let step = (HI - LO) / grid as f64;
    let (mut lo, mut hi) = ((best.0 - step).max(LO), (best.0 + step).min(HI));
    let phi = 0.5 * (3.0 - 5.0f64.sqrt());
    for _ in 0..200 {
        let c1 = lo + phi * (hi - lo);
        let c2 = hi - phi * (hi - lo);
        let s1 = linear_part(c1).map(|t| t.2).unwrap_or(f64::INFINITY);
        let s2 = linear_part(c2).map(|t| t.2).unwrap_or(f64::INFINITY);
        if s1 < s2 {
            hi = c2;
        } else {
            lo = c1;
        }
    }
    let c = 0.5 * (lo + hi);
    let (a, b, ss) = linear_part(c).ok_or(ZneError::SingularFit)?;
    // A boundary optimum means the data does not follow a decay model
    // (unless the fit is already essentially exact); report nonconvergence
    // so the caller can fall back.
    let scale: f64 = points.iter().map(|&(_, y)| y * y).sum::<f64>().max(1e-30);
    let at_boundary = c <= LO + 2.0 * step || c >= HI - 2.0 * step;
    if at_boundary && ss / scale > 1e-16 {
        return Err(ZneError::SingularFit);
    }
    Ok(Extrapolation {
        value: a + b,
        coefficients: vec![a, b, c],
        residual: (ss / points.len() as f64).sqrt(),
        fallback: false,
    })
}

fn rms_residual<F: Fn(f64) -> f64>(points: &[(f64, f64)], f: F) -> f64 {
    let ss: f64 = points
        .iter()
        .map(|&(x, y)| {
            let e = y - f(x);
            e * e
        })
        .sum();
    (ss / points.len() as f64).sqrt()
}

/// One evaluated point of a zero-noise curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZnePoint {
    pub lambda: f64,
    pub value: f64,
    pub std_err: f64,
}

/// Scaled-noise curve with its extrapolation to lambda = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZneCurve {
    pub points: Vec<ZnePoint>,
    pub extrapolated: f64,
    pub fit_residual: f64,
    pub fit_coefficients: Vec<f64>,
    pub fit_fallback: bool,
    /// Scale factors whose execution failed, with the failure text.
    pub failures: Vec<(f64, String)>,
}

impl ZneCurve {
    /// CSV rows `lambda,expectation,stderr`, one line per point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,expectation,stderr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.lambda, p.value, p.std_err));
        }
        s
    }
}

/// Fold, execute, fit: build one scaled circuit per lambda, evaluate each
/// through the executor, and extrapolate to lambda = 0.
///
/// The executor receives the lambda index and the folded circuit and returns
/// (expectation, standard error); failures are recorded per lambda and the
/// curve aborts when fewer than two points remain.
pub fn zne_execute<F>(
    c: &Circuit,
    sched: &ScaleSchedule,
    strategy: &FoldingStrategy,
    x: &Extrapolator,
    mut executor: F,
) -> Result<ZneCurve, ZneError>
where
    F: FnMut(usize, &Circuit) -> Result<(f64, f64), String>,
{
    let curves = zne_execute_components(c, sched, strategy, x, |i, folded| {
        executor(i, folded).map(|(v, e)| (vec![v], vec![e]))
    })?;
    Ok(curves.into_iter().next().expect("one component"))
}

/// Vector-valued variant of [`zne_execute`]: each folded circuit is
/// evaluated once and every component gets its own curve and extrapolation.
pub fn zne_execute_components<F>(
    c: &Circuit,
    sched: &ScaleSchedule,
    strategy: &FoldingStrategy,
    x: &Extrapolator,
    mut executor: F,
) -> Result<Vec<ZneCurve>, ZneError>
where
    F: FnMut(usize, &Circuit) -> Result<(Vec<f64>, Vec<f64>), String>,
{
    let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut failures = Vec::new();
    for (i, &lambda) in sched.lambdas().iter().enumerate() {
        let folded = fold_circuit(c, lambda, &strategy.for_lambda_index(i))?;
        match executor(i, &folded) {
            Ok((values, std_errs)) => rows.push((lambda, values, std_errs)),
            Err(msg) => failures.push((lambda, msg)),
        }
    }
    if rows.len() < 2 {
        return Err(ZneError::TooFewPoints(failures.len()));
    }
    let dim = rows[0].1.len();
    let mut curves = Vec::with_capacity(dim);
    for d in 0..dim {
        let points: Vec<ZnePoint> = rows
            .iter()
            .map(|(lambda, values, errs)| ZnePoint {
                lambda: *lambda,
                value: values[d],
                std_err: errs[d],
            })
            .collect();
        let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.value)).collect();
        let fit = extrapolate(&pairs, x)?;
        curves.push(ZneCurve {
            points,
            extrapolated: fit.value,
            fit_residual: fit.residual,
            fit_coefficients: fit.coefficients,
            fit_fallback: fit.fallback,
            failures: failures.clone(),
        });
    }
    Ok(curves)
}

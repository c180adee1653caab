//! End-to-end benchmark drivers: configuration, the routing and QRAM
//! experiments with their four mitigation arms, persistence, and report
//! emission.
//!
//! A run builds and transpiles the benchmark circuit, estimates the readout
//! calibration matrix, evaluates every tomography setting per arm
//! (unmitigated, ZNE, PEC, ZNE over PEC), reconstructs a state per arm, and
//! reports entanglement fidelity against the noiseless reference.
//! Measurement-error mitigation is part of every arm, including the
//! mitigation methods' ancillary circuits.
//!
//! All randomness derives from the master seed and stable indices, so a run
//! reproduces bit-identically (timestamps aside) at any worker-pool size.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{
    build_qram_circuit, build_routing_circuit, transpile, BasisSet, Circuit, CircuitError, GateOp,
};
use crate::executor::{Executor, ExecutorError, SimulatorExecutor};
use crate::pec::{self, PecError, PecOutcome};
use crate::readout::{
    apply_mitigation, build_calibration_circuits, estimate_calibration_matrix, CalibrationMatrix,
    ReadoutError,
};
use crate::rng;
use crate::sim::{simulate, Confusion, DensityMatrix, NoiseModel, SimError};
use crate::tomography::{
    fidelity_report, full_weight_expectation, generate_settings, reconstruct, DataProvenance,
    FidelityReport, MeasurementSetting, TomographyData, TomographyError,
};
use crate::zne::{
    extrapolate, fold_circuit, Extrapolator, FoldingStrategy, ScaleSchedule, ZneCurve, ZneError,
    ZnePoint,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Zne(#[from] ZneError),
    #[error(transparent)]
    Pec(#[from] PecError),
    #[error(transparent)]
    Tomography(#[from] TomographyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Routing,
    Qram,
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Benchmark::Routing => write!(f, "routing"),
            Benchmark::Qram => write!(f, "qram"),
        }
    }
}

/// Mitigation arms beyond the always-present unmitigated baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Zne,
    Pec,
    ZnePec,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Zne => write!(f, "zne"),
            Arm::Pec => write!(f, "pec"),
            Arm::ZnePec => write!(f, "zne+pec"),
        }
    }
}

/// Folding choice without the random subset seed (that derives from the
/// master seed at run time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldingSpec {
    LocalLeft,
    LocalRight,
    LocalRandom,
    Global,
}

impl FoldingSpec {
    fn materialize(self, seed: u64) -> FoldingStrategy {
        match self {
            FoldingSpec::LocalLeft => FoldingStrategy::LocalLeft,
            FoldingSpec::LocalRight => FoldingStrategy::LocalRight,
            FoldingSpec::LocalRandom => FoldingStrategy::LocalRandom(seed),
            FoldingSpec::Global => FoldingStrategy::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub epsilon_cx: f64,
    pub epsilon_1q: f64,
    /// Symmetric per-qubit readout flip probability.
    pub readout_error: f64,
    /// Optional per-qubit (p(1|0), p(0|1)) pairs overriding `readout_error`.
    pub readout_per_qubit: Option<Vec<(f64, f64)>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            epsilon_cx: 0.0,
            epsilon_1q: 0.0,
            readout_error: 0.0,
            readout_per_qubit: None,
        }
    }
}

impl NoiseConfig {
    fn noise_model(&self, width: usize) -> Result<NoiseModel, ExperimentError> {
        let readout = match &self.readout_per_qubit {
            Some(pairs) => {
                if pairs.len() != width {
                    return Err(ExperimentError::InvalidConfig(format!(
                        "readout_per_qubit has {} entries for width {width}",
                        pairs.len()
                    )));
                }
                pairs
                    .iter()
                    .map(|&(p10, p01)| Confusion::asymmetric(p10, p01))
                    .collect()
            }
            None => vec![Confusion::symmetric(self.readout_error); width],
        };
        let model = NoiseModel {
            epsilon_cx: self.epsilon_cx,
            epsilon_cx_overrides: Default::default(),
            epsilon_1q: self.epsilon_1q,
            readout,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Method parameters for the mitigation arms. Defaults match the reference
/// protocol: lambda = [1,3,5,7,9,11,13] with random local folding and
/// order-2 polynomial extrapolation for standalone ZNE; lambda = [1,3,5,7,9]
/// with left local folding for the concatenation; s = 20 PEC samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MitigationParams {
    pub arms: Vec<Arm>,
    pub zne_lambdas: Vec<f64>,
    pub zne_folding: FoldingSpec,
    pub zne_extrapolator: Extrapolator,
    pub concat_lambdas: Vec<f64>,
    pub concat_folding: FoldingSpec,
    pub concat_extrapolator: Extrapolator,
    pub pec_samples: usize,
}

impl Default for MitigationParams {
    fn default() -> Self {
        MitigationParams {
            arms: vec![Arm::Zne, Arm::Pec, Arm::ZnePec],
            zne_lambdas: vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0],
            zne_folding: FoldingSpec::LocalRandom,
            zne_extrapolator: Extrapolator::Polynomial(2),
            concat_lambdas: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            concat_folding: FoldingSpec::LocalLeft,
            concat_extrapolator: Extrapolator::Polynomial(2),
            pec_samples: 20,
        }
    }
}

/// Full experiment description; serializes as the config file and is echoed
/// into every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    /// State preparation for QRAM memory cell D0, one gate per line in the
    /// circuit text format (empty means |0>).
    pub d0_prep: Vec<String>,
    pub noise: NoiseConfig,
    /// Shots per circuit execution (the paper's A).
    pub shots: u64,
    /// Use exact expectation values instead of sampled shots.
    pub exact: bool,
    pub mitigation: MitigationParams,
    pub seed: u64,
    /// Result file path used by the CLI.
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: Benchmark::Routing,
            d0_prep: Vec::new(),
            noise: NoiseConfig::default(),
            shots: 100_000,
            exact: false,
            mitigation: MitigationParams::default(),
            seed: 0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !self.exact && self.shots == 0 {
            return Err(ExperimentError::InvalidConfig("shots must be >= 1".into()));
        }
        if self.mitigation.pec_samples == 0 {
            return Err(ExperimentError::InvalidConfig(
                "pec_samples must be >= 1".into(),
            ));
        }
        ScaleSchedule::new(self.mitigation.zne_lambdas.clone())
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        ScaleSchedule::new(self.mitigation.concat_lambdas.clone())
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        if self.benchmark == Benchmark::Routing && !self.d0_prep.is_empty() {
            return Err(ExperimentError::InvalidConfig(
                "d0_prep only applies to the qram benchmark".into(),
            ));
        }
        Ok(())
    }

    fn d0_prep_ops(&self) -> Result<Vec<GateOp>, ExperimentError> {
        let text = self.d0_prep.join("\n");
        let c = Circuit::from_text(&text, Some(1), "d0")?;
        Ok(c.ops().to_vec())
    }
}

/// Calibration matrix with the shot budget it was estimated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub matrix: CalibrationMatrix,
    pub shots_per_circuit: u64,
    pub exact: bool,
}

/// ZNE data for one tomography setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZneSettingRecord {
    /// Per-outcome probability curves (2^m of them).
    pub outcome_curves: Vec<ZneCurve>,
    /// Curve of the setting's full-weight Pauli expectation; this is what
    /// the CSV export plots.
    pub setting_curve: ZneCurve,
    /// Raw extrapolated probabilities (may leave [0, 1]; clipped at
    /// tomography entry).
    pub mitigated: Vec<f64>,
}

/// PEC data for one tomography setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PecSettingRecord {
    /// Sampled outcome; in exact mode the full-expansion estimate with no
    /// sample records.
    pub outcome: PecOutcome,
    pub full_expansion: bool,
}

/// Concatenated ZNE-over-PEC data for one tomography setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatSettingRecord {
    pub lambdas: Vec<f64>,
    pub per_lambda: Vec<PecOutcome>,
    pub setting_curve: ZneCurve,
    pub mitigated: Vec<f64>,
    pub full_expansion: bool,
}

/// Everything measured for one tomography setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRecord {
    pub basis: String,
    /// Probabilities as measured, before readout mitigation.
    pub raw: Vec<f64>,
    /// Readout-mitigated probabilities (the unmitigated arm's input).
    pub unmitigated: Vec<f64>,
    pub zne: Option<ZneSettingRecord>,
    pub pec: Option<PecSettingRecord>,
    pub zne_pec: Option<ConcatSettingRecord>,
}

/// Fidelity of one arm's reconstructed state against the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFidelity {
    pub arm: String,
    pub report: FidelityReport,
    pub clip_events: usize,
}

/// The persisted experiment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationResult {
    pub benchmark: String,
    pub config: ExperimentConfig,
    pub timestamp_unix_ms: u128,
    pub measured_qubits: Vec<usize>,
    pub transpiled_circuit: String,
    pub calibration: Option<CalibrationRecord>,
    pub settings: Vec<SettingRecord>,
    pub fidelities: Vec<ArmFidelity>,
}

impl MitigationResult {
    pub fn fidelity_of(&self, arm: &str) -> Option<f64> {
        self.fidelities
            .iter()
            .find(|f| f.arm == arm)
            .map(|f| f.report.fidelity)
    }

    /// Equality modulo the timestamp, for reproducibility checks.
    pub fn reproduces(&self, other: &MitigationResult) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.timestamp_unix_ms = 0;
        b.timestamp_unix_ms = 0;
        let ja = serde_json::to_string(&a).expect("serializable");
        let jb = serde_json::to_string(&b).expect("serializable");
        ja == jb
    }
}

/// Run the quantum-routing benchmark.
pub fn run_routing(cfg: &ExperimentConfig) -> Result<MitigationResult, ExperimentError> {
    if cfg.benchmark != Benchmark::Routing {
        return Err(ExperimentError::InvalidConfig(
            "config benchmark is not `routing`".into(),
        ));
    }
    run_benchmark(cfg, build_routing_circuit(), (0..3).collect())
}

/// Run the bucket-brigade QRAM benchmark; tomography covers only the
/// (address, output) pair, everything else is traced out.
pub fn run_qram(cfg: &ExperimentConfig) -> Result<MitigationResult, ExperimentError> {
    if cfg.benchmark != Benchmark::Qram {
        return Err(ExperimentError::InvalidConfig(
            "config benchmark is not `qram`".into(),
        ));
    }
    let circuit = build_qram_circuit(&cfg.d0_prep_ops()?)?;
    run_benchmark(cfg, circuit, vec![0, 5])
}

/// Dispatch on the configured benchmark.
pub fn run(cfg: &ExperimentConfig) -> Result<MitigationResult, ExperimentError> {
    match cfg.benchmark {
        Benchmark::Routing => run_routing(cfg),
        Benchmark::Qram => run_qram(cfg),
    }
}

// Seed-path tags for the derived RNG streams.
const TAG_CALIBRATION: u64 = 0;
const TAG_UNMITIGATED: u64 = 1;
const TAG_ZNE: u64 = 2;
const TAG_PEC: u64 = 3;
const TAG_CONCAT: u64 = 4;

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    exec: SimulatorExecutor,
    calibration: CalibrationMatrix,
    measured: Vec<usize>,
}

impl RunContext<'_> {
    /// Measure a circuit and apply readout mitigation: raw and mitigated
    /// probability vectors plus per-outcome standard errors.
    fn measure(
        &self,
        c: &Circuit,
        seed_path: &[u64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ExperimentError> {
        let raw = if self.cfg.exact {
            self.exec.exact_probabilities(c)?
        } else {
            let seed = rng::derive_seed(self.cfg.seed, seed_path);
            self.exec.counts(c, self.cfg.shots, seed)?.probabilities()
        };
        let mitigated = apply_mitigation(&self.calibration, &raw)?.probabilities;
        let std_errs = if self.cfg.exact {
            vec![0.0; mitigated.len()]
        } else {
            mitigated
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * (1.0 - p.clamp(0.0, 1.0)) / self.cfg.shots as f64).sqrt())
                .collect()
        };
        Ok((raw, mitigated, std_errs))
    }
}

fn run_benchmark(
    cfg: &ExperimentConfig,
    logical: Circuit,
    measured: Vec<usize>,
) -> Result<MitigationResult, ExperimentError> {
    cfg.validate()?;
    let transpiled = transpile(&logical, &BasisSet::device_default())?;
    let noise = cfg.noise.noise_model(transpiled.width())?;
    let exec = SimulatorExecutor::with_measured_qubits(noise.clone(), measured.clone());

    // Noiseless reference state on the measured qubits.
    let reference = simulate(&transpiled, &NoiseModel::ideal(transpiled.width()))?
        .reduce_to(&measured)?;

    let (calibration, cal_record) = calibrate(cfg, &noise, &measured)?;
    let ctx = RunContext {
        cfg,
        exec,
        calibration,
        measured: measured.clone(),
    };

    let settings = generate_settings(measured.len());
    let records: Vec<SettingRecord> = settings
        .par_iter()
        .enumerate()
        .map(|(idx, setting)| evaluate_setting(&ctx, &transpiled, setting, idx as u64))
        .collect::<Result<_, _>>()?;

    let fidelities = arm_fidelities(cfg, &reference, &records, measured.len())?;

    Ok(MitigationResult {
        benchmark: cfg.benchmark.to_string(),
        config: cfg.clone(),
        timestamp_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        measured_qubits: measured,
        transpiled_circuit: transpiled.to_text(),
        calibration: Some(cal_record),
        settings: records,
        fidelities,
    })
}

/// Estimate the calibration matrix from the 2^m basis-preparation circuits,
/// executed through the same backend and readout model as the experiment.
fn calibrate(
    cfg: &ExperimentConfig,
    noise: &NoiseModel,
    measured: &[usize],
) -> Result<(CalibrationMatrix, CalibrationRecord), ExperimentError> {
    let m = measured.len();
    let cal_noise = NoiseModel {
        epsilon_cx: noise.epsilon_cx,
        epsilon_cx_overrides: Default::default(),
        epsilon_1q: noise.epsilon_1q,
        readout: noise.readout_for(measured),
    };
    let exec = SimulatorExecutor::new(cal_noise);
    let circuits = build_calibration_circuits(m);
    let matrix = if cfg.exact {
        let dim = 1usize << m;
        let mut cols = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for (j, c) in circuits.iter().enumerate() {
            for (i, p) in exec.exact_probabilities(c)?.into_iter().enumerate() {
                cols[(i, j)] = p;
            }
        }
        CalibrationMatrix::from_matrix(m, &cols)
    } else {
        let counts: Vec<_> = circuits
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let seed = rng::derive_seed(cfg.seed, &[TAG_CALIBRATION, j as u64]);
                exec.counts(c, cfg.shots, seed)
            })
            .collect::<Result<_, _>>()?;
        estimate_calibration_matrix(&counts)?
    };
    let record = CalibrationRecord {
        matrix: matrix.clone(),
        shots_per_circuit: cfg.shots,
        exact: cfg.exact,
    };
    Ok((matrix, record))
}

/// Basis-change ops for a setting, remapped onto the measured qubits of the
/// full-width circuit.
fn setting_circuit(
    base: &Circuit,
    setting: &MeasurementSetting,
    measured: &[usize],
) -> Result<Circuit, CircuitError> {
    let ops: Vec<GateOp> = setting
        .basis_change_ops()
        .into_iter()
        .map(|op| GateOp {
            kind: op.kind,
            qubits: op.qubits.iter().map(|&q| measured[q]).collect(),
            inverted: op.inverted,
        })
        .collect();
    base.extended(&ops)
}

fn evaluate_setting(
    ctx: &RunContext<'_>,
    transpiled: &Circuit,
    setting: &MeasurementSetting,
    setting_idx: u64,
) -> Result<SettingRecord, ExperimentError> {
    let cfg = ctx.cfg;
    let m = ctx.measured.len();
    let circuit = setting_circuit(transpiled, setting, &ctx.measured)?;

    let (raw, unmitigated, _) = ctx.measure(&circuit, &[TAG_UNMITIGATED, setting_idx])?;

    let mut record = SettingRecord {
        basis: setting.word(),
        raw,
        unmitigated,
        zne: None,
        pec: None,
        zne_pec: None,
    };

    for arm in &cfg.mitigation.arms {
        match arm {
            Arm::Zne => {
                record.zne = Some(zne_arm(ctx, &circuit, setting_idx, m)?);
            }
            Arm::Pec => {
                record.pec = Some(pec_arm(ctx, &circuit, setting_idx)?);
            }
            Arm::ZnePec => {
                record.zne_pec = Some(concat_arm(ctx, &circuit, setting_idx, m)?);
            }
        }
    }
    Ok(record)
}

fn zne_arm(
    ctx: &RunContext<'_>,
    circuit: &Circuit,
    setting_idx: u64,
    m: usize,
) -> Result<ZneSettingRecord, ExperimentError> {
    let cfg = ctx.cfg;
    let sched = ScaleSchedule::new(cfg.mitigation.zne_lambdas.clone())?;
    let strategy = cfg
        .mitigation
        .zne_folding
        .materialize(rng::derive_seed(cfg.seed, &[TAG_ZNE, setting_idx, u64::MAX]));
    let mut per_lambda: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, &lambda) in sched.lambdas().iter().enumerate() {
        let folded = fold_circuit(circuit, lambda, &strategy.for_lambda_index(i))?;
        let (_, mitigated, std_errs) =
            ctx.measure(&folded, &[TAG_ZNE, setting_idx, i as u64])?;
        per_lambda.push((mitigated, std_errs));
    }
    let dim = 1usize << m;
    let mut outcome_curves = Vec::with_capacity(dim);
    let mut mitigated = Vec::with_capacity(dim);
    for o in 0..dim {
        let points: Vec<ZnePoint> = sched
            .lambdas()
            .iter()
            .zip(&per_lambda)
            .map(|(&lambda, (probs, errs))| ZnePoint {
                lambda,
                value: probs[o],
                std_err: errs[o],
            })
            .collect();
        let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.value)).collect();
        let fit = extrapolate(&pairs, &cfg.mitigation.zne_extrapolator)?;
        mitigated.push(fit.value);
        outcome_curves.push(ZneCurve {
            points,
            extrapolated: fit.value,
            fit_residual: fit.residual,
            fit_coefficients: fit.coefficients,
            fit_fallback: fit.fallback,
            failures: vec![],
        });
    }
    let setting_curve = full_weight_curve(
        sched.lambdas(),
        per_lambda.iter().map(|(p, _)| p.as_slice()),
        m,
        cfg,
        &cfg.mitigation.zne_extrapolator,
    )?;
    Ok(ZneSettingRecord {
        outcome_curves,
        setting_curve,
        mitigated,
    })
}

/// Curve of the setting's full-weight Pauli expectation across lambdas.
fn full_weight_curve<'a>(
    lambdas: &[f64],
    per_lambda: impl Iterator<Item = &'a [f64]>,
    m: usize,
    cfg: &ExperimentConfig,
    x: &Extrapolator,
) -> Result<ZneCurve, ExperimentError> {
    let points: Vec<ZnePoint> = lambdas
        .iter()
        .zip(per_lambda)
        .map(|(&lambda, probs)| {
            let value = full_weight_expectation(probs, m);
            let std_err = if cfg.exact {
                0.0
            } else {
                ((1.0 - (value * value).min(1.0)) / cfg.shots as f64).sqrt()
            };
            ZnePoint {
                lambda,
                value,
                std_err,
            }
        })
        .collect();
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.value)).collect();
    let fit = extrapolate(&pairs, x)?;
    Ok(ZneCurve {
        points,
        extrapolated: fit.value,
        fit_residual: fit.residual,
        fit_coefficients: fit.coefficients,
        fit_fallback: fit.fallback,
        failures: vec![],
    })
}

fn pec_arm(
    ctx: &RunContext<'_>,
    circuit: &Circuit,
    setting_idx: u64,
) -> Result<PecSettingRecord, ExperimentError> {
    let cfg = ctx.cfg;
    if cfg.exact {
        let estimate = exact_pec_mitigated(ctx, circuit)?;
        let gamma = pec::gamma_total(&pec::reps_for_circuit(circuit, ctx.exec.noise())?);
        return Ok(PecSettingRecord {
            outcome: PecOutcome {
                gamma_total: gamma,
                samples: vec![],
                std_err: vec![0.0; estimate.len()],
                estimate,
                failures: vec![],
            },
            full_expansion: true,
        });
    }
    let seed = rng::derive_seed(cfg.seed, &[TAG_PEC, setting_idx]);
    let outcome = pec::pec_execute(
        circuit,
        ctx.exec.noise(),
        cfg.mitigation.pec_samples,
        seed,
        |j, sc| {
            ctx.measure(&sc.circuit, &[TAG_PEC, setting_idx, j as u64])
                .map(|(_, mitigated, _)| mitigated)
                .map_err(|e| e.to_string())
        },
    )?;
    Ok(PecSettingRecord {
        outcome,
        full_expansion: false,
    })
}

/// Exact full-expansion PEC probabilities, readout-mitigated like every
/// other result.
fn exact_pec_mitigated(
    ctx: &RunContext<'_>,
    circuit: &Circuit,
) -> Result<Vec<f64>, ExperimentError> {
    let probs = ctx.exec.exact_pec_probabilities(circuit)?;
    Ok(apply_mitigation(&ctx.calibration, &probs)?.probabilities)
}

fn concat_arm(
    ctx: &RunContext<'_>,
    circuit: &Circuit,
    setting_idx: u64,
    m: usize,
) -> Result<ConcatSettingRecord, ExperimentError> {
    let cfg = ctx.cfg;
    let sched = ScaleSchedule::new(cfg.mitigation.concat_lambdas.clone())?;
    let strategy = cfg.mitigation.concat_folding.materialize(rng::derive_seed(
        cfg.seed,
        &[TAG_CONCAT, setting_idx, u64::MAX],
    ));
    let dim = 1usize << m;

    let per_lambda: Vec<PecOutcome> = if cfg.exact {
        let mut out = Vec::new();
        for (i, &lambda) in sched.lambdas().iter().enumerate() {
            let folded = fold_circuit(circuit, lambda, &strategy.for_lambda_index(i))?;
            let estimate = exact_pec_mitigated(ctx, &folded)?;
            let gamma = pec::gamma_total(&pec::reps_for_circuit(&folded, ctx.exec.noise())?);
            out.push(PecOutcome {
                gamma_total: gamma,
                samples: vec![],
                std_err: vec![0.0; estimate.len()],
                estimate,
                failures: vec![],
            });
        }
        out
    } else {
        let outcome = pec::zne_pec_concatenate(
            circuit,
            &sched,
            &strategy,
            &cfg.mitigation.concat_extrapolator,
            ctx.exec.noise(),
            cfg.mitigation.pec_samples,
            rng::derive_seed(cfg.seed, &[TAG_CONCAT, setting_idx]),
            |lam, j, sc| {
                ctx.measure(&sc.circuit, &[TAG_CONCAT, setting_idx, lam as u64, j as u64])
                    .map(|(_, mitigated, _)| mitigated)
                    .map_err(|e| e.to_string())
            },
        )?;
        outcome.per_lambda
    };

    let mut mitigated = Vec::with_capacity(dim);
    for o in 0..dim {
        let pairs: Vec<(f64, f64)> = sched
            .lambdas()
            .iter()
            .zip(&per_lambda)
            .map(|(&l, pl)| (l, pl.estimate[o]))
            .collect();
        let fit = extrapolate(&pairs, &cfg.mitigation.concat_extrapolator)?;
        mitigated.push(fit.value);
    }
    let setting_curve = full_weight_curve(
        sched.lambdas(),
        per_lambda.iter().map(|pl| pl.estimate.as_slice()),
        m,
        cfg,
        &cfg.mitigation.concat_extrapolator,
    )?;
    Ok(ConcatSettingRecord {
        lambdas: sched.lambdas().to_vec(),
        per_lambda,
        setting_curve,
        mitigated,
        full_expansion: cfg.exact,
    })
}

fn arm_fidelities(
    cfg: &ExperimentConfig,
    reference: &DensityMatrix,
    records: &[SettingRecord],
    m: usize,
) -> Result<Vec<ArmFidelity>, ExperimentError> {
    let mut out = Vec::new();
    let mut arms: Vec<(String, DataProvenance, Box<dyn Fn(&SettingRecord) -> Option<Vec<f64>>>)> = vec![(
        "unmitigated".to_string(),
        DataProvenance::ReadoutMitigated,
        Box::new(|r: &SettingRecord| Some(r.unmitigated.clone())),
    )];
    for arm in &cfg.mitigation.arms {
        let (prov, f): (DataProvenance, Box<dyn Fn(&SettingRecord) -> Option<Vec<f64>>>) =
            match arm {
                Arm::Zne => (
                    DataProvenance::Zne,
                    Box::new(|r: &SettingRecord| r.zne.as_ref().map(|z| z.mitigated.clone())),
                ),
                Arm::Pec => (
                    DataProvenance::Pec,
                    Box::new(|r: &SettingRecord| r.pec.as_ref().map(|p| p.outcome.estimate.clone())),
                ),
                Arm::ZnePec => (
                    DataProvenance::ZnePec,
                    Box::new(|r: &SettingRecord| r.zne_pec.as_ref().map(|z| z.mitigated.clone())),
                ),
            };
        arms.push((arm.to_string(), prov, f));
    }

    for (name, provenance, extract) in arms {
        let entries: Option<Vec<(String, Vec<f64>)>> = records
            .iter()
            .map(|r| extract(r).map(|p| (r.basis.clone(), p)))
            .collect();
        let Some(entries) = entries else { continue };
        let data = TomographyData::new(m, provenance, entries)?;
        let clip_events = data.clip_events().len();
        let (recon, diag) = reconstruct(&data)?;
        let report = fidelity_report("noiseless", reference, &recon, Some(diag))?;
        out.push(ArmFidelity {
            arm: name,
            report,
            clip_events,
        });
    }
    Ok(out)
}

/// Report format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Write the result to disk: the full JSON record, or CSV files (one per
/// ZNE curve plus a fidelity summary).
pub fn emit_report(
    result: &MitigationResult,
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let path = dir.join(format!("{}_result.json", result.benchmark));
            fs::write(&path, serde_json::to_string_pretty(result)?)?;
            written.push(path);
        }
        ReportFormat::Csv => {
            for record in &result.settings {
                if let Some(zne) = &record.zne {
                    let path = dir.join(format!(
                        "zne_curve_{}_{}.csv",
                        result.benchmark, record.basis
                    ));
                    fs::write(&path, zne.setting_curve.to_csv())?;
                    written.push(path);
                }
                if let Some(concat) = &record.zne_pec {
                    let path = dir.join(format!(
                        "zne_pec_curve_{}_{}.csv",
                        result.benchmark, record.basis
                    ));
                    fs::write(&path, concat.setting_curve.to_csv())?;
                    written.push(path);
                }
            }
            let mut summary = String::from("arm,fidelity,negative_mass_removed,clip_events\n");
            for f in &result.fidelities {
                summary.push_str(&format!(
                    "{},{},{},{}\n",
                    f.arm, f.report.fidelity, f.report.negative_mass_removed, f.clip_events
                ));
            }
            let path = dir.join(format!("{}_fidelity_summary.csv", result.benchmark));
            fs::write(&path, summary)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Parse a result file back; the round trip is exact.
pub fn load_result(path: &Path) -> Result<MitigationResult, ExperimentError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_cfg(benchmark: Benchmark, eps: f64, arms: Vec<Arm>) -> ExperimentConfig {
        ExperimentConfig {
            benchmark,
            exact: true,
            noise: NoiseConfig {
                epsilon_cx: eps,
                ..Default::default()
            },
            mitigation: MitigationParams {
                arms,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_routing_exact_run_has_unit_fidelity() {
        let cfg = exact_cfg(Benchmark::Routing, 0.0, vec![]);
        let result = run_routing(&cfg).unwrap();
        assert_eq!(result.settings.len(), 27);
        let f = result.fidelity_of("unmitigated").unwrap();
        assert!((f - 1.0).abs() < 1e-9, "F = {f}");
    }

    #[test]
    fn noiseless_qram_exact_run_has_unit_fidelity() {
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Qram,
            ..exact_cfg(Benchmark::Routing, 0.0, vec![])
        };
        let result = run_qram(&cfg).unwrap();
        assert_eq!(result.settings.len(), 9);
        assert_eq!(result.measured_qubits, vec![0, 5]);
        let f = result.fidelity_of("unmitigated").unwrap();
        assert!((f - 1.0).abs() < 1e-9, "F = {f}");
    }

    #[test]
    fn qram_with_x_prep_yields_product_target() {
        let mut cfg = ExperimentConfig {
            benchmark: Benchmark::Qram,
            ..exact_cfg(Benchmark::Routing, 0.0, vec![])
        };
        cfg.d0_prep = vec!["X 0".to_string()];
        let result = run_qram(&cfg).unwrap();
        let f = result.fidelity_of("unmitigated").unwrap();
        assert!((f - 1.0).abs() < 1e-9, "F = {f}");
    }

    #[test]
    fn exact_noisy_run_orders_arms() {
        let cfg = exact_cfg(
            Benchmark::Routing,
            0.02,
            vec![Arm::Zne, Arm::Pec, Arm::ZnePec],
        );
        let result = run_routing(&cfg).unwrap();
        let f_none = result.fidelity_of("unmitigated").unwrap();
        let f_zne = result.fidelity_of("zne").unwrap();
        let f_pec = result.fidelity_of("pec").unwrap();
        let f_concat = result.fidelity_of("zne+pec").unwrap();
        assert!(f_none < f_zne, "{f_none} vs zne {f_zne}");
        assert!(f_none < f_pec, "{f_none} vs pec {f_pec}");
        assert!(f_concat >= 0.99, "zne+pec {f_concat}");
        // Exact-path PEC is the full expansion and cancels matched noise.
        assert!((f_pec - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shots_run_is_reproducible_across_pool_sizes() {
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Routing,
            shots: 2000,
            noise: NoiseConfig {
                epsilon_cx: 0.02,
                readout_error: 0.03,
                ..Default::default()
            },
            mitigation: MitigationParams {
                arms: vec![Arm::Zne],
                zne_lambdas: vec![1.0, 3.0, 5.0],
                ..Default::default()
            },
            seed: 21,
            ..Default::default()
        };
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let r1 = pool1.install(|| run_routing(&cfg)).unwrap();
        let r4 = pool4.install(|| run_routing(&cfg)).unwrap();
        assert!(r1.reproduces(&r4));
        let r1b = pool1.install(|| run_routing(&cfg)).unwrap();
        assert!(r1.reproduces(&r1b));
    }

    #[test]
    fn unmitigated_arm_runs_with_no_mitigation_modules() {
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Routing,
            shots: 1000,
            noise: NoiseConfig {
                epsilon_cx: 0.05,
                ..Default::default()
            },
            mitigation: MitigationParams {
                arms: vec![],
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        };
        let result = run_routing(&cfg).unwrap();
        assert_eq!(result.fidelities.len(), 1);
        assert_eq!(result.fidelities[0].arm, "unmitigated");
        assert!(result.settings.iter().all(|s| s.zne.is_none()
            && s.pec.is_none()
            && s.zne_pec.is_none()));
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.shots = 0;
        assert!(matches!(
            run_routing(&cfg),
            Err(ExperimentError::InvalidConfig(_))
        ));
        let mut cfg = ExperimentConfig::default();
        cfg.d0_prep = vec!["X 0".into()];
        assert!(matches!(
            run_routing(&cfg),
            Err(ExperimentError::InvalidConfig(_))
        ));
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Qram,
            ..Default::default()
        };
        assert!(matches!(
            run_routing(&cfg),
            Err(ExperimentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn result_json_round_trip_and_reports() {
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Routing,
            exact: true,
            noise: NoiseConfig {
                epsilon_cx: 0.02,
                ..Default::default()
            },
            mitigation: MitigationParams {
                arms: vec![Arm::Zne],
                zne_lambdas: vec![1.0, 3.0, 5.0],
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        };
        let result = run_routing(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json_files = emit_report(&result, ReportFormat::Json, dir.path()).unwrap();
        assert_eq!(json_files.len(), 1);
        let loaded = load_result(&json_files[0]).unwrap();
        assert_eq!(loaded, result);

        let csv_files = emit_report(&result, ReportFormat::Csv, dir.path()).unwrap();
        // 27 ZNE setting curves plus the fidelity summary.
        assert_eq!(csv_files.len(), 28);
        let summary = std::fs::read_to_string(
            dir.path().join("routing_fidelity_summary.csv"),
        )
        .unwrap();
        assert!(summary.lines().count() >= 3); // header + unmitigated + zne
        assert!(summary.contains("unmitigated,"));
        assert!(summary.contains("zne,"));
    }

    #[test]
    fn summary_only_for_empty_mitigation() {
        let cfg = ExperimentConfig {
            benchmark: Benchmark::Routing,
            exact: true,
            mitigation: MitigationParams {
                arms: vec![],
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        };
        let result = run_routing(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&result, ReportFormat::Csv, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let summary = std::fs::read_to_string(&files[0]).unwrap();
        let rows: Vec<&str> = summary.lines().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].starts_with("unmitigated,"));
    }
}

//! `qem`: run the error-mitigated routing / QRAM benchmarks, estimate
//! readout calibration matrices, and export result reports.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qem_core::experiment::{
    emit_report, load_result, run_qram, run_routing, Arm, Benchmark, ExperimentConfig,
    FoldingSpec, MitigationParams, ReportFormat,
};
use qem_core::readout::{build_calibration_circuits, estimate_calibration_matrix};
use qem_core::sim::{Confusion, NoiseModel};
use qem_core::zne::Extrapolator;
use qem_core::{Executor, SimulatorExecutor};

#[derive(Parser)]
#[command(name = "qem", about = "Quantum error mitigation benchmarks on a density-matrix simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the 3-qubit quantum-routing benchmark.
    RunRouting(RunArgs),
    /// Run the 6-qubit bucket-brigade QRAM benchmark.
    RunQram(RunArgs),
    /// Estimate a readout calibration matrix from basis-state circuits.
    Calibrate(CalibrateArgs),
    /// Re-emit reports (JSON or CSV) from a stored result file.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: u64,
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Result JSON path (defaults to <benchmark>_result.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also emit CSV reports into this directory.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Shots per circuit execution.
    #[arg(long)]
    shots: Option<u64>,
    /// Use exact expectation values instead of sampled shots.
    #[arg(long)]
    exact: bool,
    /// Per-CX depolarizing level.
    #[arg(long)]
    epsilon_cx: Option<f64>,
    /// Per-single-qubit-gate depolarizing level.
    #[arg(long)]
    epsilon_1q: Option<f64>,
    /// Symmetric readout flip probability per qubit.
    #[arg(long)]
    readout_error: Option<f64>,
    /// Comma-separated mitigation arms: zne, pec, zne+pec (empty string for
    /// the unmitigated baseline only).
    #[arg(long)]
    arms: Option<String>,
    /// Comma-separated ZNE scale factors.
    #[arg(long)]
    zne_lambdas: Option<String>,
    /// ZNE folding: local_left, local_right, local_random, global.
    #[arg(long)]
    zne_folding: Option<String>,
    /// Extrapolator: linear, polyN, exponential.
    #[arg(long)]
    zne_extrapolator: Option<String>,
    /// Comma-separated concatenation scale factors.
    #[arg(long)]
    concat_lambdas: Option<String>,
    /// Concatenation folding strategy.
    #[arg(long)]
    concat_folding: Option<String>,
    /// PEC sample count s.
    #[arg(long)]
    pec_samples: Option<usize>,
    /// QRAM cell-D0 preparation gates, semicolon-separated text-format
    /// lines, e.g. "X 0" or "H 0; T 0".
    #[arg(long)]
    d0_prep: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Number of measured qubits (2^m calibration circuits).
    #[arg(long)]
    qubits: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    shots: u64,
    /// Symmetric readout flip probability per qubit.
    #[arg(long, default_value_t = 0.0)]
    readout_error: f64,
    /// Output JSON path for the estimated matrix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored result JSON.
    #[arg(long)]
    input: PathBuf,
    /// Directory for the emitted files.
    #[arg(long)]
    out_dir: PathBuf,
    /// json or csv.
    #[arg(long, default_value = "csv")]
    format: String,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::RunRouting(args) => run_benchmark(Benchmark::Routing, args),
        Command::RunQram(args) => run_benchmark(Benchmark::Qram, args),
        Command::Calibrate(args) => calibrate(args),
        Command::Report(args) => report(args),
    }
}

fn run_benchmark(benchmark: Benchmark, args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.benchmark = benchmark;
    cfg.seed = args.seed;
    if let Some(shots) = args.shots {
        cfg.shots = shots;
    }
    if args.exact {
        cfg.exact = true;
    }
    if let Some(e) = args.epsilon_cx {
        cfg.noise.epsilon_cx = e;
    }
    if let Some(e) = args.epsilon_1q {
        cfg.noise.epsilon_1q = e;
    }
    if let Some(p) = args.readout_error {
        cfg.noise.readout_error = p;
    }
    apply_mitigation_flags(&mut cfg.mitigation, &args)?;
    if let Some(prep) = &args.d0_prep {
        cfg.d0_prep = prep
            .split(';')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.display().to_string());
    }

    let result = match benchmark {
        Benchmark::Routing => run_routing(&cfg)?,
        Benchmark::Qram => run_qram(&cfg)?,
    };

    let out_path = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{benchmark}_result.json")));
    std::fs::write(&out_path, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("writing {}", out_path.display()))?;
    println!("result written to {}", out_path.display());
    for f in &result.fidelities {
        println!("  {:<12} F = {:.6}", f.arm, f.report.fidelity);
    }
    if let Some(dir) = args.report_dir {
        let files = emit_report(&result, ReportFormat::Csv, &dir)?;
        println!("{} CSV files in {}", files.len(), dir.display());
    }
    Ok(())
}

fn apply_mitigation_flags(m: &mut MitigationParams, args: &RunArgs) -> Result<()> {
    if let Some(arms) = &args.arms {
        m.arms = arms
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_arm)
            .collect::<Result<_>>()?;
    }
    if let Some(l) = &args.zne_lambdas {
        m.zne_lambdas = parse_lambdas(l)?;
    }
    if let Some(f) = &args.zne_folding {
        m.zne_folding = parse_folding(f)?;
    }
    if let Some(x) = &args.zne_extrapolator {
        m.zne_extrapolator = parse_extrapolator(x)?;
    }
    if let Some(l) = &args.concat_lambdas {
        m.concat_lambdas = parse_lambdas(l)?;
    }
    if let Some(f) = &args.concat_folding {
        m.concat_folding = parse_folding(f)?;
    }
    if let Some(s) = args.pec_samples {
        m.pec_samples = s;
    }
    Ok(())
}

fn parse_arm(s: &str) -> Result<Arm> {
    Ok(match s {
        "zne" => Arm::Zne,
        "pec" => Arm::Pec,
        "zne+pec" | "zne_pec" => Arm::ZnePec,
        other => bail!("unknown arm `{other}` (expected zne, pec, zne+pec)"),
    })
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().context("bad lambda value"))
        .collect()
}

fn parse_folding(s: &str) -> Result<FoldingSpec> {
    Ok(match s {
        "local_left" => FoldingSpec::LocalLeft,
        "local_right" => FoldingSpec::LocalRight,
        "local_random" => FoldingSpec::LocalRandom,
        "global" => FoldingSpec::Global,
        other => bail!("unknown folding strategy `{other}`"),
    })
}

fn parse_extrapolator(s: &str) -> Result<Extrapolator> {
    if s == "linear" {
        return Ok(Extrapolator::Linear);
    }
    if s == "exponential" || s == "exp" {
        return Ok(Extrapolator::Exponential);
    }
    if let Some(order) = s.strip_prefix("poly") {
        return Ok(Extrapolator::Polynomial(
            order.parse().context("bad polynomial order")?,
        ));
    }
    bail!("unknown extrapolator `{s}` (expected linear, polyN, exponential)")
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    if args.qubits == 0 {
        bail!("--qubits must be at least 1");
    }
    let mut noise = NoiseModel::ideal(args.qubits);
    noise.readout = vec![Confusion::symmetric(args.readout_error); args.qubits];
    let exec = SimulatorExecutor::new(noise);
    let circuits = build_calibration_circuits(args.qubits);
    let counts: Vec<_> = circuits
        .iter()
        .enumerate()
        .map(|(j, c)| exec.counts(c, args.shots, args.seed.wrapping_add(j as u64)))
        .collect::<Result<_, _>>()?;
    let matrix = estimate_calibration_matrix(&counts)?;
    let json = serde_json::to_string_pretty(&matrix)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, json)?;
            println!("calibration matrix written to {}", path.display());
        }
        None => println!("{json}"),
    }
    println!(
        "condition number {:.4}, well conditioned: {}",
        matrix.condition_number(),
        matrix.well_conditioned()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let result = load_result(&args.input)?;
    let format = match args.format.as_str() {
        "json" => ReportFormat::Json,
        "csv" => ReportFormat::Csv,
        other => bail!("unknown format `{other}`"),
    };
    let files = emit_report(&result, format, &args.out_dir)?;
    println!("wrote {} file(s) to {}", files.len(), args.out_dir.display());
    Ok(())
}

//! Command-line front end: noise calibration, training runs, aggregator
//! benchmarks, and filter-state dumps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cafcor::aggregation::{EigenMode, UpdateBatch};
use cafcor::harness::{
    self, aggregate_bench, caf_trace_jsonl, parse_config_file, resolve, trace_to_csv, BenchConfig,
    HarnessError,
};
use cafcor::privacy::{
    calibrate, check_theorem_condition, secldp_epsilon, NoiseAssignment, NoiseRegime,
    PrivacyError, PrivacyParams,
};
use cafcor::rng::KeyedStream;
use cafcor::training;

const EXIT_OK: u8 = 0;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser)]
#[command(name = "cafcor", version, about = "Robust and private distributed learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate noise for a privacy target, or audit explicit noise.
    Calibrate(CalibrateArgs),
    /// Run an experiment config and write its CSV trace.
    Run(RunArgs),
    /// Compare aggregation rules on synthetic corrupted batches.
    AggregateBench(BenchArgs),
    /// Dump per-iteration filter state as JSON lines.
    CafTrace(CafTraceArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    /// Number of composed iterations.
    #[arg(long = "T", visible_alias = "iterations")]
    steps: u64,
    /// Clipping threshold.
    #[arg(long = "C", visible_alias = "clip")]
    clip: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    f: usize,
    #[arg(long, default_value_t = 0)]
    q: usize,
    #[arg(long, default_value = "equal")]
    regime: String,
    /// Audit this correlated noise level instead of calibrating.
    #[arg(long)]
    sigma_cor: Option<f64>,
    /// Audit this independent noise level instead of calibrating.
    #[arg(long)]
    sigma_ind: Option<f64>,
    /// Interpret --sigma-cor/--sigma-ind as standard deviations rather than
    /// variances.
    #[arg(long)]
    stddev: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Config file: JSON or flat `key = value` lines.
    config: PathBuf,
    /// Override the config's output path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    f: usize,
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CafTraceArgs {
    /// JSON file holding an array of equal-length vectors.
    #[arg(long, conflicts_with_all = ["n", "d"])]
    input: Option<PathBuf>,
    /// Corrupt-count bound for the filter.
    #[arg(long)]
    f: usize,
    /// Synthesize a batch of this many vectors (the final f are outliers).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "exact")]
    mode: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::AggregateBench(args) => cmd_bench(&args),
        Command::CafTrace(args) => cmd_caf_trace(&args),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Privacy(PrivacyError::InfeasibleRegime(_))
        | HarnessError::Privacy(PrivacyError::InfeasibleNoise(_)) => EXIT_INFEASIBLE,
        HarnessError::Privacy(PrivacyError::InvalidParams(_)) => EXIT_USAGE,
        HarnessError::Validation { .. } | HarnessError::Parse(_) => EXIT_USAGE,
        HarnessError::Data(_) | HarnessError::Io(_) => EXIT_DATA,
        HarnessError::Simulation(training::SimulationError::Privacy(
            PrivacyError::InfeasibleRegime(_) | PrivacyError::InfeasibleNoise(_),
        )) => EXIT_INFEASIBLE,
        HarnessError::Simulation(_) | HarnessError::Aggregation(_) => EXIT_USAGE,
    }
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), HarnessError> {
    let params = PrivacyParams {
        epsilon: args.epsilon,
        delta: args.delta,
        steps: args.steps,
        clip: args.clip,
        n: args.n,
        corrupt: args.f,
        colluding: args.q,
    };
    let assignment = match (args.sigma_cor, args.sigma_ind) {
        (None, None) => {
            let regime = NoiseRegime::parse(&args.regime).ok_or_else(|| {
                HarnessError::Validation {
                    key: "regime".into(),
                    message: format!("unknown regime `{}`", args.regime),
                }
            })?;
            calibrate(&params, regime)?
        }
        (cor, ind) => {
            // Audit mode: report on user-supplied noise. The accountant
            // works in variances; --stddev squares the inputs first.
            let to_var = |v: f64| if args.stddev { v * v } else { v };
            NoiseAssignment {
                sigma_cor_sq: to_var(cor.unwrap_or(0.0)),
                sigma_ind_sq: to_var(ind.unwrap_or(0.0)),
                regime: NoiseRegime::Equal,
            }
        }
    };
    let feasible = check_theorem_condition(&params, &assignment)?;
    let (eps_star, alpha_star) = secldp_epsilon(&params, &assignment)?;

    println!("epsilon          = {}", args.epsilon);
    println!("delta            = {}", args.delta);
    println!("T                = {}", args.steps);
    println!("C                = {}", args.clip);
    println!("n                = {}", args.n);
    println!("f                = {}", args.f);
    println!("q                = {}", args.q);
    println!("regime           = {}", assignment.regime.name());
    println!("condition_holds  = {feasible}");
    println!("eps_star         = {}", harness::format_metric(eps_star));
    println!("alpha_star       = {}", harness::format_metric(alpha_star));
    println!(
        "sigma_cor_sq={} sigma_ind_sq={}",
        harness::format_metric(assignment.sigma_cor_sq),
        harness::format_metric(assignment.sigma_ind_sq)
    );
    Ok(())
}

fn threads_from_env() -> Option<usize> {
    std::env::var("CAFCOR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
}

fn cmd_run(args: &RunArgs) -> Result<(), HarnessError> {
    let mut config = parse_config_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = threads_from_env() {
        config.threads = Some(threads);
    }
    let resolved = resolve(&config)?;
    let trace = training::run(&resolved.simulation)?;
    let csv = trace_to_csv(&trace);
    let output = args
        .output
        .clone()
        .or_else(|| config.output.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("trace.csv"));
    std::fs::write(&output, csv)?;

    let last = trace.rows.last().expect("at least one iteration");
    println!("wrote {}", output.display());
    println!("iterations       = {}", trace.rows.len());
    println!("final_loss       = {}", harness::format_metric(last.loss));
    if let Some(acc) = last.accuracy {
        println!("final_accuracy   = {}", harness::format_metric(acc));
    }
    if let Some(gap) = last.gap {
        println!("final_gap        = {}", harness::format_metric(gap));
    }
    if let Some(eps) = last.eps_so_far {
        println!("eps_star         = {}", harness::format_metric(eps));
    }
    if let Some(a) = resolved.assignment {
        println!(
            "sigma_cor_sq={} sigma_ind_sq={}",
            harness::format_metric(a.sigma_cor_sq),
            harness::format_metric(a.sigma_ind_sq)
        );
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), HarnessError> {
    let rows = aggregate_bench(&BenchConfig {
        n: args.n,
        f: args.f,
        d: args.d,
        instances: args.instances,
        seed: args.seed,
    })?;
    println!(
        "{:<12} {:>14} {:>14} {:>12}",
        "aggregator", "mean_error", "worst_error", "cert_viol"
    );
    for row in rows {
        println!(
            "{:<12} {:>14.6e} {:>14.6e} {:>12}",
            row.aggregator, row.mean_error, row.worst_error, row.certificate_violations
        );
    }
    Ok(())
}

fn cmd_caf_trace(args: &CafTraceArgs) -> Result<(), HarnessError> {
    let mode = match args.mode.as_str() {
        "exact" => EigenMode::Exact,
        "power" => EigenMode::Power,
        other => {
            return Err(HarnessError::Validation {
                key: "mode".into(),
                message: format!("unknown mode `{other}` (expected exact or power)"),
            })
        }
    };
    let vectors: Vec<Vec<f64>> = match &args.input {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?
        }
        None => {
            let n = args.n.ok_or_else(|| HarnessError::Validation {
                key: "n".into(),
                message: "required when no --input file is given".into(),
            })?;
            let mut stream = KeyedStream::new(&[0x74726163, args.seed], 0);
            (0..n)
                .map(|i| {
                    let scale = if i + args.f >= n { 25.0 } else { 1.0 };
                    (0..args.d).map(|_| scale * stream.standard_normal()).collect()
                })
                .collect()
        }
    };
    let batch = UpdateBatch::new(vectors)?;
    print!("{}", caf_trace_jsonl(&batch, args.f, mode, args.seed)?);
    Ok(())
}

//! Command-line front end: dataset generation, experiment execution,
//! strategy comparison, parameter sweeps, and the analysis reports.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage/config error,
//! 3 divergence, 4 bound conditions not applicable.

mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use erasure_fl::aggregate::AggregationStrategy;
use erasure_fl::analysis::{
    check_inequalities, curvature_quadratic, memoryless_pmf, optimal_params, sample_param_pairs,
};
use erasure_fl::channel::ErasureChannelSet;
use erasure_fl::data::save_csv;
use erasure_fl::model::{ModelKind, ParamVector};
use erasure_fl::rng::seeded;
use erasure_fl::sim::{
    build_dataset, bound_overlay, compare_strategies, metrics_csv, run_experiment, sweep,
    SweepParameter,
};
use erasure_fl::{Error, Result};

use config::ConfigFlags;
use manifest::{RunManifest, SweepManifest};

#[derive(Parser)]
#[command(
    name = "erasure-fl",
    version,
    about = "Deterministic federated-learning simulator over packet-erasure uplinks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate device dataset CSVs plus a manifest.
    Generate(GenerateArgs),
    /// Run one experiment, writing metrics.csv and manifest.json.
    Run(RunArgs),
    /// Run several strategies against identical data and erasure patterns.
    Compare(CompareArgs),
    /// Sweep one parameter over seeded trials (parallel; capped by
    /// ERASURE_FL_THREADS, 0 = auto).
    Sweep(SweepArgs),
    /// Analysis reports as JSON.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset kind: linear, quadratic-noniid, uniform, or blobs.
    kind: String,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated strategies to compare.
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Parameter to vary: epsilon, eta, tau, or devices.
    #[arg(long)]
    parameter: String,
    /// Comma-separated values for the parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Independent seeded trials per value.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Exact distribution of the memoryless global parameter.
    Pmf(PmfArgs),
    /// Running-average bound overlaid on a stale-reuse trajectory.
    Bound(BoundArgs),
    /// Convexity/smoothness inequality report on a quadratic problem.
    Inequalities(InequalitiesArgs),
}

#[derive(Args)]
struct PmfArgs {
    /// Per-device local parameters (scalars, comma-separated).
    #[arg(long, value_delimiter = ',', required = true)]
    params: Vec<f64>,
    /// Shared erasure probability.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Per-device erasure probabilities (comma-separated).
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InequalitiesArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Random point pairs to check.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    /// Component scale of the sampled points.
    #[arg(long, default_value_t = 2.0)]
    pair_scale: f64,
    /// Seed for the pair sampler (independent of the experiment seed).
    #[arg(long, default_value_t = 9001)]
    pair_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::Numeric(_) => 1,
        Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::RankDeficient => 2,
        Error::Divergence { .. } | Error::ExperimentDiverged { .. } => 3,
        Error::NotApplicable { .. } => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Analyze(AnalyzeCommand::Pmf(args)) => cmd_analyze_pmf(args),
        Command::Analyze(AnalyzeCommand::Bound(args)) => cmd_analyze_bound(args),
        Command::Analyze(AnalyzeCommand::Inequalities(args)) => cmd_analyze_inequalities(args),
    }
}

fn emit(out: &Option<PathBuf>, json: String) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut flags = args.flags;
    if flags.dataset.is_some() {
        return Err(Error::InvalidParameter(
            "generate takes the dataset kind as a positional argument".into(),
        ));
    }
    flags.dataset = Some(args.kind.clone());
    let cfg = flags.resolve()?;

    let mut rng = seeded(cfg.seed);
    let (fed, holdout) = build_dataset(&cfg, &mut rng)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut outputs = Vec::new();
    for (i, part) in fed.parts().iter().enumerate() {
        let path = args.out_dir.join(format!("device_{i}.csv"));
        save_csv(part, &path)?;
        outputs.push(path);
    }
    if let Some(pool) = &holdout {
        let path = args.out_dir.join("holdout.csv");
        save_csv(pool, &path)?;
        outputs.push(path);
    }
    let manifest_path = args.out_dir.join("manifest.json");
    RunManifest::new("generate", cfg)?
        .with_outputs(&outputs)
        .write(&manifest_path)?;
    eprintln!(
        "wrote {} file(s) and {}",
        outputs.len(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let result = run_experiment(&cfg)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let metrics_path = args.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&[result]))?;
    let manifest_path = args.out_dir.join("manifest.json");
    RunManifest::new("run", cfg)?
        .with_outputs(std::slice::from_ref(&metrics_path))
        .write(&manifest_path)?;
    eprintln!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let strategies = args
        .strategies
        .iter()
        .map(|s| s.parse::<AggregationStrategy>())
        .collect::<Result<Vec<_>>>()?;
    let cfg = args.flags.resolve()?;
    let results = compare_strategies(&cfg, &strategies)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let metrics_path = args.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&results))?;
    let manifest_path = args.out_dir.join("manifest.json");
    let mut manifest = RunManifest::new("compare", cfg)?.with_outputs(std::slice::from_ref(&metrics_path));
    manifest.strategies = Some(strategies.iter().map(|s| s.to_string()).collect());
    manifest.write(&manifest_path)?;
    eprintln!("wrote {}", metrics_path.display());
    Ok(())
}

/// Trial parallelism cap from the environment (0 or unset = auto).
fn thread_cap() -> Result<usize> {
    match std::env::var("ERASURE_FL_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::InvalidParameter(format!("ERASURE_FL_THREADS must be an integer (got {v:?})"))
        }),
        Err(_) => Ok(0),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let parameter: SweepParameter = args.parameter.parse()?;
    let cfg = args.flags.resolve()?;
    let threads = thread_cap()?;
    let summary = sweep(&cfg, parameter, &args.values, args.trials, threads)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let sweep_path = args.out_dir.join("sweep.json");
    let json = serde_json::to_string_pretty(&summary).expect("sweep serialization cannot fail");
    std::fs::write(&sweep_path, json + "\n")?;
    let manifest_path = args.out_dir.join("manifest.json");
    let mut manifest = RunManifest::new("sweep", cfg)?.with_outputs(std::slice::from_ref(&sweep_path));
    manifest.sweep = Some(SweepManifest {
        parameter: args.parameter,
        values: args.values,
        trials: args.trials,
        threads,
    });
    manifest.write(&manifest_path)?;
    eprintln!("wrote {}", sweep_path.display());
    Ok(())
}

fn cmd_analyze_pmf(args: PmfArgs) -> Result<()> {
    let n = args.params.len();
    let channels = match (&args.epsilon, &args.epsilons) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidParameter(
                "give either --epsilon or --epsilons, not both".into(),
            ))
        }
        (Some(e), None) => ErasureChannelSet::shared(*e, n)?,
        (None, Some(es)) => ErasureChannelSet::new(es.clone())?,
        (None, None) => {
            return Err(Error::InvalidParameter(
                "--epsilon or --epsilons is required".into(),
            ))
        }
    };
    let params: Vec<ParamVector> = args
        .params
        .iter()
        .map(|&v| ParamVector::new(ModelKind::LinearMse, vec![v]))
        .collect::<Result<Vec<_>>>()?;
    let pmf = memoryless_pmf(&params, &channels)?;
    let json =
        serde_json::to_string_pretty(&pmf.report()).expect("pmf serialization cannot fail");
    emit(&args.out, json)
}

fn cmd_analyze_bound(args: BoundArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let overlay = bound_overlay(&cfg)?;
    let json =
        serde_json::to_string_pretty(&overlay).expect("overlay serialization cannot fail");
    emit(&args.out, json)
}

fn cmd_analyze_inequalities(args: InequalitiesArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let mut rng = seeded(cfg.seed);
    let (fed, _) = build_dataset(&cfg, &mut rng)?;
    let spec = cfg.loss_spec()?;
    let constants = curvature_quadratic(&fed, &spec)?;
    let (w_star, f_star) = optimal_params(&fed, &spec)?;
    let mut pair_rng = seeded(args.pair_seed);
    let pairs =
        sample_param_pairs(spec.kind, fed.width(), args.pairs, args.pair_scale, &mut pair_rng);
    let report = check_inequalities(&fed, &spec, &constants, (&w_star, f_star), &pairs)?;

    #[derive(serde::Serialize)]
    struct InequalityOutput<'a> {
        constants: &'a erasure_fl::analysis::CurvatureConstants,
        report: &'a erasure_fl::analysis::InequalityReport,
        total_violations: usize,
    }
    let json = serde_json::to_string_pretty(&InequalityOutput {
        constants: &constants,
        report: &report,
        total_violations: report.total_violations(),
    })
    .expect("report serialization cannot fail");
    emit(&args.out, json)
}

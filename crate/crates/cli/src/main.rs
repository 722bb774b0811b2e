//! `lqpg` — batch experiment driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence-dominated run.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lqpg_cli::{run_experiment, ExperimentConfig, ExperimentKind, ScheduleChoice};
use lqpg_core::bootstrap::WeightScheme;
use lqpg_core::error::LqError;

#[derive(Parser)]
#[command(
    name = "lqpg",
    about = "Policy-gradient learning and bootstrap inference for finite-horizon linear-quadratic control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence study: replicated PG runs with iterate logs.
    Converge(CommonArgs),
    /// Single bootstrap run: replica histograms and normality diagnostics.
    Clt(CommonArgs),
    /// Replicated bootstrap runs: confidence-interval coverage tables.
    Coverage(CommonArgs),
    /// Objective-loss statistic against its chi-square mixture.
    LossMixture(CommonArgs),
    /// Least-squares identification errors across record counts.
    Sysid(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// System spec file (TOML).
    #[arg(long)]
    system: PathBuf,
    /// Iteration budget per run.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of independent replications.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Bootstrap replica count B.
    #[arg(long = "bootstrap-b", default_value_t = 200)]
    bootstrap_b: usize,
    /// Pool size m of initial states per replication.
    #[arg(long, default_value_t = 20)]
    agents: usize,
    /// Multiplier-weight scheme: exp1 | absnormal11 | const1.
    #[arg(long, default_value = "exp1")]
    weights: String,
    /// Gradient mode: exact | zeroth:r=<f>,m=<k>[,crn].
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Step schedule: auto | linesearch | poly[:c0=<f>,alpha=<f>].
    #[arg(long, default_value = "auto")]
    schedule: String,
    /// Miscoverage level (confidence level is 1 - alpha).
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Master seed; all randomness derives deterministically from it.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output directory for the report CSVs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (affects wall-clock only, never results).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Logging cadence in iterations.
    #[arg(long = "record-every", default_value_t = 1)]
    record_every: usize,
    /// Iterations discarded before averaging starts.
    #[arg(long = "burn-in", default_value_t = 0)]
    burn_in: usize,
    /// Initial gain value filled into every entry of K0.
    #[arg(long = "initial-gain", default_value_t = 0.4)]
    initial_gain: f64,
    /// Exploratory input noise std for sysid data collection.
    #[arg(long, default_value_t = 1.0)]
    excitation: f64,
}

fn build_config(kind: ExperimentKind, args: &CommonArgs) -> Result<ExperimentConfig, LqError> {
    let mut cfg = ExperimentConfig::defaults(args.system.clone(), kind);
    cfg.iterations = args.n;
    cfg.replications = args.reps;
    cfg.bootstrap_replicas = args.bootstrap_b;
    cfg.agents = args.agents;
    cfg.weight_scheme = WeightScheme::parse(&args.weights)?;
    cfg.mode = lqpg_cli::experiments::parse_mode(&args.mode)?;
    cfg.schedule = ScheduleChoice::parse(&args.schedule)?;
    cfg.alpha = args.alpha;
    cfg.seed = args.seed;
    cfg.output_dir = args.out.clone();
    if args.threads > 0 {
        cfg.threads = args.threads;
    }
    cfg.record_every = args.record_every;
    cfg.burn_in = args.burn_in;
    cfg.initial_gain = args.initial_gain;
    cfg.excitation = args.excitation;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Converge(a) => (ExperimentKind::Converge, a),
        Command::Clt(a) => (ExperimentKind::Clt, a),
        Command::Coverage(a) => (ExperimentKind::Coverage, a),
        Command::LossMixture(a) => (ExperimentKind::LossMixture, a),
        Command::Sysid(a) => (ExperimentKind::Sysid, a),
    };
    let cfg = match build_config(kind, args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    match run_experiment(&cfg) {
        Ok(report) => {
            if let Err(e) = report.write_to(&cfg.output_dir) {
                eprintln!("cannot write report: {e}");
                return ExitCode::from(2);
            }
            let meta = format!(
                "binary = \"lqpg {}\"\nwall_clock_seconds = {:.3}\nsummary = \"{}\"\nfailed_replications = {}\n",
                env!("CARGO_PKG_VERSION"),
                start.elapsed().as_secs_f64(),
                report.summary,
                report.failed_replications,
            );
            if let Err(e) = std::fs::write(cfg.output_dir.join("meta.txt"), meta) {
                eprintln!("cannot write metadata: {e}");
                return ExitCode::from(2);
            }
            println!("{}", report.summary);
            println!("report written to {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ (LqError::Divergence { .. } | LqError::ReplicaLoss { .. })) => {
            eprintln!("run dominated by divergence: {e}");
            ExitCode::from(3)
        }
        Err(LqError::SingularDesign { .. }) => {
            eprintln!("singular identification design in every replication");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
    }
}

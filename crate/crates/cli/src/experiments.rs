//! The experiment runners: converge, clt, coverage, loss-mixture, sysid.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use lqpg_core::asymptotics::{
    coverage_table, ks_distance, loss_mixture, model_based_covariance, AsymptoticCovariance,
    CoverageRecord,
};
use lqpg_core::bootstrap::{
    confidence_intervals, run_bootstrap_pg, CiMethod, ReplicaStreams, WeightScheme,
};
use lqpg_core::config::load_system;
use lqpg_core::error::{LqError, Result};
use lqpg_core::mat::{interpolated_quantile, mean_and_sd, symmetrize};
use lqpg_core::pg::{calibrate_c0, run_pg, PgConfig, PgMode, StepSchedule};
use lqpg_core::riccati::{analytic_cost, solve_optimal};
use lqpg_core::stream::{label, StreamFactory};
use lqpg_core::system::{
    collect_sysid_data, estimate_dynamics, state_covariances, InitModel, LqSystem, Policy,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::report::{fmt, ExperimentReport};

/// Which study to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Converge,
    Clt,
    Coverage,
    LossMixture,
    Sysid,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "converge" => Ok(Self::Converge),
            "clt" => Ok(Self::Clt),
            "coverage" => Ok(Self::Coverage),
            "loss-mixture" => Ok(Self::LossMixture),
            "sysid" => Ok(Self::Sysid),
            other => Err(LqError::InvalidParameter(format!(
                "unknown experiment '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Converge => "converge",
            Self::Clt => "clt",
            Self::Coverage => "coverage",
            Self::LossMixture => "loss-mixture",
            Self::Sysid => "sysid",
        }
    }
}

/// Step-size rule selection; `Auto` resolves per experiment (line search for
/// converge, calibrated polynomial alpha = 1/2 for the bootstrap studies).
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleChoice {
    Auto,
    LineSearch,
    Polynomial { c0: Option<f64>, alpha: f64 },
}

impl ScheduleChoice {
    /// `auto | linesearch | poly | poly:c0=<f>,alpha=<f>`
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "auto" => return Ok(Self::Auto),
            "linesearch" => return Ok(Self::LineSearch),
            "poly" => {
                return Ok(Self::Polynomial {
                    c0: None,
                    alpha: 0.5,
                })
            }
            _ => {}
        }
        if let Some(rest) = text.strip_prefix("poly:") {
            let mut c0 = None;
            let mut alpha = 0.5;
            for part in rest.split(',') {
                match part.split_once('=') {
                    Some(("c0", v)) => {
                        c0 = Some(v.parse::<f64>().map_err(|_| {
                            LqError::InvalidParameter(format!("bad c0 '{v}'"))
                        })?)
                    }
                    Some(("alpha", v)) => {
                        alpha = v.parse::<f64>().map_err(|_| {
                            LqError::InvalidParameter(format!("bad alpha '{v}'"))
                        })?
                    }
                    _ => {
                        return Err(LqError::InvalidParameter(format!(
                            "bad schedule component '{part}'"
                        )))
                    }
                }
            }
            return Ok(Self::Polynomial { c0, alpha });
        }
        Err(LqError::InvalidParameter(format!(
            "unknown schedule '{text}' (expected auto | linesearch | poly[:c0=..,alpha=..])"
        )))
    }
}

/// `exact | zeroth:r=<f>,m=<k>[,crn]`
pub fn parse_mode(text: &str) -> Result<PgMode> {
    if text == "exact" {
        return Ok(PgMode::Exact);
    }
    if let Some(rest) = text.strip_prefix("zeroth:") {
        let mut radius = None;
        let mut directions = None;
        let mut crn = false;
        for part in rest.split(',') {
            match part.split_once('=') {
                Some(("r", v)) => {
                    radius = Some(v.parse::<f64>().map_err(|_| {
                        LqError::InvalidParameter(format!("bad radius '{v}'"))
                    })?)
                }
                Some(("m", v)) => {
                    directions = Some(v.parse::<usize>().map_err(|_| {
                        LqError::InvalidParameter(format!("bad direction count '{v}'"))
                    })?)
                }
                None if part == "crn" => crn = true,
                _ => {
                    return Err(LqError::InvalidParameter(format!(
                        "bad mode component '{part}'"
                    )))
                }
            }
        }
        return Ok(PgMode::ZerothOrder {
            radius: radius.ok_or_else(|| {
                LqError::InvalidParameter("zeroth mode needs r=<f>".into())
            })?,
            directions: directions.unwrap_or(1),
            common_random_numbers: crn,
        });
    }
    Err(LqError::InvalidParameter(format!(
        "unknown mode '{text}' (expected exact | zeroth:r=<f>,m=<k>[,crn])"
    )))
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub system_path: PathBuf,
    pub experiment: ExperimentKind,
    pub iterations: usize,
    pub replications: usize,
    pub bootstrap_replicas: usize,
    pub agents: usize,
    pub weight_scheme: WeightScheme,
    pub mode: PgMode,
    pub schedule: ScheduleChoice,
    pub alpha: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub record_every: usize,
    pub burn_in: usize,
    pub initial_gain: f64,
    pub excitation: f64,
}

impl ExperimentConfig {
    pub fn defaults(system_path: PathBuf, experiment: ExperimentKind) -> Self {
        Self {
            system_path,
            experiment,
            iterations: 2000,
            replications: 200,
            bootstrap_replicas: 200,
            agents: 20,
            weight_scheme: WeightScheme::Exponential1,
            mode: PgMode::Exact,
            schedule: ScheduleChoice::Auto,
            alpha: 0.05,
            seed: 17,
            output_dir: PathBuf::from("out"),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            record_every: 1,
            burn_in: 0,
            initial_gain: 0.4,
            excitation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 && self.experiment != ExperimentKind::Clt {
            return Err(LqError::InvalidParameter("replications must be >= 1".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(LqError::InvalidParameter("alpha must be in (0,1)".into()));
        }
        if self.threads == 0 {
            return Err(LqError::InvalidParameter("threads must be >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(LqError::InvalidParameter("record-every must be >= 1".into()));
        }
        if self.agents == 0 {
            return Err(LqError::InvalidParameter("agents must be >= 1".into()));
        }
        Ok(())
    }

    /// The resolved configuration echoed into every report.
    pub fn echo_toml(&self) -> String {
        let mode = match &self.mode {
            PgMode::Exact => "exact".to_string(),
            PgMode::ZerothOrder {
                radius,
                directions,
                common_random_numbers,
            } => format!(
                "zeroth:r={radius},m={directions}{}",
                if *common_random_numbers { ",crn" } else { "" }
            ),
        };
        let schedule = match &self.schedule {
            ScheduleChoice::Auto => "auto".to_string(),
            ScheduleChoice::LineSearch => "linesearch".to_string(),
            ScheduleChoice::Polynomial { c0, alpha } => match c0 {
                Some(c0) => format!("poly:c0={c0},alpha={alpha}"),
                None => format!("poly:alpha={alpha}"),
            },
        };
        format!(
            "experiment = \"{}\"\nsystem = \"{}\"\nn = {}\nreplications = {}\nbootstrap_b = {}\nagents = {}\nweights = \"{}\"\nmode = \"{}\"\nschedule = \"{}\"\nalpha = {}\nseed = {}\nthreads = {}\nrecord_every = {}\nburn_in = {}\ninitial_gain = {}\nexcitation = {}\n",
            self.experiment.name(),
            self.system_path.display(),
            self.iterations,
            self.replications,
            self.bootstrap_replicas,
            self.agents,
            self.weight_scheme.name(),
            mode,
            schedule,
            self.alpha,
            self.seed,
            self.threads,
            self.record_every,
            self.burn_in,
            self.initial_gain,
            self.excitation,
        )
    }
}

/// Resolve the schedule choice into a concrete rule. Calibration is done
/// once on the base system so all replications share the same schedule.
fn resolve_schedule(
    choice: &ScheduleChoice,
    experiment: ExperimentKind,
    sys: &LqSystem,
    initial: &Policy,
) -> Result<StepSchedule> {
    let resolved = match choice {
        ScheduleChoice::Auto => match experiment {
            ExperimentKind::Converge => return Ok(StepSchedule::default_line_search()),
            // Bootstrap studies: Armijo backtracking capped at the
            // calibrated quarter-edge step. Constant-scale steps flush the
            // transient geometrically, and the cap keeps weighted replica
            // steps inside the stochastic stability region.
            _ => {
                return Ok(StepSchedule::LineSearch {
                    shrink: 0.5,
                    c_armijo: 0.1,
                    eta_max: calibrate_c0(sys, initial)?,
                })
            }
        },
        other => other.clone(),
    };
    Ok(match resolved {
        ScheduleChoice::LineSearch => StepSchedule::default_line_search(),
        ScheduleChoice::Polynomial { c0, alpha } => StepSchedule::Polynomial {
            c0: match c0 {
                Some(c0) => c0,
                None => calibrate_c0(sys, initial)?,
            },
            alpha,
        },
        ScheduleChoice::Auto => unreachable!(),
    })
}

fn initial_policy(sys: &LqSystem, gain: f64) -> Policy {
    Policy::uniform(sys.horizon(), sys.control_dim(), sys.state_dim(), gain)
}

/// Draw the replication's agent pool from the system's initial-state model.
fn replication_system(
    sys: &LqSystem,
    factory: &StreamFactory,
    rep: u64,
    agents: usize,
) -> Result<LqSystem> {
    let mut rng = factory.stream(&[label::REPLICATION, rep, label::POOL]);
    let pool: Vec<DVector<f64>> = (0..agents).map(|_| sys.init().sample(&mut rng)).collect();
    sys.with_init(InitModel::Pool(pool))
}

fn pg_config(cfg: &ExperimentConfig, schedule: StepSchedule, k0: Policy) -> PgConfig {
    PgConfig {
        iterations: cfg.iterations,
        schedule,
        initial_policy: k0,
        mode: cfg.mode.clone(),
        record_every: cfg.record_every,
        burn_in: cfg.burn_in,
    }
}

fn failures_csv(failures: &[(usize, String)]) -> String {
    let mut out = String::from("replication,error\n");
    for (rep, err) in failures {
        out.push_str(&format!("{rep},\"{}\"\n", err.replace('"', "'")));
    }
    out
}

/// Dispatch on the experiment kind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sys = load_system(&cfg.system_path)?;
    let violations = lqpg_core::system::validate_system(&sys);
    if !violations.is_empty() {
        return Err(LqError::InvalidParameter(format!(
            "system spec failed validation: {}",
            violations.join("; ")
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| LqError::InvalidParameter(format!("thread pool: {e}")))?;
    let mut report = pool.install(|| match cfg.experiment {
        ExperimentKind::Converge => run_converge(cfg, &sys),
        ExperimentKind::Clt => run_clt(cfg, &sys),
        ExperimentKind::Coverage => run_coverage(cfg, &sys),
        ExperimentKind::LossMixture => run_loss_mixture(cfg, &sys),
        ExperimentKind::Sysid => run_sysid(cfg, &sys),
    })?;
    report.push_file("config.toml", cfg.echo_toml());
    Ok(report)
}

// ---------------------------------------------------------------------
// converge
// ---------------------------------------------------------------------

/// R replications of the plain PG run; per-replication iterate logs plus
/// median / 10-90% band aggregates per logged iteration.
fn run_converge(cfg: &ExperimentConfig, sys: &LqSystem) -> Result<ExperimentReport> {
    let factory = StreamFactory::new(cfg.seed);
    let k0 = initial_policy(sys, cfg.initial_gain);
    let schedule = resolve_schedule(&cfg.schedule, cfg.experiment, sys, &k0)?;
    let runs: Vec<std::result::Result<lqpg_core::pg::PgRun, String>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let rep = rep as u64;
            let run_sys = replication_system(sys, &factory, rep, cfg.agents)
                .map_err(|e| e.to_string())?;
            let pg_cfg = pg_config(cfg, schedule.clone(), k0.clone());
            let mut rng = factory.stream(&[label::REPLICATION, rep, label::MAIN_CHAIN]);
            run_pg(&run_sys, &pg_cfg, &mut rng).map_err(|e| e.to_string())
        })
        .collect();

    let mut report = ExperimentReport {
        replications: cfg.replications,
        ..Default::default()
    };
    let mut failures = Vec::new();
    let mut logs = Vec::new();
    for (rep, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                report.push_file(format!("iterates_rep{rep:04}.csv"), run.log.to_csv());
                logs.push(run.log);
            }
            Err(e) => failures.push((rep, e)),
        }
    }
    report.failed_replications = failures.len();
    if report.is_divergence_dominated() {
        return Err(LqError::Divergence {
            iteration: 0,
            replica: None,
        });
    }

    // Aggregate across surviving replications, per logged iteration.
    let mut agg = String::from(
        "iteration,bias_median,bias_p10,bias_p90,cost_median,cost_p10,cost_p90,normalized_error_median,normalized_error_p10,normalized_error_p90\n",
    );
    if let Some(first) = logs.first() {
        for (row_idx, row) in first.rows.iter().enumerate() {
            let column = |pick: fn(&lqpg_core::pg::LogRow) -> f64| -> Vec<f64> {
                let mut v: Vec<f64> = logs
                    .iter()
                    .filter_map(|l| l.rows.get(row_idx).map(pick))
                    .collect();
                v.sort_by(f64::total_cmp);
                v
            };
            let bias = column(|r| r.bias_l1);
            let cost = column(|r| r.cost);
            let nerr = column(|r| r.normalized_error);
            agg.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                row.iteration,
                fmt(interpolated_quantile(&bias, 0.5)),
                fmt(interpolated_quantile(&bias, 0.1)),
                fmt(interpolated_quantile(&bias, 0.9)),
                fmt(interpolated_quantile(&cost, 0.5)),
                fmt(interpolated_quantile(&cost, 0.1)),
                fmt(interpolated_quantile(&cost, 0.9)),
                fmt(interpolated_quantile(&nerr, 0.5)),
                fmt(interpolated_quantile(&nerr, 0.1)),
                fmt(interpolated_quantile(&nerr, 0.9)),
            ));
        }
    }
    report.push_file("aggregate.csv", agg);
    report.push_file("failures.csv", failures_csv(&failures));
    report.summary = format!(
        "converge: {} replications, {} failed",
        cfg.replications,
        failures.len()
    );
    Ok(report)
}

// ---------------------------------------------------------------------
// clt
// ---------------------------------------------------------------------

/// One bootstrap run; per-entry replica histograms at t = 1 and the
/// Kolmogorov distance of the standardized replica sample against a
/// standard-normal reference sample.
fn run_clt(cfg: &ExperimentConfig, sys: &LqSystem) -> Result<ExperimentReport> {
    if cfg.bootstrap_replicas < 50 {
        return Err(LqError::InvalidParameter(
            "clt needs at least 50 bootstrap replicas".into(),
        ));
    }
    let factory = StreamFactory::new(cfg.seed);
    let k0 = initial_policy(sys, cfg.initial_gain);
    let schedule = resolve_schedule(&cfg.schedule, cfg.experiment, sys, &k0)?;
    let run_sys = replication_system(sys, &factory, 0, cfg.agents)?;
    let pg_cfg = pg_config(cfg, schedule, k0);
    let mut main_rng = factory.stream(&[label::REPLICATION, 0, label::MAIN_CHAIN]);
    let mut streams =
        ReplicaStreams::from_factory(&factory, &[label::REPLICATION, 0], cfg.bootstrap_replicas);
    let run = run_bootstrap_pg(&run_sys, &pg_cfg, cfg.weight_scheme, &mut main_rng, &mut streams)?;
    let replicas = run.surviving_averages();
    if replicas.len() < 2 {
        return Err(LqError::InsufficientReplicas(replicas.len()));
    }

    let stage = 1usize.min(sys.horizon() - 1);
    let p = sys.control_dim();
    let d = sys.state_dim();
    let mut hist = String::from("entry,bin_lower,bin_upper,count\n");
    let mut ks_csv = String::from("entry,ks_vs_normal\n");
    let mut reference_rng = factory.stream(&[label::REFERENCE]);
    let reference: Vec<f64> = (0..100_000)
        .map(|_| reference_rng.sample::<f64, _>(StandardNormal))
        .collect();
    for i in 0..p {
        for j in 0..d {
            let values: Vec<f64> = replicas.iter().map(|r| r.stage(stage)[(i, j)]).collect();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let entry = format!("K_{}_{}", i + 1, j + 1);
            if hi <= lo {
                hist.push_str(&format!("{entry},{},{},{}\n", fmt(lo), fmt(hi), values.len()));
            } else {
                let bins = 20usize;
                let width = (hi - lo) / bins as f64;
                let mut counts = vec![0usize; bins];
                for &v in &values {
                    let k = (((v - lo) / width) as usize).min(bins - 1);
                    counts[k] += 1;
                }
                for (k, c) in counts.iter().enumerate() {
                    hist.push_str(&format!(
                        "{entry},{},{},{c}\n",
                        fmt(lo + k as f64 * width),
                        fmt(lo + (k + 1) as f64 * width)
                    ));
                }
            }
            let (mean, sd) = mean_and_sd(&values);
            let standardized: Vec<f64> = if sd > 1e-300 {
                values.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; values.len()]
            };
            let ks = ks_distance(&standardized, &reference)?;
            ks_csv.push_str(&format!("{entry},{}\n", fmt(ks)));
        }
    }

    // Replica averages at the reported stage for downstream analysis.
    let mut reps_csv = String::from("replica,entry,value\n");
    for (b, r) in replicas.iter().enumerate() {
        for i in 0..p {
            for j in 0..d {
                reps_csv.push_str(&format!(
                    "{b},K_{}_{},{}\n",
                    i + 1,
                    j + 1,
                    fmt(r.stage(stage)[(i, j)])
                ));
            }
        }
    }

    let mut report = ExperimentReport {
        replications: 1,
        ..Default::default()
    };
    report.push_file("histogram.csv", hist);
    report.push_file("ks.csv", ks_csv);
    report.push_file("replica_averages.csv", reps_csv);
    report.push_file("iterates.csv", run.log.to_csv());
    report.summary = format!(
        "clt: {} replicas, {} diverged, {} line-search skips",
        cfg.bootstrap_replicas,
        cfg.bootstrap_replicas - replicas.len(),
        run.skipped_steps
    );
    Ok(report)
}

// ---------------------------------------------------------------------
// coverage
// ---------------------------------------------------------------------

/// R independent bootstrap runs; per run both CI methods at the requested
/// level for every entry at t = 1; coverage table plus mean widths.
fn run_coverage(cfg: &ExperimentConfig, sys: &LqSystem) -> Result<ExperimentReport> {
    if cfg.replications < 100 {
        return Err(LqError::InvalidParameter(
            "coverage needs at least 100 replications".into(),
        ));
    }
    let factory = StreamFactory::new(cfg.seed);
    let k0 = initial_policy(sys, cfg.initial_gain);
    let schedule = resolve_schedule(&cfg.schedule, cfg.experiment, sys, &k0)?;
    let (_, kstar) = solve_optimal(sys)?;
    let level = 1.0 - cfg.alpha;
    let stage = 1usize.min(sys.horizon() - 1);

    type RepOutcome = std::result::Result<(Vec<CoverageRecord>, String), String>;
    let outcomes: Vec<RepOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let rep_u = rep as u64;
            let run_sys = replication_system(sys, &factory, rep_u, cfg.agents)
                .map_err(|e| e.to_string())?;
            let pg_cfg = pg_config(cfg, schedule.clone(), k0.clone());
            let mut main_rng = factory.stream(&[label::REPLICATION, rep_u, label::MAIN_CHAIN]);
            let mut streams = ReplicaStreams::from_factory(
                &factory,
                &[label::REPLICATION, rep_u],
                cfg.bootstrap_replicas,
            );
            let run = run_bootstrap_pg(
                &run_sys,
                &pg_cfg,
                cfg.weight_scheme,
                &mut main_rng,
                &mut streams,
            )
            .map_err(|e| e.to_string())?;
            let replicas = run.surviving_averages();
            let mut records = Vec::new();
            let mut rows_csv = String::new();
            for method in [CiMethod::Quantile, CiMethod::StdError] {
                let table =
                    confidence_intervals(run.main_average.mean(), &replicas, method, level)
                        .map_err(|e| e.to_string())?;
                for row in table.stage_rows(stage) {
                    let truth = kstar.stage(stage)[(row.row, row.col)];
                    records.push(CoverageRecord {
                        agents: cfg.agents,
                        method,
                        scheme: cfg.weight_scheme,
                        stage,
                        row: row.row,
                        col: row.col,
                        lower: row.lower,
                        upper: row.upper,
                        truth,
                    });
                    let covered = (row.lower <= truth && truth <= row.upper) as u8;
                    rows_csv.push_str(&format!(
                        "{rep},{},{},{},{},{:.2},{},{},{},{},{covered}\n",
                        stage,
                        row.row,
                        row.col,
                        method.name(),
                        level,
                        fmt(row.lower),
                        fmt(row.upper),
                        fmt(row.point),
                        fmt(truth),
                    ));
                }
            }
            Ok((records, rows_csv))
        })
        .collect();

    let mut report = ExperimentReport {
        replications: cfg.replications,
        ..Default::default()
    };
    let mut failures = Vec::new();
    let mut all_records = Vec::new();
    let mut ci_csv = String::from(
        "replication,t,row,col,method,level,lower,upper,point_estimate,true_value,covered\n",
    );
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((records, rows)) => {
                all_records.extend(records);
                ci_csv.push_str(&rows);
            }
            Err(e) => failures.push((rep, e)),
        }
    }
    report.failed_replications = failures.len();
    if report.is_divergence_dominated() {
        return Err(LqError::Divergence {
            iteration: 0,
            replica: None,
        });
    }

    let table = coverage_table(&all_records);
    report.push_file("coverage.csv", table.to_csv());

    // Mean CI width per method and entry.
    let mut widths = String::from("method,entry,mean_width\n");
    for method in [CiMethod::Quantile, CiMethod::StdError] {
        for i in 0..sys.control_dim() {
            for j in 0..sys.state_dim() {
                let ws: Vec<f64> = all_records
                    .iter()
                    .filter(|r| r.method == method && r.row == i && r.col == j)
                    .map(|r| r.upper - r.lower)
                    .collect();
                if !ws.is_empty() {
                    let (mean, _) = mean_and_sd(&ws);
                    widths.push_str(&format!(
                        "{},K_{}_{},{}\n",
                        method.name(),
                        i + 1,
                        j + 1,
                        fmt(mean)
                    ));
                }
            }
        }
    }
    report.push_file("widths.csv", widths);
    report.push_file("ci.csv", ci_csv);
    report.push_file("failures.csv", failures_csv(&failures));
    report.summary = format!(
        "coverage: {} replications, {} failed",
        cfg.replications,
        failures.len()
    );
    Ok(report)
}

// ---------------------------------------------------------------------
// loss-mixture
// ---------------------------------------------------------------------

/// Build a per-stage limit-covariance set from cross-replication samples of
/// `sqrt(n) (vec Kbar_t - vec K*_t)`, keeping the exact curvature `G_t`.
fn empirical_covariances(
    sys: &LqSystem,
    kstar: &Policy,
    deviations: &[Vec<DVector<f64>>],
) -> Result<Vec<AsymptoticCovariance>> {
    let (values, _) = solve_optimal(sys)?;
    let sigmas = state_covariances(sys, kstar);
    let mut out = Vec::with_capacity(sys.horizon());
    for t in 0..sys.horizon() {
        let btp = sys.b().transpose() * values.stage(t + 1);
        let theta = symmetrize(&(sys.r(t) + &btp * sys.b()));
        let g = sigmas[t].kronecker(&theta);
        let dim = g.nrows();
        let n = deviations.len() as f64;
        let mut mean = DVector::zeros(dim);
        for rep in deviations {
            mean += &rep[t];
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        for rep in deviations {
            let c = &rep[t] - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        out.push(AsymptoticCovariance::from_limit_covariance(t, g, cov)?);
    }
    Ok(out)
}

/// R plain PG runs; the loss statistic `2n (C(Kbar) - C(K*))` versus the
/// chi-square mixtures fitted from (a) the Monte-Carlo model covariance and
/// (b) the cross-replication covariance of the averaged iterates.
fn run_loss_mixture(cfg: &ExperimentConfig, sys: &LqSystem) -> Result<ExperimentReport> {
    let factory = StreamFactory::new(cfg.seed);
    let k0 = initial_policy(sys, cfg.initial_gain);
    let schedule = resolve_schedule(&cfg.schedule, cfg.experiment, sys, &k0)?;
    let (_, kstar) = solve_optimal(sys)?;
    let kstar_cost = analytic_cost(sys, &kstar);
    let root_n = (cfg.iterations as f64).sqrt();

    type RepOutcome = std::result::Result<(f64, Vec<DVector<f64>>), String>;
    let outcomes: Vec<RepOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let rep_u = rep as u64;
            let run_sys = replication_system(sys, &factory, rep_u, cfg.agents)
                .map_err(|e| e.to_string())?;
            let pg_cfg = pg_config(cfg, schedule.clone(), k0.clone());
            let mut rng = factory.stream(&[label::REPLICATION, rep_u, label::MAIN_CHAIN]);
            let run = run_pg(&run_sys, &pg_cfg, &mut rng).map_err(|e| e.to_string())?;
            let kbar = run.average.mean();
            let statistic =
                2.0 * cfg.iterations as f64 * (analytic_cost(sys, kbar) - kstar_cost);
            let deviations: Vec<DVector<f64>> = (0..sys.horizon())
                .map(|t| {
                    let diff = kbar.stage(t) - kstar.stage(t);
                    DVector::from_column_slice(diff.as_slice()) * root_n
                })
                .collect();
            Ok((statistic, deviations))
        })
        .collect();

    let mut report = ExperimentReport {
        replications: cfg.replications,
        ..Default::default()
    };
    let mut failures = Vec::new();
    let mut statistics = Vec::new();
    let mut deviations = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((stat, dev)) => {
                statistics.push(stat);
                deviations.push(dev);
            }
            Err(e) => failures.push((rep, e)),
        }
    }
    report.failed_replications = failures.len();
    if report.is_divergence_dominated() || statistics.len() < 2 {
        return Err(LqError::Divergence {
            iteration: 0,
            replica: None,
        });
    }

    let mut stat_csv = String::from("replication,statistic\n");
    for (i, s) in statistics.iter().enumerate() {
        stat_csv.push_str(&format!("{i},{}\n", fmt(*s)));
    }
    report.push_file("statistic.csv", stat_csv);

    // Mixture (a): model-based asymptotic covariance.
    let mut mc_rng = factory.stream(&[label::MONTE_CARLO, 1]);
    let model_covs = model_based_covariance(sys, &kstar, 100_000, &mut mc_rng)?;
    let model_mix = loss_mixture(&model_covs)?;
    // Mixture (b): covariance observed across the replications themselves.
    let empirical_covs = empirical_covariances(sys, &kstar, &deviations)?;
    let empirical_mix = loss_mixture(&empirical_covs)?;

    let draws = 1_000_000usize;
    let mut mix_rng = factory.stream(&[label::MONTE_CARLO, 2]);
    let model_sample = model_mix.sample_many(draws, &mut mix_rng);
    let empirical_sample = empirical_mix.sample_many(draws, &mut mix_rng);
    let ks_model = ks_distance(&statistics, &model_sample)?;
    let ks_empirical = ks_distance(&statistics, &empirical_sample)?;
    report.push_file(
        "ks.csv",
        format!(
            "fit,ks\nmodel_covariance,{}\nreplication_covariance,{}\n",
            fmt(ks_model),
            fmt(ks_empirical)
        ),
    );

    let mut sorted_stats = statistics.clone();
    sorted_stats.sort_by(f64::total_cmp);
    let mut sorted_model = model_sample;
    sorted_model.sort_by(f64::total_cmp);
    let mut sorted_emp = empirical_sample;
    sorted_emp.sort_by(f64::total_cmp);
    let mut quant = String::from("q,statistic,mixture_model,mixture_replication\n");
    for k in 1..20 {
        let q = k as f64 / 20.0;
        quant.push_str(&format!(
            "{q},{},{},{}\n",
            fmt(interpolated_quantile(&sorted_stats, q)),
            fmt(interpolated_quantile(&sorted_model, q)),
            fmt(interpolated_quantile(&sorted_emp, q)),
        ));
    }
    report.push_file("quantiles.csv", quant);
    report.push_file("failures.csv", failures_csv(&failures));
    report.summary = format!(
        "loss-mixture: {} replications, {} failed, ks(model) = {ks_model:.4}, ks(replication) = {ks_empirical:.4}",
        cfg.replications,
        failures.len()
    );
    Ok(report)
}

// ---------------------------------------------------------------------
// sysid
// ---------------------------------------------------------------------

const SYSID_RECORD_GRID: [usize; 4] = [500, 1000, 2000, 4000];

/// Least-squares identification errors across record counts under the
/// excited data-collection policy.
fn run_sysid(cfg: &ExperimentConfig, sys: &LqSystem) -> Result<ExperimentReport> {
    let factory = StreamFactory::new(cfg.seed);
    let zero_policy = Policy::uniform(
        sys.horizon(),
        sys.control_dim(),
        sys.state_dim(),
        0.0,
    );
    type RepOutcome = Vec<std::result::Result<(usize, f64, f64), String>>;
    let outcomes: Vec<RepOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let rep_u = rep as u64;
            SYSID_RECORD_GRID
                .iter()
                .enumerate()
                .map(|(ci, &records)| {
                    let mut rng = factory.stream(&[
                        label::REPLICATION,
                        rep_u,
                        label::MONTE_CARLO,
                        ci as u64,
                    ]);
                    let trajectories = records.div_ceil(sys.horizon());
                    let data = collect_sysid_data(
                        sys,
                        &zero_policy,
                        trajectories,
                        cfg.excitation,
                        &mut rng,
                    );
                    let (a_hat, b_hat) =
                        estimate_dynamics(&data).map_err(|e| e.to_string())?;
                    let a_err =
                        (a_hat - sys.a()).abs().sum() / (sys.state_dim() * sys.state_dim()) as f64;
                    let b_err =
                        (b_hat - sys.b()).abs().sum() / (sys.state_dim() * sys.control_dim()) as f64;
                    Ok((records, a_err, b_err))
                })
                .collect()
        })
        .collect();

    let mut report = ExperimentReport {
        replications: cfg.replications,
        ..Default::default()
    };
    let mut csv = String::from("replication,records,a_error,b_error\n");
    let mut failures = Vec::new();
    let mut per_count: Vec<Vec<(f64, f64)>> = vec![Vec::new(); SYSID_RECORD_GRID.len()];
    let mut any_ok = false;
    for (rep, cells) in outcomes.into_iter().enumerate() {
        for (ci, cell) in cells.into_iter().enumerate() {
            match cell {
                Ok((records, a_err, b_err)) => {
                    any_ok = true;
                    csv.push_str(&format!("{rep},{records},{},{}\n", fmt(a_err), fmt(b_err)));
                    per_count[ci].push((a_err, b_err));
                }
                Err(e) => failures.push((rep, e)),
            }
        }
    }
    if !any_ok {
        report.failed_replications = cfg.replications;
        return Err(LqError::SingularDesign {
            rank: 0,
            needed: sys.state_dim() + sys.control_dim(),
        });
    }
    report.push_file("sysid.csv", csv);

    let mut agg = String::from("records,a_error_mean,b_error_mean\n");
    for (ci, &records) in SYSID_RECORD_GRID.iter().enumerate() {
        if per_count[ci].is_empty() {
            continue;
        }
        let a: Vec<f64> = per_count[ci].iter().map(|x| x.0).collect();
        let b: Vec<f64> = per_count[ci].iter().map(|x| x.1).collect();
        agg.push_str(&format!(
            "{records},{},{}\n",
            fmt(mean_and_sd(&a).0),
            fmt(mean_and_sd(&b).0)
        ));
    }
    report.push_file("aggregate.csv", agg);
    report.push_file("failures.csv", failures_csv(&failures));
    report.summary = format!(
        "sysid: {} replications x {:?} records, {} cell failures",
        cfg.replications,
        SYSID_RECORD_GRID,
        failures.len()
    );
    Ok(report)
}


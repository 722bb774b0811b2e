//! Online multiplier bootstrap for the policy-gradient estimator.
//!
//! Alongside the main PG chain, `B` replica chains take the same gradient
//! steps scaled by i.i.d. positive weights with mean and variance one:
//!
//! `K'_(b) <- K'_(b) - eta_l W_{l,(b)} ghat(K'_(b); shared sample)`
//!
//! In exact mode the shared sample is the main chain's trajectory for that
//! iteration: each replica evaluates its own residual `E_t(K'_(b))` against
//! the shared `x_t x_t'`. In zeroth-order mode each replica draws its own
//! perturbations and trajectories from its own stream. The spread of the
//! replica averages around the main average estimates the sampling
//! distribution of the main average around the optimum, which yields
//! per-entry confidence intervals and norm-ball confidence sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{LqError, Result};
use crate::mat::{interpolated_quantile, normal_quantile};
use crate::pg::{
    step_size, stochastic_gradient_into, zeroth_order_gradient, GradientWorkspace, IterateLog,
    LogRow, PgConfig, PgMode, RunningAverage, DIVERGENCE_BOUND,
};
use crate::riccati::{analytic_cost, apply_step, solve_optimal, StageGradient};
use crate::stream::{label, StreamFactory};
use crate::system::{simulate_trajectory, LqSystem, Policy, Trajectory};

/// Fraction of replicas allowed to diverge before the whole run errors out.
pub const MAX_DIVERGED_FRACTION: f64 = 0.05;

/// Multiplier-weight distribution. All draws are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// `W ~ Exp(1)`: mean 1, variance 1.
    Exponential1,
    /// `W = |N(1, 1)|`: positive, but the folding biases the first two
    /// moments slightly; kept because it is a common choice whose coverage
    /// gap is itself of interest.
    AbsNormal11,
    /// `W = 1` always: replicas reproduce the main chain exactly.
    /// Diagnostic scheme.
    ConstantOne,
}

impl WeightScheme {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "exp1" => Ok(WeightScheme::Exponential1),
            "absnormal11" => Ok(WeightScheme::AbsNormal11),
            "const1" => Ok(WeightScheme::ConstantOne),
            other => Err(LqError::InvalidParameter(format!(
                "unknown weight scheme '{other}' (expected exp1 | absnormal11 | const1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Exponential1 => "exp1",
            WeightScheme::AbsNormal11 => "absnormal11",
            WeightScheme::ConstantOne => "const1",
        }
    }
}

/// One positive multiplier draw.
pub fn draw_weight<R: Rng + ?Sized>(scheme: WeightScheme, rng: &mut R) -> f64 {
    match scheme {
        WeightScheme::Exponential1 => Exp::new(1.0).unwrap().sample(rng),
        WeightScheme::AbsNormal11 => {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 + z).abs()
        }
        WeightScheme::ConstantOne => 1.0,
    }
}

/// One replica chain.
#[derive(Debug, Clone)]
struct Replica {
    policy: Policy,
    average: RunningAverage,
    diverged_at: Option<usize>,
}

/// Main chain plus `B` weighted replicas.
#[derive(Debug, Clone)]
pub struct BootstrapState {
    main: Policy,
    main_average: RunningAverage,
    replicas: Vec<Replica>,
}

impl BootstrapState {
    /// All chains start at the same initial policy.
    pub fn new(initial: &Policy, replica_count: usize) -> Self {
        Self {
            main: initial.clone(),
            main_average: RunningAverage::new(initial),
            replicas: (0..replica_count)
                .map(|_| Replica {
                    policy: initial.clone(),
                    average: RunningAverage::new(initial),
                    diverged_at: None,
                })
                .collect(),
        }
    }

    pub fn main(&self) -> &Policy {
        &self.main
    }

    pub fn main_average(&self) -> &RunningAverage {
        &self.main_average
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn replica_policy(&self, b: usize) -> &Policy {
        &self.replicas[b].policy
    }

    pub fn replica_average(&self, b: usize) -> &RunningAverage {
        &self.replicas[b].average
    }

    pub fn diverged_count(&self) -> usize {
        self.replicas.iter().filter(|r| r.diverged_at.is_some()).count()
    }

    /// Averages of replicas that never diverged.
    pub fn surviving_averages(&self) -> Vec<Policy> {
        self.replicas
            .iter()
            .filter(|r| r.diverged_at.is_none())
            .map(|r| r.average.mean().clone())
            .collect()
    }

    fn check_replica_loss(&self) -> Result<()> {
        let dropped = self.diverged_count();
        let total = self.replicas.len();
        if total > 0 && dropped as f64 > MAX_DIVERGED_FRACTION * total as f64 {
            return Err(LqError::ReplicaLoss {
                dropped,
                total,
                max_frac: MAX_DIVERGED_FRACTION * 100.0,
            });
        }
        Ok(())
    }
}

/// One exact-mode bootstrap iteration against a shared trajectory.
///
/// The main chain steps with weight 1 using its own residuals; replica `b`
/// steps with weight `weights[b]`, its own residuals, and the *shared*
/// states `x_t x_t'`. All running averages advance. Diverged replicas are
/// frozen and excluded from later confidence construction.
pub fn bootstrap_step_exact(
    sys: &LqSystem,
    state: &mut BootstrapState,
    eta: f64,
    shared: &Trajectory,
    main_gradient: &StageGradient,
    weights: &[f64],
    iteration: usize,
) -> Result<()> {
    let outers = stage_outer_products(sys, shared);
    let mut ws = GradientWorkspace::new(sys);
    let mut grad_buf = StageGradient::zeros_like(&state.main);
    step_exact_core(
        sys,
        state,
        eta,
        &outers,
        main_gradient,
        weights,
        iteration,
        true,
        &mut ws,
        &mut grad_buf,
    )
}

/// `x_t x_t'` for every decision stage of a trajectory.
pub fn stage_outer_products(sys: &LqSystem, traj: &Trajectory) -> Vec<DMatrix<f64>> {
    (0..sys.horizon())
        .map(|t| {
            let x = &traj.states[t];
            x * x.transpose()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn step_exact_core(
    sys: &LqSystem,
    state: &mut BootstrapState,
    eta: f64,
    state_outers: &[DMatrix<f64>],
    main_gradient: &StageGradient,
    weights: &[f64],
    iteration: usize,
    advance_averages: bool,
    ws: &mut GradientWorkspace,
    grad_buf: &mut StageGradient,
) -> Result<()> {
    debug_assert_eq!(weights.len(), state.replicas.len());
    apply_step(&mut state.main, main_gradient, eta);
    if !state.main.is_finite() || state.main.max_abs_entry() > DIVERGENCE_BOUND {
        return Err(LqError::Divergence {
            iteration,
            replica: None,
        });
    }
    if advance_averages {
        state.main_average.update(&state.main);
    }
    for (b, replica) in state.replicas.iter_mut().enumerate() {
        if replica.diverged_at.is_some() {
            continue;
        }
        stochastic_gradient_into(sys, &replica.policy, state_outers, ws, grad_buf);
        apply_step(&mut replica.policy, grad_buf, eta * weights[b]);
        if !replica.policy.is_finite() || replica.policy.max_abs_entry() > DIVERGENCE_BOUND {
            replica.diverged_at = Some(iteration);
            continue;
        }
        if advance_averages {
            replica.average.update(&replica.policy);
        }
    }
    state.check_replica_loss()
}

/// Per-replica random streams: weights always, plus an auxiliary stream for
/// zeroth-order perturbations and trajectories.
pub struct ReplicaStreams {
    pub weights: Vec<ChaCha12Rng>,
    pub aux: Vec<ChaCha12Rng>,
}

impl ReplicaStreams {
    pub fn from_factory(factory: &StreamFactory, path: &[u64], replicas: usize) -> Self {
        let mut weights = Vec::with_capacity(replicas);
        let mut aux = Vec::with_capacity(replicas);
        for b in 0..replicas {
            let mut wp = path.to_vec();
            wp.extend_from_slice(&[label::WEIGHTS, b as u64]);
            weights.push(factory.stream(&wp));
            let mut ap = path.to_vec();
            ap.extend_from_slice(&[label::ZEROTH_ORDER, b as u64]);
            aux.push(factory.stream(&ap));
        }
        Self { weights, aux }
    }

    pub fn replica_count(&self) -> usize {
        self.weights.len()
    }
}

/// Output of a bootstrap run.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub main_average: RunningAverage,
    pub main_final: Policy,
    /// Replica averages in replica order, `None` where the replica diverged.
    pub replica_averages: Vec<Option<Policy>>,
    pub log: IterateLog,
    pub skipped_steps: usize,
}

impl BootstrapRun {
    pub fn surviving_averages(&self) -> Vec<Policy> {
        self.replica_averages.iter().flatten().cloned().collect()
    }
}

/// Run the bootstrapped policy-gradient chain.
///
/// Per iteration: one shared sample is drawn from `main_rng` (exact mode: a
/// trajectory under the current main policy; zeroth-order mode: the main
/// chain's own perturbation batch), the step size comes from the main
/// chain's descent context, then every replica advances with its own weight
/// draw. With zero replicas the output reproduces `pg::run_pg` exactly.
pub fn run_bootstrap_pg(
    sys: &LqSystem,
    cfg: &PgConfig,
    scheme: WeightScheme,
    main_rng: &mut ChaCha12Rng,
    replica_streams: &mut ReplicaStreams,
) -> Result<BootstrapRun> {
    cfg.validate()?;
    let replica_count = replica_streams.replica_count();
    let (_, kstar) = solve_optimal(sys)?;
    let kstar_cost = analytic_cost(sys, &kstar);
    let mut state = BootstrapState::new(&cfg.initial_policy, replica_count);
    let mut log = IterateLog::default();
    let mut skipped_steps = 0usize;
    let mut weights = vec![0.0f64; replica_count];
    let mut ws = GradientWorkspace::new(sys);
    let mut grad_buf = StageGradient::zeros_like(&cfg.initial_policy);
    for iteration in 1..=cfg.iterations {
        let current_cost = analytic_cost(sys, &state.main);
        if !current_cost.is_finite() {
            return Err(LqError::Divergence {
                iteration,
                replica: None,
            });
        }
        match cfg.mode {
            PgMode::Exact => {
                let shared = simulate_trajectory(sys, &state.main, main_rng);
                let outers = stage_outer_products(sys, &shared);
                let mut main_grad = StageGradient::zeros_like(&state.main);
                stochastic_gradient_into(sys, &state.main, &outers, &mut ws, &mut main_grad);
                let eta = match step_size(
                    &cfg.schedule,
                    iteration,
                    sys,
                    &state.main,
                    &main_grad,
                    current_cost,
                ) {
                    Ok(eta) => eta,
                    Err(LqError::StepFailure { .. }) => {
                        skipped_steps += 1;
                        0.0
                    }
                    Err(e) => return Err(e),
                };
                for (b, w) in weights.iter_mut().enumerate() {
                    *w = draw_weight(scheme, &mut replica_streams.weights[b]);
                }
                step_exact_core(
                    sys,
                    &mut state,
                    eta,
                    &outers,
                    &main_grad,
                    &weights,
                    iteration,
                    iteration > cfg.burn_in,
                    &mut ws,
                    &mut grad_buf,
                )?;
            }
            PgMode::ZerothOrder {
                radius,
                directions,
                common_random_numbers,
            } => {
                let main_grad = StageGradient::new(
                    (0..sys.horizon())
                        .map(|t| {
                            zeroth_order_gradient(
                                sys,
                                &state.main,
                                t,
                                radius,
                                directions,
                                common_random_numbers,
                                main_rng,
                            )
                        })
                        .collect(),
                );
                let eta = match step_size(
                    &cfg.schedule,
                    iteration,
                    sys,
                    &state.main,
                    &main_grad,
                    current_cost,
                ) {
                    Ok(eta) => eta,
                    Err(LqError::StepFailure { .. }) => {
                        skipped_steps += 1;
                        0.0
                    }
                    Err(e) => return Err(e),
                };
                apply_step(&mut state.main, &main_grad, eta);
                if !state.main.is_finite() || state.main.max_abs_entry() > DIVERGENCE_BOUND {
                    return Err(LqError::Divergence {
                        iteration,
                        replica: None,
                    });
                }
                if iteration > cfg.burn_in {
                    state.main_average.update(&state.main);
                }
                for b in 0..replica_count {
                    if state.replicas[b].diverged_at.is_some() {
                        continue;
                    }
                    let w = draw_weight(scheme, &mut replica_streams.weights[b]);
                    let pol = state.replicas[b].policy.clone();
                    let grad = StageGradient::new(
                        (0..sys.horizon())
                            .map(|t| {
                                zeroth_order_gradient(
                                    sys,
                                    &pol,
                                    t,
                                    radius,
                                    directions,
                                    common_random_numbers,
                                    &mut replica_streams.aux[b],
                                )
                            })
                            .collect(),
                    );
                    let replica = &mut state.replicas[b];
                    apply_step(&mut replica.policy, &grad, eta * w);
                    if !replica.policy.is_finite()
                        || replica.policy.max_abs_entry() > DIVERGENCE_BOUND
                    {
                        replica.diverged_at = Some(iteration);
                        continue;
                    }
                    if iteration > cfg.burn_in {
                        replica.average.update(&replica.policy);
                    }
                }
                state.check_replica_loss()?;
            }
        }
        if iteration % cfg.record_every == 0 {
            let kbar = state.main_average.mean();
            let cost = analytic_cost(sys, kbar);
            log.rows.push(LogRow {
                iteration,
                bias_l1: kbar.l1_distance(&kstar),
                cost,
                normalized_error: (cost - kstar_cost) / kstar_cost,
            });
        }
    }
    Ok(BootstrapRun {
        main_average: state.main_average.clone(),
        main_final: state.main.clone(),
        replica_averages: state
            .replicas
            .iter()
            .map(|r| {
                if r.diverged_at.is_none() {
                    Some(r.average.mean().clone())
                } else {
                    None
                }
            })
            .collect(),
        log,
        skipped_steps,
    })
}

/// Confidence-interval construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiMethod {
    /// Empirical quantiles of the replica deltas around the main average.
    Quantile,
    /// Normal interval from the replica standard deviation.
    StdError,
}

impl CiMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CiMethod::Quantile => "rw-q",
            CiMethod::StdError => "rw-sigma",
        }
    }
}

/// One per-entry confidence interval.
#[derive(Debug, Clone)]
pub struct CiRow {
    pub stage: usize,
    pub row: usize,
    pub col: usize,
    pub method: CiMethod,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
}

/// Entrywise confidence intervals for every stage gain.
#[derive(Debug, Clone, Default)]
pub struct CiTable {
    pub rows: Vec<CiRow>,
}

impl CiTable {
    pub fn stage_rows(&self, stage: usize) -> impl Iterator<Item = &CiRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    /// CSV with optional truth columns.
    pub fn to_csv(&self, truth: Option<&Policy>) -> String {
        let mut out =
            String::from("t,row,col,method,level,lower,upper,point_estimate,true_value,covered\n");
        for r in &self.rows {
            let (truth_str, covered_str) = match truth {
                Some(k) => {
                    let v = k.stage(r.stage)[(r.row, r.col)];
                    let covered = r.lower <= v && v <= r.upper;
                    (format!("{v:.16e}"), format!("{}", covered as u8))
                }
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{:.2},{:.16e},{:.16e},{:.16e},{},{}\n",
                r.stage,
                r.row,
                r.col,
                r.method.name(),
                r.level,
                r.lower,
                r.upper,
                r.point,
                truth_str,
                covered_str
            ));
        }
        out
    }
}

/// Entrywise confidence intervals from the replica averages.
///
/// Quantile method: `[Kbar + q_{a/2}, Kbar + q_{1-a/2}]` where the
/// quantiles interpolate the order statistics of the replica deltas.
/// Std-error method: `Kbar +- z_{1-a/2} * sd(replica averages)`.
pub fn confidence_intervals(
    main_average: &Policy,
    replica_averages: &[Policy],
    method: CiMethod,
    level: f64,
) -> Result<CiTable> {
    if replica_averages.len() < 2 {
        return Err(LqError::InsufficientReplicas(replica_averages.len()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(LqError::InvalidParameter(format!(
            "confidence level must be in (0,1), got {level}"
        )));
    }
    let alpha = 1.0 - level;
    let mut table = CiTable::default();
    let b = replica_averages.len();
    let mut deltas = vec![0.0f64; b];
    for t in 0..main_average.horizon() {
        let point_stage = main_average.stage(t);
        for i in 0..point_stage.nrows() {
            for j in 0..point_stage.ncols() {
                let point = point_stage[(i, j)];
                for (k, rep) in replica_averages.iter().enumerate() {
                    deltas[k] = rep.stage(t)[(i, j)] - point;
                }
                let (lower, upper) = match method {
                    CiMethod::Quantile => {
                        deltas.sort_by(f64::total_cmp);
                        (
                            point + interpolated_quantile(&deltas, alpha / 2.0),
                            point + interpolated_quantile(&deltas, 1.0 - alpha / 2.0),
                        )
                    }
                    CiMethod::StdError => {
                        let mean = deltas.iter().sum::<f64>() / b as f64;
                        let var = deltas
                            .iter()
                            .map(|d| (d - mean) * (d - mean))
                            .sum::<f64>()
                            / (b - 1) as f64;
                        let half = normal_quantile(1.0 - alpha / 2.0) * var.sqrt();
                        (point - half, point + half)
                    }
                };
                table.rows.push(CiRow {
                    stage: t,
                    row: i,
                    col: j,
                    method,
                    level,
                    lower,
                    upper,
                    point,
                });
            }
        }
    }
    Ok(table)
}

/// Norm-ball confidence set for one stage's vectorized gain.
#[derive(Debug, Clone)]
pub struct ConfidenceSet {
    pub stage: usize,
    pub shape: DMatrix<f64>,
    pub radius: f64,
    pub center: DVector<f64>,
    pub iterations: usize,
}

impl ConfidenceSet {
    /// Membership: `sqrt(n) |D (vec K - center)| <= radius`.
    pub fn contains(&self, gain: &DMatrix<f64>) -> bool {
        let v = DVector::from_column_slice(gain.as_slice());
        let dev = &self.shape * (v - &self.center);
        (self.iterations as f64).sqrt() * dev.norm() <= self.radius
    }
}

/// Build the confidence set at `stage`: the radius is the empirical
/// `(1 - alpha)`-quantile of `sqrt(n) |D (vec Kbar'_(b) - vec Kbar)|`.
pub fn confidence_set(
    main_average: &Policy,
    replica_averages: &[Policy],
    stage: usize,
    shape: &DMatrix<f64>,
    alpha: f64,
    iterations: usize,
) -> Result<ConfidenceSet> {
    if replica_averages.len() < 2 {
        return Err(LqError::InsufficientReplicas(replica_averages.len()));
    }
    let center = DVector::from_column_slice(main_average.stage(stage).as_slice());
    let root_n = (iterations as f64).sqrt();
    let mut norms: Vec<f64> = replica_averages
        .iter()
        .map(|rep| {
            let v = DVector::from_column_slice(rep.stage(stage).as_slice());
            root_n * (shape * (v - &center)).norm()
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    let radius = interpolated_quantile(&norms, 1.0 - alpha);
    Ok(ConfidenceSet {
        stage,
        shape: shape.clone(),
        radius,
        center,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::mean_and_sd;
    use crate::pg::{run_pg, stochastic_gradient_at, StepSchedule};
    use crate::presets::{benchmark_4x2, benchmark_initial_policy, scalar_1x1};
    use crate::stream::StreamFactory;

    #[test]
    fn exp1_weights_have_unit_moments() {
        let mut rng = StreamFactory::new(40).stream(&[0]);
        let n = 1_000_000usize;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_weight(WeightScheme::Exponential1, &mut rng))
            .collect();
        let (mean, sd) = mean_and_sd(&draws);
        assert!((mean - 1.0).abs() < 0.004, "mean {mean}");
        assert!((sd * sd - 1.0).abs() < 0.01, "variance {}", sd * sd);
        assert!(draws.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn absnormal_weights_match_folded_normal_mean() {
        // Oracle: E|N(1,1)| by Simpson quadrature of |x| phi(x-1).
        let quad = {
            let f = |x: f64| {
                x.abs() * (-(x - 1.0) * (x - 1.0) / 2.0).exp()
                    / (2.0 * std::f64::consts::PI).sqrt()
            };
            let (a, b, n) = (-12.0f64, 14.0f64, 40_000usize);
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mut rng = StreamFactory::new(41).stream(&[0]);
        let n = 1_000_000usize;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_weight(WeightScheme::AbsNormal11, &mut rng))
            .collect();
        assert!(draws.iter().all(|&w| w > 0.0));
        let (mean, _) = mean_and_sd(&draws);
        assert!(
            (mean - quad).abs() < 0.004,
            "sample mean {mean} vs quadrature {quad}"
        );
    }

    fn small_cfg(sys: &crate::system::LqSystem, n: usize) -> PgConfig {
        PgConfig {
            iterations: n,
            schedule: StepSchedule::default_line_search(),
            initial_policy: benchmark_initial_policy(sys),
            mode: PgMode::Exact,
            record_every: n.max(1),
            burn_in: 0,
        }
    }

    #[test]
    fn unit_weights_reproduce_the_main_chain() {
        let sys = benchmark_4x2();
        let cfg = small_cfg(&sys, 40);
        let factory = StreamFactory::new(42);
        let mut main_rng = factory.stream(&[label::MAIN_CHAIN]);
        let mut streams = ReplicaStreams::from_factory(&factory, &[7], 5);
        let run =
            run_bootstrap_pg(&sys, &cfg, WeightScheme::ConstantOne, &mut main_rng, &mut streams)
                .unwrap();
        for rep in run.replica_averages.iter().flatten() {
            assert_eq!(rep, run.main_average.mean());
        }
    }

    #[test]
    fn zero_step_leaves_state_unchanged_but_advances_averages() {
        let sys = benchmark_4x2();
        let k0 = benchmark_initial_policy(&sys);
        let mut state = BootstrapState::new(&k0, 3);
        let mut rng = StreamFactory::new(43).stream(&[0]);
        let shared = simulate_trajectory(&sys, &k0, &mut rng);
        let grad = stochastic_gradient_at(&sys, &k0, &shared);
        bootstrap_step_exact(&sys, &mut state, 0.0, &shared, &grad, &[2.0, 0.5, 1.5], 1).unwrap();
        assert_eq!(state.main(), &k0);
        for b in 0..3 {
            assert_eq!(state.replica_policy(b), &k0);
            assert_eq!(state.replica_average(b).count(), 1);
            assert_eq!(state.replica_average(b).mean(), &k0);
        }
    }

    #[test]
    fn bootstrap_without_replicas_matches_run_pg() {
        let sys = benchmark_4x2();
        let cfg = small_cfg(&sys, 60);
        let factory = StreamFactory::new(44);
        let mut main_rng = factory.stream(&[label::MAIN_CHAIN]);
        let mut streams = ReplicaStreams::from_factory(&factory, &[9], 0);
        let boot = run_bootstrap_pg(
            &sys,
            &cfg,
            WeightScheme::Exponential1,
            &mut main_rng,
            &mut streams,
        )
        .unwrap();
        let plain = run_pg(&sys, &cfg, &mut factory.stream(&[label::MAIN_CHAIN])).unwrap();
        assert_eq!(boot.main_final, plain.final_policy);
        assert_eq!(boot.main_average.mean(), plain.average.mean());
        assert_eq!(boot.log, plain.log);
    }

    #[test]
    fn same_seed_gives_bit_identical_replica_averages() {
        let sys = benchmark_4x2();
        let cfg = small_cfg(&sys, 30);
        let factory = StreamFactory::new(45);
        let run = |f: &StreamFactory| {
            let mut main_rng = f.stream(&[label::MAIN_CHAIN]);
            let mut streams = ReplicaStreams::from_factory(f, &[11], 8);
            run_bootstrap_pg(
                &sys,
                &cfg,
                WeightScheme::Exponential1,
                &mut main_rng,
                &mut streams,
            )
            .unwrap()
        };
        let a = run(&factory);
        let b = run(&factory);
        for (x, y) in a.replica_averages.iter().zip(&b.replica_averages) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn permuting_weight_streams_permutes_replicas() {
        let sys = benchmark_4x2();
        let cfg = small_cfg(&sys, 25);
        let factory = StreamFactory::new(46);
        let mut main_rng = factory.stream(&[label::MAIN_CHAIN]);
        let mut streams = ReplicaStreams::from_factory(&factory, &[13], 4);
        let a = run_bootstrap_pg(
            &sys,
            &cfg,
            WeightScheme::Exponential1,
            &mut main_rng,
            &mut streams,
        )
        .unwrap();

        // Swap replica streams 0 and 3 by hand.
        let mut main_rng = factory.stream(&[label::MAIN_CHAIN]);
        let mut streams = ReplicaStreams::from_factory(&factory, &[13], 4);
        streams.weights.swap(0, 3);
        streams.aux.swap(0, 3);
        let b = run_bootstrap_pg(
            &sys,
            &cfg,
            WeightScheme::Exponential1,
            &mut main_rng,
            &mut streams,
        )
        .unwrap();
        assert_eq!(a.replica_averages[0], b.replica_averages[3]);
        assert_eq!(a.replica_averages[3], b.replica_averages[0]);
        assert_eq!(a.replica_averages[1], b.replica_averages[1]);
    }

    #[test]
    fn quantile_ci_hand_example() {
        let sys = scalar_1x1();
        let main = Policy::uniform(sys.horizon(), 1, 1, 2.0);
        let lo = Policy::uniform(sys.horizon(), 1, 1, 1.0);
        let hi = Policy::uniform(sys.horizon(), 1, 1, 3.0);
        let table = confidence_intervals(&main, &[lo, hi], CiMethod::Quantile, 0.5).unwrap();
        for row in &table.rows {
            assert!((row.lower - 1.5).abs() < 1e-12);
            assert!((row.upper - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_replicas_collapse_both_ci_methods() {
        let main = Policy::uniform(3, 2, 2, 0.7);
        let reps = vec![main.clone(), main.clone(), main.clone()];
        for method in [CiMethod::Quantile, CiMethod::StdError] {
            let table = confidence_intervals(&main, &reps, method, 0.95).unwrap();
            for row in &table.rows {
                assert!((row.lower - 0.7).abs() < 1e-12);
                assert!((row.upper - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ci_needs_two_replicas() {
        let main = Policy::uniform(2, 1, 1, 0.0);
        match confidence_intervals(&main, &[main.clone()], CiMethod::Quantile, 0.9) {
            Err(LqError::InsufficientReplicas(1)) => {}
            other => panic!("expected insufficient replicas, got {other:?}"),
        }
    }

    #[test]
    fn quantile_ci_widens_with_level() {
        let mut rng = StreamFactory::new(47).stream(&[0]);
        let main = Policy::uniform(2, 1, 1, 0.0);
        let reps: Vec<Policy> = (0..64)
            .map(|_| Policy::uniform(2, 1, 1, rng.random_range(-1.0..1.0)))
            .collect();
        let narrow = confidence_intervals(&main, &reps, CiMethod::Quantile, 0.5).unwrap();
        let wide = confidence_intervals(&main, &reps, CiMethod::Quantile, 0.95).unwrap();
        for (n, w) in narrow.rows.iter().zip(&wide.rows) {
            assert!(w.lower <= n.lower + 1e-15);
            assert!(w.upper >= n.upper - 1e-15);
        }
    }

    #[test]
    fn stderr_ci_width_scales_linearly_with_spread() {
        let main = Policy::uniform(1, 1, 1, 0.0);
        let deltas = [-0.5, 0.3, 0.9, -1.1, 0.2];
        let reps: Vec<Policy> = deltas
            .iter()
            .map(|&d| Policy::uniform(1, 1, 1, d))
            .collect();
        let scaled: Vec<Policy> = deltas
            .iter()
            .map(|&d| Policy::uniform(1, 1, 1, 3.0 * d))
            .collect();
        let a = confidence_intervals(&main, &reps, CiMethod::StdError, 0.95).unwrap();
        let b = confidence_intervals(&main, &scaled, CiMethod::StdError, 0.95).unwrap();
        let wa = a.rows[0].upper - a.rows[0].lower;
        let wb = b.rows[0].upper - b.rows[0].lower;
        assert!((wb - 3.0 * wa).abs() < 1e-12);
    }

    #[test]
    fn confidence_set_degenerate_cases() {
        let main = Policy::uniform(2, 2, 2, 0.5);
        let reps = vec![main.clone(), main.clone(), main.clone()];
        let eye = DMatrix::identity(4, 4);
        let set = confidence_set(&main, &reps, 1, &eye, 0.05, 1000).unwrap();
        assert_eq!(set.radius, 0.0);
        assert!(set.contains(main.stage(1)));
        let mut off = main.stage(1).clone();
        off[(0, 0)] += 1e-6;
        assert!(!set.contains(&off));

        // D = 0 collapses the norm: everything is inside.
        let zero = DMatrix::zeros(4, 4);
        let set = confidence_set(&main, &reps, 1, &zero, 0.05, 1000).unwrap();
        assert_eq!(set.radius, 0.0);
        assert!(set.contains(&(main.stage(1) + DMatrix::from_element(2, 2, 17.0))));
    }
}

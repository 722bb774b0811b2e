//! Stochastic policy-gradient optimizers with Polyak-Ruppert averaging.
//!
//! Exact mode follows the single-trajectory update
//! `vec{K_t} <- vec{K_t} - 2 eta vec{E_t(K_t) x_t x_t'}` with all stages
//! stepped simultaneously from one simulated trajectory per iteration.
//! Zeroth-order mode replaces the gradient sample with the uniform-smoothing
//! estimator `(3 / (r^2 m)) sum_i (c(K + U_i) - c(K)) U_i` built per stage
//! from single-trajectory costs.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{LqError, Result};
use crate::riccati::{
    analytic_cost, analytic_cost_with_values, apply_step, evaluate_policy, exact_gradient,
    residual, solve_optimal, StageGradient,
};
use crate::system::{
    cost_with_record, draw_noise_record, sample_cost, simulate_trajectory, LqSystem, Policy,
    Trajectory,
};

/// Policies whose entries exceed this bound abort the run as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Maximum backtracking halvings before a line search gives up.
pub const MAX_HALVINGS: usize = 60;

/// Step-size rule.
#[derive(Debug, Clone)]
pub enum StepSchedule {
    /// `eta_l = c0 * l^(-alpha)` with `alpha` in `[1/2, 1)`.
    Polynomial { c0: f64, alpha: f64 },
    /// Backtracking from `eta_max` until the Armijo condition
    /// `C(K - eta g) <= C(K) - c_armijo * eta * |g|^2` holds.
    LineSearch {
        shrink: f64,
        c_armijo: f64,
        eta_max: f64,
    },
}

impl StepSchedule {
    pub fn default_line_search() -> Self {
        StepSchedule::LineSearch {
            shrink: 0.5,
            c_armijo: 0.1,
            eta_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepSchedule::Polynomial { c0, alpha } => {
                if *c0 <= 0.0 {
                    return Err(LqError::InvalidParameter(format!(
                        "polynomial step needs c0 > 0, got {c0}"
                    )));
                }
                if !(0.5..1.0).contains(alpha) {
                    return Err(LqError::InvalidParameter(format!(
                        "polynomial step needs alpha in [1/2, 1), got {alpha}"
                    )));
                }
            }
            StepSchedule::LineSearch {
                shrink,
                c_armijo,
                eta_max,
            } => {
                if !(0.0 < *shrink && *shrink < 1.0) {
                    return Err(LqError::InvalidParameter("shrink must be in (0,1)".into()));
                }
                if !(0.0 < *c_armijo && *c_armijo < 1.0) {
                    return Err(LqError::InvalidParameter(
                        "c_armijo must be in (0,1)".into(),
                    ));
                }
                if *eta_max <= 0.0 {
                    return Err(LqError::InvalidParameter("eta_max must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Gradient estimation mode.
#[derive(Debug, Clone)]
pub enum PgMode {
    Exact,
    ZerothOrder {
        radius: f64,
        directions: usize,
        /// Reuse the perturbed trajectory's initial state and noise for the
        /// baseline cost instead of an independent trajectory.
        common_random_numbers: bool,
    },
}

/// Optimizer configuration.
#[derive(Debug, Clone)]
pub struct PgConfig {
    pub iterations: usize,
    pub schedule: StepSchedule,
    pub initial_policy: Policy,
    pub mode: PgMode,
    pub record_every: usize,
    /// Iterations discarded before averaging starts (default 0: average
    /// everything from the first iterate).
    pub burn_in: usize,
}

impl PgConfig {
    pub fn new(iterations: usize, schedule: StepSchedule, initial_policy: Policy) -> Self {
        Self {
            iterations,
            schedule,
            initial_policy,
            mode: PgMode::Exact,
            record_every: 1,
            burn_in: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.record_every == 0 {
            return Err(LqError::InvalidParameter("record_every must be >= 1".into()));
        }
        match self.mode {
            PgMode::Exact => {}
            PgMode::ZerothOrder {
                radius, directions, ..
            } => {
                if radius <= 0.0 {
                    return Err(LqError::InvalidParameter(
                        "perturbation radius must be > 0".into(),
                    ));
                }
                if directions == 0 {
                    return Err(LqError::InvalidParameter(
                        "need at least one perturbation direction".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Running Polyak-Ruppert mean of the iterates, maintained by
/// `mean <- (l * mean + K) / (l + 1)`.
#[derive(Debug, Clone)]
pub struct RunningAverage {
    count: usize,
    mean: Policy,
}

impl RunningAverage {
    /// Starts empty; by convention the mean of zero updates is the policy
    /// the optimizer started from.
    pub fn new(start: &Policy) -> Self {
        Self {
            count: 0,
            mean: start.clone(),
        }
    }

    pub fn update(&mut self, iterate: &Policy) {
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for t in 0..self.mean.horizon() {
            let m = self.mean.stage_mut(t);
            for (m, k) in m.as_mut_slice().iter_mut().zip(iterate.stage(t).as_slice()) {
                *m = (1.0 - w) * *m + w * k;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &Policy {
        &self.mean
    }
}

/// One row of the optimizer log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// `|vec(Kbar) - vec(K*)|_1` over all stages.
    pub bias_l1: f64,
    /// Expected cost of the averaged policy.
    pub cost: f64,
    /// `(C(Kbar) - C(K*)) / C(K*)`.
    pub normalized_error: f64,
}

/// Iteration log of the averaged iterate against the Riccati ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterateLog {
    pub rows: Vec<LogRow>,
}

impl IterateLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,bias_l1,cost,normalized_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.iteration, r.bias_l1, r.cost, r.normalized_error
            ));
        }
        out
    }
}

/// Result of one optimizer run.
#[derive(Debug, Clone)]
pub struct PgRun {
    pub final_policy: Policy,
    pub average: RunningAverage,
    pub log: IterateLog,
    /// Iterations where backtracking exhausted its halvings (the sampled
    /// direction was not a descent direction) and the step was skipped.
    pub skipped_steps: usize,
}

/// Step size for iteration `l >= 1`. For line search, the descent context is
/// the current policy, the proposed direction, and the current cost.
pub fn step_size(
    schedule: &StepSchedule,
    iteration: usize,
    sys: &LqSystem,
    pol: &Policy,
    direction: &StageGradient,
    current_cost: f64,
) -> Result<f64> {
    match schedule {
        StepSchedule::Polynomial { c0, alpha } => Ok(c0 * (iteration as f64).powf(-alpha)),
        StepSchedule::LineSearch {
            shrink,
            c_armijo,
            eta_max,
        } => {
            let norm_sq = direction.norm_squared();
            if norm_sq == 0.0 {
                return Ok(*eta_max);
            }
            let mut eta = *eta_max;
            for _ in 0..=MAX_HALVINGS {
                let mut cand = pol.clone();
                apply_step(&mut cand, direction, eta);
                let c = analytic_cost(sys, &cand);
                // Strict inequality: once the sufficient-decrease margin
                // underflows against the cost, the step is not progress.
                if c.is_finite() && c < current_cost - c_armijo * eta * norm_sq {
                    return Ok(eta);
                }
                eta *= shrink;
            }
            Err(LqError::StepFailure {
                iteration,
                halvings: MAX_HALVINGS,
            })
        }
    }
}

/// One-trajectory stochastic gradient: simulates under `pol` and returns
/// `2 E_t(K_t) x_t x_t'` per stage, all stages from the same trajectory.
pub fn stochastic_gradient<R: Rng + ?Sized>(
    sys: &LqSystem,
    pol: &Policy,
    rng: &mut R,
) -> (StageGradient, Trajectory) {
    let traj = simulate_trajectory(sys, pol, rng);
    let grad = stochastic_gradient_at(sys, pol, &traj);
    (grad, traj)
}

/// The exact-mode gradient sample of `pol` against an already-simulated
/// trajectory's states (used with shared samples in the bootstrap).
pub fn stochastic_gradient_at(sys: &LqSystem, pol: &Policy, traj: &Trajectory) -> StageGradient {
    let values = evaluate_policy(sys, pol);
    let stages = (0..sys.horizon())
        .map(|t| {
            let e = residual(sys, values.stage(t + 1), pol.stage(t), sys.r(t));
            let x = &traj.states[t];
            2.0 * e * (x * x.transpose())
        })
        .collect();
    StageGradient::new(stages)
}

/// Reusable buffers for the exact-mode gradient sample. The bootstrap
/// evaluates hundreds of replica chains per iteration against the same
/// shared states; going through this workspace keeps that loop free of
/// heap allocation.
#[derive(Debug, Clone)]
pub struct GradientWorkspace {
    values: Vec<DMatrix<f64>>,
    closed: DMatrix<f64>,
    scratch: DMatrix<f64>,
    tmp_dd: DMatrix<f64>,
    tmp_pd: DMatrix<f64>,
    btp: DMatrix<f64>,
    curvature: DMatrix<f64>,
    residual: DMatrix<f64>,
}

impl GradientWorkspace {
    pub fn new(sys: &LqSystem) -> Self {
        let d = sys.state_dim();
        let p = sys.control_dim();
        Self {
            values: vec![DMatrix::zeros(d, d); sys.horizon() + 1],
            closed: DMatrix::zeros(d, d),
            scratch: DMatrix::zeros(d, d),
            tmp_dd: DMatrix::zeros(d, d),
            tmp_pd: DMatrix::zeros(p, d),
            btp: DMatrix::zeros(p, d),
            curvature: DMatrix::zeros(p, p),
            residual: DMatrix::zeros(p, d),
        }
    }

    fn backward_pass(&mut self, sys: &LqSystem, pol: &Policy) {
        let horizon = sys.horizon();
        self.values[horizon].copy_from(sys.q(horizon));
        for t in (0..horizon).rev() {
            let k = pol.stage(t);
            self.closed.copy_from(sys.a());
            self.closed.gemm(-1.0, sys.b(), k, 1.0);
            self.tmp_dd.gemm(1.0, &self.values[t + 1], &self.closed, 0.0);
            self.tmp_pd.gemm(1.0, sys.r(t), k, 0.0);
            self.scratch.copy_from(sys.q(t));
            self.scratch.gemm_tr(1.0, &self.closed, &self.tmp_dd, 1.0);
            self.scratch.gemm_tr(1.0, k, &self.tmp_pd, 1.0);
            crate::mat::symmetrize_in_place(&mut self.scratch);
            self.values[t].copy_from(&self.scratch);
        }
    }

    fn stage_residual(&mut self, sys: &LqSystem, pol: &Policy, t: usize) {
        self.btp.gemm_tr(1.0, sys.b(), &self.values[t + 1], 0.0);
        self.curvature.copy_from(sys.r(t));
        self.curvature.gemm(1.0, &self.btp, sys.b(), 1.0);
        self.residual.gemm(1.0, &self.curvature, pol.stage(t), 0.0);
        self.residual.gemm(-1.0, &self.btp, sys.a(), 1.0);
    }
}

/// Allocation-free variant of `stochastic_gradient_at` against precomputed
/// per-stage state outer products `x_t x_t'`.
pub fn stochastic_gradient_into(
    sys: &LqSystem,
    pol: &Policy,
    state_outers: &[DMatrix<f64>],
    ws: &mut GradientWorkspace,
    out: &mut StageGradient,
) {
    ws.backward_pass(sys, pol);
    for t in 0..sys.horizon() {
        ws.stage_residual(sys, pol, t);
        out.stage_mut(t).gemm(2.0, &ws.residual, &state_outers[t], 0.0);
    }
}

/// Zeroth-order gradient estimate for stage `t`:
/// `(3 / (r^2 m)) sum_i (c(K_{-t}, K_t + U_i) - c(K)) U_i` with entries of
/// each `U_i` i.i.d. uniform on `[-r, r]` and single-trajectory costs.
pub fn zeroth_order_gradient<R: Rng + ?Sized>(
    sys: &LqSystem,
    pol: &Policy,
    stage: usize,
    radius: f64,
    directions: usize,
    common_random_numbers: bool,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = sys.control_dim();
    let d = sys.state_dim();
    let mut acc = DMatrix::zeros(p, d);
    let mut perturbed = pol.clone();
    for _ in 0..directions {
        let u = DMatrix::from_fn(p, d, |_, _| rng.random_range(-radius..=radius));
        perturbed.stage_mut(stage).copy_from(&(pol.stage(stage) + &u));
        let record = draw_noise_record(sys, rng);
        let cost_perturbed = cost_with_record(sys, &perturbed, &record);
        let cost_base = if common_random_numbers {
            cost_with_record(sys, pol, &record)
        } else {
            sample_cost(sys, pol, rng)
        };
        acc += u * (cost_perturbed - cost_base);
    }
    acc * (3.0 / (radius * radius * directions as f64))
}

fn zeroth_order_full_gradient<R: Rng + ?Sized>(
    sys: &LqSystem,
    pol: &Policy,
    radius: f64,
    directions: usize,
    crn: bool,
    rng: &mut R,
) -> StageGradient {
    let stages = (0..sys.horizon())
        .map(|t| zeroth_order_gradient(sys, pol, t, radius, directions, crn, rng))
        .collect();
    StageGradient::new(stages)
}

fn check_finite(pol: &Policy, iteration: usize) -> Result<()> {
    if !pol.is_finite() || pol.max_abs_entry() > DIVERGENCE_BOUND {
        return Err(LqError::Divergence {
            iteration,
            replica: None,
        });
    }
    Ok(())
}

/// Run the policy-gradient optimizer.
///
/// Iteration `l = 1..=n`: draw one gradient sample at the current policy
/// (mode-dependent), pick `eta_l`, step every stage simultaneously, advance
/// the running average, and log every `record_every` iterations.
pub fn run_pg<R: Rng + ?Sized>(sys: &LqSystem, cfg: &PgConfig, rng: &mut R) -> Result<PgRun> {
    cfg.validate()?;
    let (_, kstar) = solve_optimal(sys)?;
    let kstar_cost = analytic_cost(sys, &kstar);
    let mut pol = cfg.initial_policy.clone();
    check_finite(&pol, 0)?;
    if !analytic_cost(sys, &pol).is_finite() {
        return Err(LqError::InvalidParameter(
            "initial policy has non-finite cost".into(),
        ));
    }
    let mut average = RunningAverage::new(&pol);
    let mut log = IterateLog::default();
    let mut skipped_steps = 0usize;
    let mut ws = GradientWorkspace::new(sys);
    let mut grad = StageGradient::zeros_like(&pol);
    for iteration in 1..=cfg.iterations {
        match cfg.mode {
            PgMode::Exact => {
                let traj = simulate_trajectory(sys, &pol, rng);
                let outers: Vec<DMatrix<f64>> = (0..sys.horizon())
                    .map(|t| {
                        let x = &traj.states[t];
                        x * x.transpose()
                    })
                    .collect();
                stochastic_gradient_into(sys, &pol, &outers, &mut ws, &mut grad);
            }
            PgMode::ZerothOrder {
                radius,
                directions,
                common_random_numbers,
            } => {
                grad = zeroth_order_full_gradient(
                    sys,
                    &pol,
                    radius,
                    directions,
                    common_random_numbers,
                    rng,
                );
            }
        };
        let current_cost = analytic_cost(sys, &pol);
        // A sampled direction may point uphill; backtracking exhaustion then
        // means no positive step helps, so stand still for this iteration.
        let eta = match step_size(&cfg.schedule, iteration, sys, &pol, &grad, current_cost) {
            Ok(eta) => eta,
            Err(LqError::StepFailure { .. }) => {
                skipped_steps += 1;
                0.0
            }
            Err(e) => return Err(e),
        };
        apply_step(&mut pol, &grad, eta);
        check_finite(&pol, iteration)?;
        if iteration > cfg.burn_in {
            average.update(&pol);
        }
        if iteration % cfg.record_every == 0 {
            let kbar = average.mean();
            let cost = analytic_cost(sys, kbar);
            if !cost.is_finite() {
                return Err(LqError::Divergence {
                    iteration,
                    replica: None,
                });
            }
            log.rows.push(LogRow {
                iteration,
                bias_l1: kbar.l1_distance(&kstar),
                cost,
                normalized_error: (cost - kstar_cost) / kstar_cost,
            });
        }
    }
    Ok(PgRun {
        final_policy: pol,
        average,
        log,
        skipped_steps,
    })
}

/// Deterministic c0 pick for polynomial schedules: one Armijo line search on
/// the exact gradient at the initial policy, shrunk by a safety factor.
/// The raw accepted step is stable for the mean curvature, but single-sample
/// updates see `x x'` spikes several times larger than `Sigma_t`, so a step
/// at the deterministic stability edge diverges stochastically.
pub fn calibrate_c0(sys: &LqSystem, initial: &Policy) -> Result<f64> {
    let grad = exact_gradient(sys, initial);
    let values = evaluate_policy(sys, initial);
    let cost = analytic_cost_with_values(sys, &values);
    let eta = step_size(
        &StepSchedule::default_line_search(),
        1,
        sys,
        initial,
        &grad,
        cost,
    )?;
    Ok(eta / 4.0)
}

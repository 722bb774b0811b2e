//! Closed-form layer: optimal Riccati solve, policy evaluation without
//! inverses, analytic costs, and exact policy gradients.
//!
//! With `u_t = -K_t x_t` the backward recursions are
//!
//! optimal:   `P_t = Q_t + A'P_{t+1}A - A'P_{t+1}B (B'P_{t+1}B + R_t)^{-1} B'P_{t+1}A`
//! evaluate:  `P_t = Q_t + K_t'R_tK_t + (A - BK_t)' P_{t+1} (A - BK_t)`
//!
//! both with `P_T = Q_T`. The per-stage gradient of the expected cost is
//! `2 E_t(K_t) Sigma_t` where
//! `E_t(K_t) = (R_t + B'P_{t+1}B) K_t - B'P_{t+1}A`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::mat;
use crate::system::{state_covariances, LqSystem, Policy};

/// Condition-number ceiling for the stage solve in `solve_optimal`.
const MAX_STAGE_COND: f64 = 1e14;

/// Backward value matrices `P_0..P_T`.
#[derive(Debug, Clone)]
pub struct ValueMatrices {
    p: Vec<DMatrix<f64>>,
}

impl ValueMatrices {
    pub fn stage(&self, t: usize) -> &DMatrix<f64> {
        &self.p[t]
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Per-stage gradient matrices, each `p x d` like the gains they update.
#[derive(Debug, Clone)]
pub struct StageGradient {
    stages: Vec<DMatrix<f64>>,
}

impl StageGradient {
    pub fn new(stages: Vec<DMatrix<f64>>) -> Self {
        Self { stages }
    }

    pub fn zeros_like(pol: &Policy) -> Self {
        Self {
            stages: pol
                .stages()
                .iter()
                .map(|k| DMatrix::zeros(k.nrows(), k.ncols()))
                .collect(),
        }
    }

    pub fn stage(&self, t: usize) -> &DMatrix<f64> {
        &self.stages[t]
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut DMatrix<f64> {
        &mut self.stages[t]
    }

    pub fn stages(&self) -> &[DMatrix<f64>] {
        &self.stages
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Squared Frobenius norm over all stages.
    pub fn norm_squared(&self) -> f64 {
        self.stages.iter().map(|g| g.norm_squared()).sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.stages.iter().map(|g| g.amax()).fold(0.0, f64::max)
    }
}

/// Apply `K <- K - eta * G` stagewise.
pub fn apply_step(pol: &mut Policy, grad: &StageGradient, eta: f64) {
    for t in 0..pol.horizon() {
        let k = pol.stage_mut(t);
        for (k, g) in k.as_mut_slice().iter_mut().zip(grad.stage(t).as_slice()) {
            *k -= eta * g;
        }
    }
}

/// Optimal backward solve: returns the value matrices and the optimal gains.
pub fn solve_optimal(sys: &LqSystem) -> Result<(ValueMatrices, Policy)> {
    let horizon = sys.horizon();
    let d = sys.state_dim();
    let p = sys.control_dim();
    let mut values = vec![DMatrix::zeros(d, d); horizon + 1];
    let mut gains = vec![DMatrix::zeros(p, d); horizon];
    values[horizon] = mat::symmetrize(sys.q(horizon));
    let bt = sys.b().transpose();
    for t in (0..horizon).rev() {
        let p_next = &values[t + 1];
        let btp = &bt * p_next;
        let m = &btp * sys.b() + sys.r(t);
        let rhs = &btp * sys.a();
        let k = mat::spd_solve(&m, &rhs, MAX_STAGE_COND, &format!("Riccati stage {t}"))?;
        let atp = sys.a().transpose() * p_next;
        let mut p_t = sys.q(t) + &atp * sys.a() - atp * sys.b() * &k;
        mat::symmetrize_in_place(&mut p_t);
        values[t] = p_t;
        gains[t] = k;
    }
    Ok((ValueMatrices { p: values }, Policy::new(gains)?))
}

/// Evaluate an arbitrary policy by the inverse-free backward recursion.
pub fn evaluate_policy(sys: &LqSystem, pol: &Policy) -> ValueMatrices {
    let horizon = sys.horizon();
    let d = sys.state_dim();
    let mut values = vec![DMatrix::zeros(d, d); horizon + 1];
    values[horizon] = mat::symmetrize(sys.q(horizon));
    for t in (0..horizon).rev() {
        let k = pol.stage(t);
        let closed = sys.a() - sys.b() * k;
        let mut p_t =
            sys.q(t) + k.transpose() * sys.r(t) * k + closed.transpose() * &values[t + 1] * closed;
        mat::symmetrize_in_place(&mut p_t);
        values[t] = p_t;
    }
    values.truncate(horizon + 1);
    ValueMatrices { p: values }
}

/// Expected cost of a linear policy in closed form:
/// `tr(P_0 Sigma_0) + sum_t tr(P_{t+1} Cov(w))`.
pub fn analytic_cost(sys: &LqSystem, pol: &Policy) -> f64 {
    let values = evaluate_policy(sys, pol);
    analytic_cost_with_values(sys, &values)
}

/// Same as `analytic_cost` when the backward pass is already available.
pub fn analytic_cost_with_values(sys: &LqSystem, values: &ValueMatrices) -> f64 {
    let sigma0 = sys.init().second_moment();
    let mut cost = (values.stage(0) * sigma0).trace();
    let w = sys.noise_covariance();
    if w.amax() > 0.0 {
        for t in 0..sys.horizon() {
            cost += (values.stage(t + 1) * w).trace();
        }
    }
    cost
}

/// The stage residual `E_t(K_t) = (R_t + B'P_{t+1}B) K_t - B'P_{t+1}A`,
/// which vanishes exactly at the optimal gain.
pub fn residual(
    sys: &LqSystem,
    p_next: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    r_t: &DMatrix<f64>,
) -> DMatrix<f64> {
    let btp = sys.b().transpose() * p_next;
    (r_t + &btp * sys.b()) * gain - btp * sys.a()
}

/// Exact per-stage gradients `G_t = 2 E_t(K_t) Sigma_t` with `P` from the
/// backward pass of the full current policy.
pub fn exact_gradient(sys: &LqSystem, pol: &Policy) -> StageGradient {
    let values = evaluate_policy(sys, pol);
    let sigmas = state_covariances(sys, pol);
    exact_gradient_with(sys, pol, &values, &sigmas)
}

pub fn exact_gradient_with(
    sys: &LqSystem,
    pol: &Policy,
    values: &ValueMatrices,
    sigmas: &[DMatrix<f64>],
) -> StageGradient {
    let stages = (0..sys.horizon())
        .map(|t| {
            let e = residual(sys, values.stage(t + 1), pol.stage(t), sys.r(t));
            2.0 * e * &sigmas[t]
        })
        .collect();
    StageGradient::new(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{benchmark_4x2, benchmark_initial_policy, scalar_1x1};
    use crate::stream::StreamFactory;
    use crate::system::{
        sample_cost, spectral_radius, InitModel, LqSystem, NoiseModel,
    };
    use crate::mat::mean_and_sd;
    use nalgebra::{dmatrix, dvector, DVector};
    use rand::Rng;

    /// Central finite differences of `analytic_cost` in every gain entry.
    pub(crate) fn fd_gradient(sys: &LqSystem, pol: &Policy, h: f64) -> StageGradient {
        let mut stages = Vec::with_capacity(pol.horizon());
        for t in 0..pol.horizon() {
            let mut g = DMatrix::zeros(pol.stage(t).nrows(), pol.stage(t).ncols());
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let mut plus = pol.clone();
                    plus.stage_mut(t)[(i, j)] += h;
                    let mut minus = pol.clone();
                    minus.stage_mut(t)[(i, j)] -= h;
                    g[(i, j)] = (analytic_cost(sys, &plus) - analytic_cost(sys, &minus)) / (2.0 * h);
                }
            }
            stages.push(g);
        }
        StageGradient::new(stages)
    }

    /// Independent dynamic-programming oracle: minimizes the quadratic
    /// value function stage by stage, solving the first-order condition
    /// with hand-rolled Gaussian elimination (no shared solve code).
    fn dp_oracle(sys: &LqSystem) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        fn gauss_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
            let n = m.nrows();
            let cols = rhs.ncols();
            let mut aug = DMatrix::zeros(n, n + cols);
            aug.view_mut((0, 0), (n, n)).copy_from(m);
            aug.view_mut((0, n), (n, cols)).copy_from(rhs);
            for col in 0..n {
                let pivot = (col..n)
                    .max_by(|&a, &b| aug[(a, col)].abs().total_cmp(&aug[(b, col)].abs()))
                    .unwrap();
                if pivot != col {
                    aug.swap_rows(pivot, col);
                }
                let pv = aug[(col, col)];
                for j in col..n + cols {
                    aug[(col, j)] /= pv;
                }
                for row in 0..n {
                    if row != col {
                        let f = aug[(row, col)];
                        for j in col..n + cols {
                            aug[(row, j)] -= f * aug[(col, j)];
                        }
                    }
                }
            }
            aug.view((0, n), (n, cols)).into_owned()
        }

        let horizon = sys.horizon();
        let mut p = sys.q(horizon).clone();
        let mut values = vec![p.clone()];
        let mut gains = Vec::new();
        for t in (0..horizon).rev() {
            let btp = sys.b().transpose() * &p;
            let m = sys.r(t) + &btp * sys.b();
            let k = gauss_solve(&m, &(&btp * sys.a()));
            let closed = sys.a() - sys.b() * &k;
            p = sys.q(t) + k.transpose() * sys.r(t) * &k + closed.transpose() * &p * closed;
            values.push(p.clone());
            gains.push(k);
        }
        values.reverse();
        gains.reverse();
        (values, gains)
    }

    #[test]
    fn optimal_solve_scalar_no_drift() {
        // A = 0 kills the cross term: P_t = 1, K* = 0.
        let sys = LqSystem::new(
            dmatrix![0.0],
            dmatrix![1.0],
            vec![dmatrix![1.0]; 4],
            vec![dmatrix![1.0]; 3],
            NoiseModel::None,
            InitModel::Point(dvector![1.0]),
        )
        .unwrap();
        let (values, kstar) = solve_optimal(&sys).unwrap();
        for t in 0..=3 {
            assert!((values.stage(t)[(0, 0)] - 1.0).abs() < 1e-14);
        }
        for t in 0..3 {
            assert!(kstar.stage(t)[(0, 0)].abs() < 1e-14);
        }
    }

    #[test]
    fn optimal_solve_without_control_authority() {
        let sys = benchmark_4x2();
        let sys = LqSystem::new(
            sys.a().clone(),
            DMatrix::zeros(4, 2),
            (0..=10).map(|t| sys.q(t).clone()).collect(),
            (0..10).map(|t| sys.r(t).clone()).collect(),
            NoiseModel::None,
            sys.init().clone(),
        )
        .unwrap();
        let (values, kstar) = solve_optimal(&sys).unwrap();
        for t in 0..10 {
            assert!(kstar.stage(t).amax() < 1e-14);
        }
        let mut p = sys.q(10).clone();
        for t in (0..10).rev() {
            p = sys.q(t) + sys.a().transpose() * &p * sys.a();
            assert!((values.stage(t) - &p).amax() < 1e-12);
        }
    }

    #[test]
    fn optimal_solve_matches_dp_oracle() {
        let sys = benchmark_4x2();
        let start = std::time::Instant::now();
        let (values, kstar) = solve_optimal(&sys).unwrap();
        let elapsed = start.elapsed();
        let (p_oracle, k_oracle) = dp_oracle(&sys);
        for t in 0..sys.horizon() {
            assert!(
                (kstar.stage(t) - &k_oracle[t]).amax() < 1e-10,
                "gain mismatch at stage {t}"
            );
            assert!((values.stage(t) - &p_oracle[t]).amax() < 1e-10);
        }
        // Positive definiteness and symmetry of the optimal value matrices.
        for t in 0..=sys.horizon() {
            let p = values.stage(t);
            assert!((p - p.transpose()).amax() < 1e-12);
            assert!(crate::mat::min_eigenvalue(p) > 0.0);
        }
        assert!(elapsed.as_secs_f64() < 0.05, "solve took {elapsed:?}");
    }

    #[test]
    fn evaluate_policy_reproduces_optimal_values_at_kstar() {
        let sys = benchmark_4x2();
        let (values, kstar) = solve_optimal(&sys).unwrap();
        let evaluated = evaluate_policy(&sys, &kstar);
        for t in 0..=sys.horizon() {
            assert!((values.stage(t) - evaluated.stage(t)).amax() < 1e-10);
        }
    }

    #[test]
    fn evaluate_policy_open_loop() {
        let sys = benchmark_4x2();
        let zero = Policy::uniform(10, 2, 4, 0.0);
        let values = evaluate_policy(&sys, &zero);
        let mut p = sys.q(10).clone();
        for t in (0..10).rev() {
            p = sys.q(t) + sys.a().transpose() * &p * sys.a();
            assert!((values.stage(t) - &p).amax() < 1e-12);
        }
    }

    #[test]
    fn evaluate_policy_matches_monte_carlo_cost_to_go() {
        // P0 entries recovered from sampled costs with point starts:
        // cost(e_i) has mean e_i' P0 e_i + noise floor, where the noise
        // floor is the mean cost started from the origin.
        let sys = benchmark_4x2();
        let pol = benchmark_initial_policy(&sys);
        let p0 = evaluate_policy(&sys, &pol).stage(0).clone();
        let factory = StreamFactory::new(11);
        let n = 60_000usize;
        let mc = |x0: DVector<f64>, path: u64| {
            let sys_pt = sys.with_init(InitModel::Point(x0)).unwrap();
            let mut rng = factory.stream(&[path]);
            let costs: Vec<f64> = (0..n).map(|_| sample_cost(&sys_pt, &pol, &mut rng)).collect();
            let (mean, sd) = mean_and_sd(&costs);
            (mean, sd / (n as f64).sqrt())
        };
        let (floor, floor_se) = mc(DVector::zeros(4), 0);
        for i in 0..4 {
            let (mean, se) = mc(DVector::from_fn(4, |r, _| if r == i { 1.0 } else { 0.0 }), 1 + i as u64);
            let est = mean - floor;
            let tol = 3.0 * (se * se + floor_se * floor_se).sqrt();
            assert!(
                (est - p0[(i, i)]).abs() <= tol,
                "P0[{i}][{i}] mc {est} vs {} (tol {tol})",
                p0[(i, i)]
            );
        }
    }

    #[test]
    fn analytic_cost_trivial_cases() {
        let sys = scalar_1x1()
            .with_init(InitModel::Point(dvector![0.0]))
            .unwrap();
        assert_eq!(analytic_cost(&sys, &Policy::uniform(2, 1, 1, 0.3)), 0.0);

        // T=1, A=2, B=1, Q=R=1, K=0, x0=1: cost = 1 + 4 = 5.
        let sys = LqSystem::new(
            dmatrix![2.0],
            dmatrix![1.0],
            vec![dmatrix![1.0]; 2],
            vec![dmatrix![1.0]; 1],
            NoiseModel::None,
            InitModel::Point(dvector![1.0]),
        )
        .unwrap();
        assert!((analytic_cost(&sys, &Policy::uniform(1, 1, 1, 0.0)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_cost_matches_monte_carlo_at_optimum() {
        let sys = benchmark_4x2();
        let (_, kstar) = solve_optimal(&sys).unwrap();
        let expected = analytic_cost(&sys, &kstar);
        let mut rng = StreamFactory::new(12).stream(&[0]);
        let n = 100_000usize;
        let costs: Vec<f64> = (0..n).map(|_| sample_cost(&sys, &kstar, &mut rng)).collect();
        let (mean, sd) = mean_and_sd(&costs);
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mc {mean} vs analytic {expected} (se {se})"
        );
    }

    #[test]
    fn residual_vanishes_at_optimum_and_reduces_without_b() {
        let sys = benchmark_4x2();
        let (values, kstar) = solve_optimal(&sys).unwrap();
        for t in 0..sys.horizon() {
            let e = residual(&sys, values.stage(t + 1), kstar.stage(t), sys.r(t));
            assert!(e.amax() < 1e-10, "stage {t} residual {}", e.amax());
        }

        let no_b = LqSystem::new(
            sys.a().clone(),
            DMatrix::zeros(4, 2),
            (0..=10).map(|t| sys.q(t).clone()).collect(),
            (0..10).map(|t| sys.r(t).clone()).collect(),
            NoiseModel::None,
            sys.init().clone(),
        )
        .unwrap();
        let k = DMatrix::from_element(2, 4, 0.4);
        let e = residual(&no_b, values.stage(1), &k, no_b.r(0));
        assert!((e - no_b.r(0) * &k).amax() < 1e-14);
    }

    #[test]
    fn residual_cross_checks_against_finite_differences() {
        // E_0 = (1/2) * dC/dK_0 * Sigma_0^{-1}.
        let sys = benchmark_4x2();
        let pol = benchmark_initial_policy(&sys);
        let values = evaluate_policy(&sys, &pol);
        let e0 = residual(&sys, values.stage(1), pol.stage(0), sys.r(0));
        let fd = fd_gradient(&sys, &pol, 1e-5);
        let sigma0 = sys.init().second_moment();
        let e0_fd = 0.5
            * fd.stage(0)
            * sigma0
                .clone()
                .try_inverse()
                .expect("Sigma_0 is invertible for the benchmark");
        let scale = e0.amax().max(1e-8);
        assert!(
            (e0 - e0_fd).amax() / scale < 1e-6,
            "residual finite-difference mismatch"
        );
    }

    #[test]
    fn exact_gradient_vanishes_where_it_should() {
        let sys = benchmark_4x2();
        let (_, kstar) = solve_optimal(&sys).unwrap();
        let g = exact_gradient(&sys, &kstar);
        assert!(g.max_abs_entry() < 1e-9);

        let frozen = scalar_1x1()
            .with_init(InitModel::Point(dvector![0.0]))
            .unwrap();
        let g = exact_gradient(&frozen, &Policy::uniform(2, 1, 1, 0.7));
        assert!(g.max_abs_entry() == 0.0);
    }

    #[test]
    fn exact_gradient_matches_finite_differences_at_random_stable_policies() {
        let sys = benchmark_4x2();
        let mut rng = StreamFactory::new(13).stream(&[0]);
        let mut tested = 0;
        while tested < 5 {
            let mut pol = benchmark_initial_policy(&sys);
            for t in 0..pol.horizon() {
                for v in pol.stage_mut(t).iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
            if (0..pol.horizon())
                .any(|t| spectral_radius(&sys, pol.stage(t)).unwrap() >= 1.0)
            {
                continue;
            }
            tested += 1;
            let g = exact_gradient(&sys, &pol);
            let fd = fd_gradient(&sys, &pol, 1e-5);
            for t in 0..pol.horizon() {
                let diff = (g.stage(t) - fd.stage(t)).amax();
                let scale = fd.stage(t).amax().max(1.0);
                assert!(
                    diff / scale < 1e-6,
                    "stage {t}: gradient mismatch {diff} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn optimal_cost_lower_bounds_random_policies() {
        let sys = benchmark_4x2();
        let (_, kstar) = solve_optimal(&sys).unwrap();
        let best = analytic_cost(&sys, &kstar);
        let mut rng = StreamFactory::new(14).stream(&[0]);
        for _ in 0..100 {
            let mut pol = benchmark_initial_policy(&sys);
            for t in 0..pol.horizon() {
                for v in pol.stage_mut(t).iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            assert!(analytic_cost(&sys, &pol) >= best - 1e-9 * best.abs());
        }
    }
}

//! Asymptotic-covariance oracles and distribution diagnostics.
//!
//! The averaged-iterate CLT has covariance `G_t^{-1} S_t G_t^{-1}` with
//! `G_t = Sigma_t (x) Theta_t`, `Theta_t = R_t + B'P*_{t+1}B`, and `S_t`
//! the covariance of the gradient-sample noise at the optimum. Written
//! literally with `E_t(K*) = 0` that noise is identically zero, so `S_t`
//! is implemented as the second moment of the state-fluctuation term
//! `2 (x_t x_t' - Sigma_t) (x) Theta_t`: the `x x' - E[x x']` fluctuation
//! hit by the same coefficient structure that multiplies the gains in the
//! update rule.
//!
//! The module also carries the chi-square mixture for the objective-loss
//! statistic, influence-term expansions, a two-sample Kolmogorov distance,
//! and coverage tabulation for the experiment harness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bootstrap::{CiMethod, WeightScheme};
use crate::error::{LqError, Result};
use crate::mat::{sqrt_psd, sym_condition_number, symmetrize, symmetrize_in_place};
use crate::riccati::{analytic_cost, solve_optimal, residual, ValueMatrices};
use crate::system::{
    cost_with_record, draw_noise_record, simulate_trajectory, state_covariances, LqSystem, Policy,
};

/// Condition ceiling for inverting `G_t`.
const MAX_G_COND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceMode {
    ModelBased,
    ModelFree { radius: f64, directions: usize },
}

/// Per-stage asymptotic covariance `cov = G^{-1} S G^{-1}`.
#[derive(Debug, Clone)]
pub struct AsymptoticCovariance {
    pub stage: usize,
    pub g: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub mode: CovarianceMode,
}

impl AsymptoticCovariance {
    /// Wrap an externally estimated limit covariance (for example the
    /// cross-replication sample covariance of the averaged iterates),
    /// keeping the exact curvature `G` and backing out `S = G cov G`.
    pub fn from_limit_covariance(
        stage: usize,
        g: DMatrix<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let cov = clip_psd(cov, "limit covariance")?;
        let s = clip_psd(&g * &cov * &g, "implied S")?;
        Ok(Self {
            stage,
            g,
            s,
            cov,
            mode: CovarianceMode::ModelBased,
        })
    }
}

fn clip_psd(mut m: DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    symmetrize_in_place(&mut m);
    let se = m.clone().symmetric_eigen();
    let lmax = se.eigenvalues.amax().max(0.0);
    let mut d = se.eigenvalues;
    for v in d.iter_mut() {
        if *v < -1e-10 * lmax.max(1e-300) {
            return Err(LqError::InvalidParameter(format!(
                "{context}: matrix is not PSD (eigenvalue {v:.3e} vs max {lmax:.3e})"
            )));
        }
        *v = v.max(0.0);
    }
    let mut out = &se.eigenvectors * DMatrix::from_diagonal(&d) * se.eigenvectors.transpose();
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// `Theta_t = R_t + B' P*_{t+1} B` for every stage.
fn stage_curvatures(sys: &LqSystem, optimal_values: &ValueMatrices) -> Vec<DMatrix<f64>> {
    (0..sys.horizon())
        .map(|t| {
            let btp = sys.b().transpose() * optimal_values.stage(t + 1);
            symmetrize(&(sys.r(t) + &btp * sys.b()))
        })
        .collect()
}

fn build_g(sigma: &DMatrix<f64>, theta: &DMatrix<f64>, stage: usize) -> Result<DMatrix<f64>> {
    let g = sigma.kronecker(theta);
    let cond = sym_condition_number(&g);
    if !cond.is_finite() || cond > MAX_G_COND {
        return Err(LqError::IllConditioned {
            context: format!("asymptotic curvature G at stage {stage}"),
            cond,
        });
    }
    Ok(g)
}

fn sandwich(g: &DMatrix<f64>, s: &DMatrix<f64>, stage: usize) -> Result<DMatrix<f64>> {
    let ch = symmetrize(g)
        .cholesky()
        .ok_or_else(|| LqError::IllConditioned {
            context: format!("G at stage {stage}"),
            cond: sym_condition_number(g),
        })?;
    let half = ch.solve(s);
    let cov = ch.solve(&half.transpose());
    clip_psd(cov, "asymptotic covariance")
}

/// Asymptotic covariances for the exact-gradient chain, one per stage.
///
/// `S_t` is Monte-Carlo estimated from `n_mc` trajectories simulated under
/// the optimal policy: `S_t = 4 E[(x x' - Sigma)^2] (x) Theta^2`.
pub fn model_based_covariance<R: Rng + ?Sized>(
    sys: &LqSystem,
    kstar: &Policy,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<AsymptoticCovariance>> {
    if n_mc < 2 {
        return Err(LqError::InvalidParameter("n_mc must be >= 2".into()));
    }
    let (values, _) = solve_optimal(sys)?;
    let thetas = stage_curvatures(sys, &values);
    let sigmas = state_covariances(sys, kstar);
    let d = sys.state_dim();
    let horizon = sys.horizon();

    let mut fourth = vec![DMatrix::<f64>::zeros(d, d); horizon];
    for _ in 0..n_mc {
        let traj = simulate_trajectory(sys, kstar, rng);
        for t in 0..horizon {
            let x = &traj.states[t];
            let dev = x * x.transpose() - &sigmas[t];
            fourth[t] += &dev * &dev;
        }
    }
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let g = build_g(&sigmas[t], &thetas[t], t)?;
        let theta_sq = &thetas[t] * &thetas[t];
        let s = clip_psd(
            (&fourth[t] / n_mc as f64).kronecker(&theta_sq) * 4.0,
            "model-based S",
        )?;
        let cov = sandwich(&g, &s, t)?;
        out.push(AsymptoticCovariance {
            stage: t,
            g,
            s,
            cov,
            mode: CovarianceMode::ModelBased,
        });
    }
    Ok(out)
}

/// One zeroth-order summand batch at `stage`: returns
/// `sum_i vec{(chat(K* + U_i) - chat(K*)) U_i}` over `directions` draws,
/// with both costs evaluated on the same trajectory noise per direction.
fn zeroth_batch_sum<R: Rng + ?Sized>(
    sys: &LqSystem,
    kstar: &Policy,
    stage: usize,
    radius: f64,
    directions: usize,
    rng: &mut R,
) -> DVector<f64> {
    let p = sys.control_dim();
    let d = sys.state_dim();
    let mut sum = DVector::zeros(p * d);
    let mut perturbed = kstar.clone();
    for _ in 0..directions {
        let u = DMatrix::from_fn(p, d, |_, _| rng.random_range(-radius..=radius));
        perturbed.stage_mut(stage).copy_from(&(kstar.stage(stage) + &u));
        let record = draw_noise_record(sys, rng);
        let diff = cost_with_record(sys, &perturbed, &record) - cost_with_record(sys, kstar, &record);
        for (k, v) in u.as_slice().iter().enumerate() {
            sum[k] += diff * v;
        }
    }
    sum
}

/// Asymptotic covariances for the zeroth-order chain.
///
/// `S~_t` is the double sum `(1/m^2) sum_{i,j} E[v_i v_j']` with
/// `v_i = vec{(chat(K* + U_i) - chat(K*)) U_i}`, estimated over `n_mc`
/// independent batches of `directions` draws; each `v_i` uses sampled
/// single-trajectory costs sharing the trajectory noise within a direction.
pub fn model_free_covariance<R: Rng + ?Sized>(
    sys: &LqSystem,
    kstar: &Policy,
    radius: f64,
    directions: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<AsymptoticCovariance>> {
    if n_mc < 2 || directions == 0 || radius <= 0.0 {
        return Err(LqError::InvalidParameter(
            "model_free_covariance needs n_mc >= 2, directions >= 1, radius > 0".into(),
        ));
    }
    let (values, _) = solve_optimal(sys)?;
    let thetas = stage_curvatures(sys, &values);
    let sigmas = state_covariances(sys, kstar);
    let dim = sys.state_dim() * sys.control_dim();
    let horizon = sys.horizon();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..n_mc {
            let s = zeroth_batch_sum(sys, kstar, t, radius, directions, rng);
            acc += &s * s.transpose();
        }
        let m2 = (directions * directions) as f64;
        let s = clip_psd(acc / (n_mc as f64 * m2), "model-free S")?;
        let g = build_g(&sigmas[t], &thetas[t], t)?;
        let cov = sandwich(&g, &s, t)?;
        out.push(AsymptoticCovariance {
            stage: t,
            g,
            s,
            cov,
            mode: CovarianceMode::ModelFree { radius, directions },
        });
    }
    Ok(out)
}

/// Eigenvalues of the chi-square mixture for the loss statistic
/// `2n (C(Kbar) - C(K*))`.
#[derive(Debug, Clone)]
pub struct LossMixture {
    pub lambdas: Vec<f64>,
}

impl LossMixture {
    /// One draw of `sum_k lambda_k z_k^2`, `z_k` i.i.d. standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lambdas
            .iter()
            .map(|&l| {
                let z: f64 = rng.sample(StandardNormal);
                l * z * z
            })
            .sum()
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Build the loss mixture from per-stage limit covariances of
/// `sqrt(n)(vec Kbar_t - vec K*_t)`.
///
/// The Hessian of the cost at the optimum is block diagonal with stage
/// blocks `H_t = 2 G_t`; for Gaussian `Z_t ~ N(0, cov_t)` the quadratic
/// form `Z' H Z` is distributed as `sum_k lambda_k chi^2(1)` where the
/// `lambda_k` are the eigenvalues of `cov_t^{1/2} H_t cov_t^{1/2}` pooled
/// over stages.
pub fn loss_mixture(covariances: &[AsymptoticCovariance]) -> Result<LossMixture> {
    let mut lambdas = Vec::new();
    for ac in covariances {
        let half = sqrt_psd(&ac.cov)?;
        let m = &half * (&ac.g * 2.0) * &half;
        let eigen = symmetrize(&m).symmetric_eigen().eigenvalues;
        let lmax = eigen.amax().max(0.0);
        for &l in eigen.iter() {
            if l < -1e-10 * lmax.max(1e-300) {
                return Err(LqError::InvalidParameter(format!(
                    "loss mixture: negative eigenvalue {l:.3e}"
                )));
            }
            lambdas.push(l.max(0.0));
        }
    }
    lambdas.sort_by(|a, b| b.total_cmp(a));
    Ok(LossMixture { lambdas })
}

/// Influence-term sample of the averaged-iterate expansion.
pub enum InfluenceSample<'a> {
    /// Exact mode at the optimum: `xi = -2 vec{E_t(K*) x x'}` (zero by
    /// stationarity; kept as the definitional anchor of the expansion).
    Exact {
        stage: usize,
        state: &'a DVector<f64>,
    },
    /// Zeroth-order: `xi = -(1/m) sum_i vec{(c(K* + U_i) - c(K*)) U_i}`
    /// with the deterministic policy cost.
    ZerothOrder {
        stage: usize,
        perturbations: &'a [DMatrix<f64>],
    },
}

pub fn influence_term(sys: &LqSystem, kstar: &Policy, sample: InfluenceSample<'_>) -> Result<DVector<f64>> {
    let (values, _) = solve_optimal(sys)?;
    match sample {
        InfluenceSample::Exact { stage, state } => {
            let e = residual(sys, values.stage(stage + 1), kstar.stage(stage), sys.r(stage));
            let m = e * (state * state.transpose()) * -2.0;
            Ok(DVector::from_column_slice(m.as_slice()))
        }
        InfluenceSample::ZerothOrder {
            stage,
            perturbations,
        } => {
            let dim = sys.state_dim() * sys.control_dim();
            if perturbations.is_empty() {
                return Err(LqError::EmptySample("influence_term"));
            }
            let base = analytic_cost(sys, kstar);
            let mut acc = DVector::zeros(dim);
            let mut perturbed = kstar.clone();
            for u in perturbations {
                perturbed.stage_mut(stage).copy_from(&(kstar.stage(stage) + u));
                let diff = analytic_cost(sys, &perturbed) - base;
                for (k, v) in u.as_slice().iter().enumerate() {
                    acc[k] -= diff * v;
                }
            }
            Ok(acc / perturbations.len() as f64)
        }
    }
}

/// Linearized exact-mode influence summand around the optimum:
/// `xi_t = -2 vec{Theta_t (K_t - K*_t) (x x' - Sigma_t)}`. This is the
/// mean-zero fluctuation driving the averaged-iterate expansion; the
/// expansion diagnostic replays it from a run's stored iterates and states.
pub fn linearized_influence(
    theta: &DMatrix<f64>,
    gain_delta: &DMatrix<f64>,
    state: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> DVector<f64> {
    let dev = state * state.transpose() - sigma;
    let m = theta * gain_delta * dev * -2.0;
    DVector::from_column_slice(m.as_slice())
}

/// Two-sample Kolmogorov-Smirnov statistic by the sorted-merge sweep.
pub fn ks_distance(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(LqError::EmptySample("ks_distance"));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < a.len() && j < b.len() {
        // Consume every copy of the current value from both samples before
        // measuring, so ties do not produce phantom CDF gaps.
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        let diff = (i as f64 / na - j as f64 / nb).abs();
        if diff > sup {
            sup = diff;
        }
    }
    Ok(sup.min(1.0))
}

/// One confidence-interval observation carrying the ground truth.
#[derive(Debug, Clone)]
pub struct CoverageRecord {
    pub agents: usize,
    pub method: CiMethod,
    pub scheme: WeightScheme,
    pub stage: usize,
    pub row: usize,
    pub col: usize,
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
}

impl CoverageRecord {
    pub fn covered(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }
}

/// Aggregated coverage frequency per (m, method, scheme, entry) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCell {
    pub agents: usize,
    pub method: CiMethod,
    pub scheme: WeightScheme,
    pub stage: usize,
    pub row: usize,
    pub col: usize,
    pub coverage: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CoverageTable {
    pub cells: Vec<CoverageCell>,
}

impl CoverageTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,approach,weight_scheme,entry,coverage\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},K_{}_{},{:.16e}\n",
                c.agents,
                c.method.name(),
                c.scheme.name(),
                c.row + 1,
                c.col + 1,
                c.coverage
            ));
        }
        out
    }
}

/// Fraction of replications whose interval contains the truth, per cell.
/// Cells are ordered by (m, method, scheme, stage, row, col); replication
/// order does not affect the result.
pub fn coverage_table(records: &[CoverageRecord]) -> CoverageTable {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(usize, &'static str, &'static str, usize, usize, usize), (usize, usize, CiMethod, WeightScheme)> =
        BTreeMap::new();
    for r in records {
        let key = (r.agents, r.method.name(), r.scheme.name(), r.stage, r.row, r.col);
        let entry = groups.entry(key).or_insert((0, 0, r.method, r.scheme));
        entry.0 += r.covered() as usize;
        entry.1 += 1;
    }
    CoverageTable {
        cells: groups
            .into_iter()
            .map(|((agents, _, _, stage, row, col), (hits, count, method, scheme))| CoverageCell {
                agents,
                method,
                scheme,
                stage,
                row,
                col,
                coverage: hits as f64 / count as f64,
                count,
            })
            .collect(),
    }
}

//! Problem instances and trajectory simulation.
//!
//! A problem instance is linear dynamics `x_{t+1} = A x_t + B u_t + w_t`
//! over a finite horizon `T`, with stage costs `x'Q_t x + u'R_t u` and a
//! terminal cost `x'Q_T x`. Policies are linear state feedback with the
//! sign convention `u_t = -K_t x_t`, so the closed loop is `A - B K_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::error::{LqError, Result};
use crate::mat;

/// Smallest eigenvalue (after symmetrization) that still counts as
/// positive definite in validation.
pub const PD_TOLERANCE: f64 = 1e-12;

/// Process-noise model for `w_t`.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// No noise; `w_t = 0`.
    None,
    /// `w_t ~ N(0, cov)`.
    Gaussian { cov: DMatrix<f64> },
    /// Componentwise Student-t draws rescaled so `Cov(w) = cov` exactly:
    /// each coordinate of the standardized draw is multiplied by
    /// `sqrt((dof - 2) / dof)` before the covariance square root is applied.
    StudentT { dof: f64, cov: DMatrix<f64> },
}

impl NoiseModel {
    pub fn covariance(&self, d: usize) -> DMatrix<f64> {
        match self {
            NoiseModel::None => DMatrix::zeros(d, d),
            NoiseModel::Gaussian { cov } | NoiseModel::StudentT { cov, .. } => cov.clone(),
        }
    }
}

/// Distribution of the initial state `x_0`.
#[derive(Debug, Clone)]
pub enum InitModel {
    /// Deterministic start.
    Point(DVector<f64>),
    /// Independent Gaussian coordinates.
    IndependentGaussian {
        means: DVector<f64>,
        variances: DVector<f64>,
    },
    /// Finite pool of starting states sampled uniformly with replacement.
    Pool(Vec<DVector<f64>>),
}

impl InitModel {
    pub fn dim(&self) -> usize {
        match self {
            InitModel::Point(x) => x.len(),
            InitModel::IndependentGaussian { means, .. } => means.len(),
            InitModel::Pool(states) => states.first().map_or(0, |s| s.len()),
        }
    }

    /// `E[x_0 x_0']`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        match self {
            InitModel::Point(x) => x * x.transpose(),
            InitModel::IndependentGaussian { means, variances } => {
                means * means.transpose() + DMatrix::from_diagonal(variances)
            }
            InitModel::Pool(states) => {
                let d = self.dim();
                let mut m = DMatrix::zeros(d, d);
                for s in states {
                    m += s * s.transpose();
                }
                m / states.len() as f64
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            InitModel::Point(x) => x.clone(),
            InitModel::IndependentGaussian { means, variances } => {
                let mut x = means.clone();
                for i in 0..x.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    x[i] += variances[i].sqrt() * z;
                }
                x
            }
            InitModel::Pool(states) => {
                let i = rng.random_range(0..states.len());
                states[i].clone()
            }
        }
    }
}

/// Time-indexed feedback gains `K_0..K_{T-1}`, each `p x d`, applied as
/// `u_t = -K_t x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    gains: Vec<DMatrix<f64>>,
}

impl Policy {
    pub fn new(gains: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.is_empty() {
            return Err(LqError::InvalidParameter("policy needs T >= 1 stages".into()));
        }
        let (p, d) = (gains[0].nrows(), gains[0].ncols());
        for (t, k) in gains.iter().enumerate() {
            if k.nrows() != p || k.ncols() != d {
                return Err(LqError::Dimension(format!(
                    "K[{t}] is {}x{}, expected {p}x{d}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        Ok(Self { gains })
    }

    /// All stages set to the same matrix.
    pub fn constant(horizon: usize, gain: DMatrix<f64>) -> Self {
        Self {
            gains: vec![gain; horizon.max(1)],
        }
    }

    /// All entries of all stages set to `value`.
    pub fn uniform(horizon: usize, p: usize, d: usize, value: f64) -> Self {
        Self::constant(horizon, DMatrix::from_element(p, d, value))
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn stage(&self, t: usize) -> &DMatrix<f64> {
        &self.gains[t]
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut DMatrix<f64> {
        &mut self.gains[t]
    }

    pub fn stages(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// Column-major vectorization of every stage, stages concatenated
    /// `t = 0..T-1`.
    pub fn flatten(&self) -> DVector<f64> {
        let per = self.gains[0].len();
        let mut v = DVector::zeros(per * self.gains.len());
        for (t, k) in self.gains.iter().enumerate() {
            v.rows_mut(t * per, per).copy_from_slice(k.as_slice());
        }
        v
    }

    /// `sum_t sum_ij |K_t[ij] - other_t[ij]|`.
    pub fn l1_distance(&self, other: &Policy) -> f64 {
        self.gains
            .iter()
            .zip(&other.gains)
            .map(|(a, b)| (a - b).abs().sum())
            .sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.gains.iter().map(|k| k.amax()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.gains.iter().all(|k| k.iter().all(|v| v.is_finite()))
    }
}

/// A simulated path: `T+1` states, `T` controls, `T` noise draws, with
/// `x_{t+1} = A x_t + B u_t + w_t` and `u_t = -K_t x_t` exact to roundoff.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub noises: Vec<DVector<f64>>,
}

/// `(x_t, u_t, x_{t+1})` triples for least-squares identification.
#[derive(Debug, Clone, Default)]
pub struct DynamicsDataset {
    pub records: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl DynamicsDataset {
    pub fn push(&mut self, x: DVector<f64>, u: DVector<f64>, x_next: DVector<f64>) {
        self.records.push((x, u, x_next));
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// The full problem instance.
#[derive(Debug, Clone)]
pub struct LqSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    noise: NoiseModel,
    init: InitModel,
    noise_sqrt: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
}

impl LqSystem {
    /// `q` has `T+1` entries (indices `0..=T`), `r` has `T`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        noise: NoiseModel,
        init: InitModel,
    ) -> Result<Self> {
        let d = a.nrows();
        let p = b.ncols();
        if a.ncols() != d {
            return Err(LqError::Dimension(format!(
                "A is {}x{}, must be square",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != d {
            return Err(LqError::Dimension(format!(
                "B has {} rows, expected {d}",
                b.nrows()
            )));
        }
        if r.is_empty() {
            return Err(LqError::InvalidParameter("horizon T must be >= 1".into()));
        }
        if q.len() != r.len() + 1 {
            return Err(LqError::Dimension(format!(
                "Q has {} entries, expected T+1 = {}",
                q.len(),
                r.len() + 1
            )));
        }
        for (t, m) in q.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(LqError::Dimension(format!("Q[{t}] is not {d}x{d}")));
            }
        }
        for (t, m) in r.iter().enumerate() {
            if m.nrows() != p || m.ncols() != p {
                return Err(LqError::Dimension(format!("R[{t}] is not {p}x{p}")));
            }
        }
        if init.dim() != d {
            return Err(LqError::Dimension(format!(
                "initial-state model has dimension {}, expected {d}",
                init.dim()
            )));
        }
        if let InitModel::Pool(states) = &init {
            if states.is_empty() {
                return Err(LqError::InvalidParameter("pool init needs >= 1 state".into()));
            }
            if states.iter().any(|s| s.len() != d) {
                return Err(LqError::Dimension("pool state dimension mismatch".into()));
            }
        }
        let noise_cov = noise.covariance(d);
        if noise_cov.nrows() != d || noise_cov.ncols() != d {
            return Err(LqError::Dimension(format!(
                "noise covariance is not {d}x{d}"
            )));
        }
        if let NoiseModel::StudentT { dof, .. } = noise {
            if dof <= 2.0 {
                return Err(LqError::InvalidParameter(format!(
                    "Student-t dof must be > 2 for a finite second moment, got {dof}"
                )));
            }
        }
        let noise_sqrt = mat::sqrt_psd(&noise_cov)?;
        Ok(Self {
            a,
            b,
            q,
            r,
            noise,
            init,
            noise_sqrt,
            noise_cov,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.r.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self, t: usize) -> &DMatrix<f64> {
        &self.q[t]
    }

    pub fn r(&self, t: usize) -> &DMatrix<f64> {
        &self.r[t]
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn init(&self) -> &InitModel {
        &self.init
    }

    /// `Cov(w_t)` (zero matrix when noiseless).
    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Same dynamics and costs with a different initial-state model.
    pub fn with_init(&self, init: InitModel) -> Result<Self> {
        LqSystem::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            self.noise.clone(),
            init,
        )
    }

    /// Same dynamics and costs with a different noise model.
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        LqSystem::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            noise,
            self.init.clone(),
        )
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.state_dim();
        match &self.noise {
            NoiseModel::None => DVector::zeros(d),
            NoiseModel::Gaussian { .. } => {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.noise_sqrt * z
            }
            NoiseModel::StudentT { dof, .. } => {
                let t = StudentT::new(*dof).expect("dof validated at construction");
                let scale = ((dof - 2.0) / dof).sqrt();
                let z = DVector::from_fn(d, |_, _| scale * t.sample(rng));
                &self.noise_sqrt * z
            }
        }
    }
}

/// Diagnostic validation: symmetry and positive definiteness of every cost
/// matrix plus dimension consistency. Empty result means the system is ok.
pub fn validate_system(sys: &LqSystem) -> Vec<String> {
    let mut violations = Vec::new();
    let check = |name: String, m: &DMatrix<f64>, out: &mut Vec<String>| {
        let scale = 1.0 + m.amax();
        if (m - m.transpose()).amax() > 1e-9 * scale {
            out.push(format!("{name} not symmetric"));
        }
        if mat::min_eigenvalue(m) <= PD_TOLERANCE {
            out.push(format!("{name} not positive definite"));
        }
    };
    for (t, m) in sys.q.iter().enumerate() {
        check(format!("Q[{t}]"), m, &mut violations);
    }
    for (t, m) in sys.r.iter().enumerate() {
        check(format!("R[{t}]"), m, &mut violations);
    }
    violations
}

/// Spectral radius of the closed-loop matrix `A - B K` for one stage gain.
pub fn spectral_radius(sys: &LqSystem, gain: &DMatrix<f64>) -> Result<f64> {
    if gain.nrows() != sys.control_dim() || gain.ncols() != sys.state_dim() {
        return Err(LqError::Dimension(format!(
            "gain is {}x{}, expected {}x{}",
            gain.nrows(),
            gain.ncols(),
            sys.control_dim(),
            sys.state_dim()
        )));
    }
    let closed = &sys.a - &sys.b * gain;
    let eig = closed.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Simulate one trajectory under `pol` with fresh initial state and noise.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    sys: &LqSystem,
    pol: &Policy,
    rng: &mut R,
) -> Trajectory {
    let horizon = sys.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut noises = Vec::with_capacity(horizon);
    let mut x = sys.init.sample(rng);
    for t in 0..horizon {
        let u = -(pol.stage(t) * &x);
        let w = sys.sample_noise(rng);
        let x_next = &sys.a * &x + &sys.b * &u + &w;
        states.push(x);
        controls.push(u);
        noises.push(w);
        x = x_next;
    }
    states.push(x);
    Trajectory {
        states,
        controls,
        noises,
    }
}

/// Sampled cost of one trajectory: the realized quadratic stage costs plus
/// terminal cost.
pub fn trajectory_cost(sys: &LqSystem, traj: &Trajectory) -> f64 {
    let horizon = sys.horizon();
    let mut cost = 0.0;
    for t in 0..horizon {
        let x = &traj.states[t];
        let u = &traj.controls[t];
        cost += (x.transpose() * sys.q(t) * x)[(0, 0)];
        cost += (u.transpose() * sys.r(t) * u)[(0, 0)];
    }
    let xt = &traj.states[horizon];
    cost + (xt.transpose() * sys.q(horizon) * xt)[(0, 0)]
}

/// Exogenous randomness for one trajectory, so the same draw can be replayed
/// under different policies (common-random-numbers cost comparisons).
#[derive(Debug, Clone)]
pub struct NoiseRecord {
    pub x0: DVector<f64>,
    pub noises: Vec<DVector<f64>>,
}

pub fn draw_noise_record<R: Rng + ?Sized>(sys: &LqSystem, rng: &mut R) -> NoiseRecord {
    NoiseRecord {
        x0: sys.init.sample(rng),
        noises: (0..sys.horizon()).map(|_| sys.sample_noise(rng)).collect(),
    }
}

/// Cost of running `pol` against a fixed noise record, without materializing
/// the trajectory. This is the hot path for zeroth-order estimation.
pub fn cost_with_record(sys: &LqSystem, pol: &Policy, record: &NoiseRecord) -> f64 {
    let horizon = sys.horizon();
    let mut cost = 0.0;
    let mut x = record.x0.clone();
    for t in 0..horizon {
        let u = -(pol.stage(t) * &x);
        cost += (x.transpose() * sys.q(t) * &x)[(0, 0)];
        cost += (u.transpose() * sys.r(t) * &u)[(0, 0)];
        x = &sys.a * &x + &sys.b * &u + &record.noises[t];
    }
    cost + (x.transpose() * sys.q(horizon) * &x)[(0, 0)]
}

/// Single-trajectory sampled cost with fresh randomness.
pub fn sample_cost<R: Rng + ?Sized>(sys: &LqSystem, pol: &Policy, rng: &mut R) -> f64 {
    let record = draw_noise_record(sys, rng);
    cost_with_record(sys, pol, &record)
}

/// State second moments `Sigma_0..Sigma_{T-1}` under `pol`:
/// `Sigma_0 = E[x_0 x_0']`, `Sigma_{t+1} = (A - B K_t) Sigma_t (A - B K_t)' + Cov(w)`.
pub fn state_covariances(sys: &LqSystem, pol: &Policy) -> Vec<DMatrix<f64>> {
    let horizon = sys.horizon();
    let mut sigmas = Vec::with_capacity(horizon);
    let mut sigma = sys.init.second_moment();
    for t in 0..horizon {
        sigmas.push(sigma.clone());
        if t + 1 < horizon {
            let closed = &sys.a - &sys.b * pol.stage(t);
            sigma = &closed * sigma * closed.transpose() + &sys.noise_cov;
            mat::symmetrize_in_place(&mut sigma);
        }
    }
    sigmas
}

/// Like `state_covariances` but including the terminal moment `Sigma_T`
/// (needed when propagating one step past the last decision stage).
pub fn state_covariances_full(sys: &LqSystem, pol: &Policy) -> Vec<DMatrix<f64>> {
    let horizon = sys.horizon();
    let mut sigmas = Vec::with_capacity(horizon + 1);
    let mut sigma = sys.init.second_moment();
    for t in 0..=horizon {
        sigmas.push(sigma.clone());
        if t < horizon {
            let closed = &sys.a - &sys.b * pol.stage(t);
            sigma = &closed * sigma * closed.transpose() + &sys.noise_cov;
            mat::symmetrize_in_place(&mut sigma);
        }
    }
    sigmas
}

/// Pooled least squares over all records: minimize
/// `sum_i 1/2 || A x_i + B u_i - x'_i ||^2` jointly in `(A, B)`.
pub fn estimate_dynamics(data: &DynamicsDataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if data.is_empty() {
        return Err(LqError::EmptySample("estimate_dynamics"));
    }
    let d = data.records[0].0.len();
    let p = data.records[0].1.len();
    let n = data.len();
    for (x, u, xn) in &data.records {
        if x.len() != d || u.len() != p || xn.len() != d {
            return Err(LqError::Dimension(
                "inconsistent record dimensions in dynamics dataset".into(),
            ));
        }
    }
    if n < d + p {
        return Err(LqError::InvalidParameter(format!(
            "need at least d + p = {} records, have {n}",
            d + p
        )));
    }
    let mut z = DMatrix::zeros(n, d + p);
    let mut target = DMatrix::zeros(n, d);
    for (i, (x, u, xn)) in data.records.iter().enumerate() {
        for j in 0..d {
            z[(i, j)] = x[j];
        }
        for j in 0..p {
            z[(i, d + j)] = u[j];
        }
        for j in 0..d {
            target[(i, j)] = xn[j];
        }
    }
    let svd = z.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(d + p) as f64) * f64::EPSILON * 16.0;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < d + p {
        return Err(LqError::SingularDesign {
            rank,
            needed: d + p,
        });
    }
    let theta_t = svd
        .solve(&target, tol)
        .map_err(|e| LqError::InvalidParameter(format!("least-squares solve failed: {e}")))?;
    let theta = theta_t.transpose(); // d x (d+p), columns [A | B]
    let a_hat = theta.columns(0, d).into_owned();
    let b_hat = theta.columns(d, p).into_owned();
    Ok((a_hat, b_hat))
}

/// Collect identification data: `m` trajectories under `pol` with additive
/// exploratory input noise `u_t = -K_t x_t + e_t`, `e_t ~ N(0, excitation^2 I)`.
/// A strictly feedback policy makes `B` unidentifiable, so excitation > 0 is
/// the sensible default for data collection.
pub fn collect_sysid_data<R: Rng + ?Sized>(
    sys: &LqSystem,
    pol: &Policy,
    trajectories: usize,
    excitation: f64,
    rng: &mut R,
) -> DynamicsDataset {
    let mut data = DynamicsDataset::default();
    let p = sys.control_dim();
    for _ in 0..trajectories {
        let mut x = sys.init.sample(rng);
        for t in 0..sys.horizon() {
            let mut u = -(pol.stage(t) * &x);
            if excitation > 0.0 {
                for j in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    u[j] += excitation * z;
                }
            }
            let w = sys.sample_noise(rng);
            let x_next = &sys.a * &x + &sys.b * &u + &w;
            data.push(x.clone(), u, x_next.clone());
            x = x_next;
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::StreamFactory;
    use nalgebra::{dmatrix, dvector};

    fn scalar_system(a: f64, b: f64, horizon: usize) -> LqSystem {
        LqSystem::new(
            dmatrix![a],
            dmatrix![b],
            vec![dmatrix![1.0]; horizon + 1],
            vec![dmatrix![1.0]; horizon],
            NoiseModel::None,
            InitModel::Point(dvector![1.0]),
        )
        .unwrap()
    }

    #[test]
    fn validation_flags_sign_flip_and_zero_matrix() {
        let sys = crate::presets::benchmark_4x2();
        assert!(validate_system(&sys).is_empty());

        let mut q = (0..=sys.horizon()).map(|t| sys.q(t).clone()).collect::<Vec<_>>();
        let horizon = sys.horizon();
        q[horizon] = -DMatrix::identity(4, 4);
        let bad = LqSystem::new(
            sys.a().clone(),
            sys.b().clone(),
            q,
            (0..horizon).map(|t| sys.r(t).clone()).collect(),
            NoiseModel::None,
            sys.init().clone(),
        )
        .unwrap();
        let violations = validate_system(&bad);
        assert!(violations.contains(&"Q[10] not positive definite".to_string()));

        let mut r = (0..horizon).map(|t| sys.r(t).clone()).collect::<Vec<_>>();
        r[0] = DMatrix::zeros(2, 2);
        let bad = LqSystem::new(
            sys.a().clone(),
            sys.b().clone(),
            (0..=horizon).map(|t| sys.q(t).clone()).collect(),
            r,
            NoiseModel::None,
            sys.init().clone(),
        )
        .unwrap();
        let violations = validate_system(&bad);
        assert!(violations.contains(&"R[0] not positive definite".to_string()));
    }

    #[test]
    fn spectral_radius_trivial_cases() {
        let d = 2;
        let sys = LqSystem::new(
            DMatrix::zeros(d, d),
            DMatrix::from_element(d, 1, 1.0),
            vec![DMatrix::identity(d, d); 3],
            vec![DMatrix::identity(1, 1); 2],
            NoiseModel::None,
            InitModel::Point(DVector::zeros(d)),
        )
        .unwrap();
        let k = DMatrix::zeros(1, d);
        assert!(spectral_radius(&sys, &k).unwrap() < 1e-14);

        let sys = LqSystem::new(
            DMatrix::identity(d, d),
            DMatrix::zeros(d, 1),
            vec![DMatrix::identity(d, d); 3],
            vec![DMatrix::identity(1, 1); 2],
            NoiseModel::None,
            InitModel::Point(DVector::zeros(d)),
        )
        .unwrap();
        let k = DMatrix::from_element(1, d, 7.0);
        assert!((spectral_radius(&sys, &k).unwrap() - 1.0).abs() < 1e-14);
    }

    /// Oracle: characteristic-polynomial roots by Durand-Kerner iteration,
    /// coefficients from the Faddeev-LeVerrier recursion. Shares no code
    /// with the Schur-based eigenvalue path.
    fn char_poly_spectral_radius(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        // Faddeev-LeVerrier: c[0] = 1 leading coefficient.
        let mut coeffs = vec![1.0f64];
        let mut aux = DMatrix::<f64>::identity(n, n);
        for k in 1..=n {
            aux = m * aux;
            let c = -aux.trace() / k as f64;
            coeffs.push(c);
            for i in 0..n {
                aux[(i, i)] += c;
            }
        }
        // Durand-Kerner on p(z) = sum coeffs[i] z^{n-i}.
        let mut roots: Vec<nalgebra::Complex::<f64>> = (0..n)
            .map(|i| nalgebra::Complex::<f64>::new(0.4, 0.9).powu(i as u32 + 1))
            .collect();
        let eval = |z: nalgebra::Complex::<f64>| {
            coeffs
                .iter()
                .fold(nalgebra::Complex::<f64>::new(0.0, 0.0), |acc, &c| acc * z + c)
        };
        for _ in 0..200 {
            let prev = roots.clone();
            for i in 0..n {
                let mut denom = nalgebra::Complex::<f64>::new(1.0, 0.0);
                for j in 0..n {
                    if j != i {
                        denom *= prev[i] - prev[j];
                    }
                }
                roots[i] = prev[i] - eval(prev[i]) / denom;
            }
        }
        roots.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn spectral_radius_matches_char_poly_oracle() {
        let sys = crate::presets::benchmark_4x2();
        let k = DMatrix::zeros(2, 4);
        let ours = spectral_radius(&sys, &k).unwrap();
        let oracle = char_poly_spectral_radius(sys.a());
        assert!(
            (ours - oracle).abs() < 1e-10,
            "schur {ours} vs char-poly {oracle}"
        );
    }

    #[test]
    fn noiseless_zero_start_stays_zero() {
        let sys = scalar_system(2.0, 1.0, 5);
        let sys = sys.with_init(InitModel::Point(dvector![0.0])).unwrap();
        let pol = Policy::uniform(5, 1, 1, 3.0);
        let mut rng = StreamFactory::new(1).stream(&[0]);
        let traj = simulate_trajectory(&sys, &pol, &mut rng);
        assert!(traj.states.iter().all(|x| x.amax() == 0.0));
        assert!(traj.controls.iter().all(|u| u.amax() == 0.0));
        assert_eq!(trajectory_cost(&sys, &traj), 0.0);
    }

    #[test]
    fn unit_closed_loop_holds_state() {
        // A=2, B=1, K=1 -> A-BK = 1, so x stays at 1.
        let sys = scalar_system(2.0, 1.0, 6);
        let pol = Policy::uniform(6, 1, 1, 1.0);
        let mut rng = StreamFactory::new(2).stream(&[0]);
        let traj = simulate_trajectory(&sys, &pol, &mut rng);
        for x in &traj.states {
            assert!((x[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_recursion_residual_is_tiny() {
        let sys = crate::presets::benchmark_4x2();
        let pol = Policy::uniform(sys.horizon(), 2, 4, 0.4);
        let mut rng = StreamFactory::new(3).stream(&[0]);
        for _ in 0..50 {
            let traj = simulate_trajectory(&sys, &pol, &mut rng);
            for t in 0..sys.horizon() {
                let pred = sys.a() * &traj.states[t] + sys.b() * &traj.controls[t]
                    + &traj.noises[t];
                let resid = (&traj.states[t + 1] - pred).norm();
                assert!(resid <= 1e-12 * (1.0 + traj.states[t].norm()));
                let u_pred = -(pol.stage(t) * &traj.states[t]);
                assert!((&traj.controls[t] - u_pred).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn hand_cost_example() {
        // d=p=1, T=1, Q0=Q1=1, R0=1, x0=1, K0=0, no noise, A=2 -> cost 5.
        let sys = scalar_system(2.0, 1.0, 1);
        let pol = Policy::uniform(1, 1, 1, 0.0);
        let mut rng = StreamFactory::new(4).stream(&[0]);
        let traj = simulate_trajectory(&sys, &pol, &mut rng);
        assert!((trajectory_cost(&sys, &traj) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn student_t_noise_matches_declared_covariance() {
        let cov = dmatrix![0.5, 0.2; 0.2, 0.4];
        let sys = LqSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            vec![DMatrix::identity(2, 2); 2],
            vec![DMatrix::identity(2, 2); 1],
            NoiseModel::StudentT {
                dof: 5.0,
                cov: cov.clone(),
            },
            InitModel::Point(DVector::zeros(2)),
        )
        .unwrap();
        let mut rng = StreamFactory::new(5).stream(&[0]);
        let n = 1_000_000usize;
        let mut acc = DMatrix::zeros(2, 2);
        let mut fourth = DMatrix::zeros(2, 2); // E[(w_i w_j)^2] accumulator for the SE
        for _ in 0..n {
            let w = sys.sample_noise(&mut rng);
            let outer = &w * w.transpose();
            fourth += outer.map(|v| v * v);
            acc += outer;
        }
        let emp = acc / n as f64;
        let fourth = fourth / n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = fourth[(i, j)] - emp[(i, j)] * emp[(i, j)];
                let se = (var / n as f64).sqrt();
                assert!(
                    (emp[(i, j)] - cov[(i, j)]).abs() <= 5.0 * se,
                    "entry ({i},{j}): emp {} vs {} (se {se})",
                    emp[(i, j)],
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn state_covariance_trivial_cases() {
        let sys = scalar_system(0.0, 0.0, 4);
        let sys = sys
            .with_noise(NoiseModel::Gaussian {
                cov: dmatrix![1.0],
            })
            .unwrap();
        let pol = Policy::uniform(4, 1, 1, 0.0);
        let sigmas = state_covariances(&sys, &pol);
        assert!((sigmas[0][(0, 0)] - 1.0).abs() < 1e-15); // x0 = 1 deterministic
        for s in &sigmas[1..] {
            assert!((s[(0, 0)] - 1.0).abs() < 1e-15); // pure noise
        }

        let sys = scalar_system(2.0, 1.0, 4)
            .with_init(InitModel::Point(dvector![0.0]))
            .unwrap();
        for s in state_covariances(&sys, &Policy::uniform(4, 1, 1, 0.0)) {
            assert_eq!(s[(0, 0)], 0.0);
        }
    }

    #[test]
    fn state_covariance_matches_monte_carlo() {
        let sys = crate::presets::benchmark_4x2();
        let pol = Policy::uniform(sys.horizon(), 2, 4, 0.0);
        let sigmas = state_covariances(&sys, &pol);

        let mut rng = StreamFactory::new(6).stream(&[0]);
        let n = 200_000usize;
        let mut acc = DMatrix::zeros(4, 4);
        let mut sq = DMatrix::zeros(4, 4);
        for _ in 0..n {
            let x0 = sys.init().sample(&mut rng);
            let w = sys.sample_noise(&mut rng);
            let x1 = sys.a() * x0 + w; // K = 0
            let outer = &x1 * x1.transpose();
            sq += outer.map(|v| v * v);
            acc += outer;
        }
        let emp = acc / n as f64;
        let sq = sq / n as f64;
        for i in 0..4 {
            for j in 0..4 {
                let se = ((sq[(i, j)] - emp[(i, j)] * emp[(i, j)]) / n as f64).sqrt();
                assert!(
                    (emp[(i, j)] - sigmas[1][(i, j)]).abs() <= 3.0 * se,
                    "Sigma_1 entry ({i},{j}): mc {} vs {}",
                    emp[(i, j)],
                    sigmas[1][(i, j)]
                );
            }
        }
    }

    #[test]
    fn estimate_dynamics_exact_on_noiseless_data() {
        let a = dmatrix![0.9, 0.1; -0.2, 0.7];
        let b = dmatrix![0.5; 1.0];
        let mut data = DynamicsDataset::default();
        let mut rng = StreamFactory::new(7).stream(&[0]);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = DVector::from_fn(1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let xn = &a * &x + &b * &u;
            data.push(x, u, xn);
        }
        let (ah, bh) = estimate_dynamics(&data).unwrap();
        assert!((ah - a).amax() < 1e-8);
        assert!((bh - b).amax() < 1e-8);
    }

    #[test]
    fn estimate_dynamics_rejects_unexcited_controls() {
        let a = dmatrix![0.9, 0.1; -0.2, 0.7];
        let mut data = DynamicsDataset::default();
        let mut rng = StreamFactory::new(8).stream(&[0]);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = DVector::zeros(1);
            let xn = &a * &x;
            data.push(x, u, xn);
        }
        match estimate_dynamics(&data) {
            Err(LqError::SingularDesign { rank, needed }) => {
                assert_eq!(rank, 2);
                assert_eq!(needed, 3);
            }
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn estimate_dynamics_error_shrinks_with_sample_size() {
        // Root-n consistency: quadrupling the record count should roughly
        // halve the entrywise error of A-hat (ratio in [0.3, 0.7] on average).
        let sys = crate::presets::benchmark_4x2();
        let pol = Policy::uniform(sys.horizon(), 2, 4, 0.0);
        let factory = StreamFactory::new(9);
        let mut ratios = Vec::new();
        for seed in 0..50u64 {
            let mut rng = factory.stream(&[seed]);
            let err = |records: usize, rng: &mut rand_chacha::ChaCha12Rng| {
                let trajectories = records / sys.horizon();
                let data = collect_sysid_data(&sys, &pol, trajectories, 1.0, rng);
                let (ah, _) = estimate_dynamics(&data).unwrap();
                (ah - sys.a()).abs().sum() / 16.0
            };
            let e500 = err(500, &mut rng);
            let e2000 = err(2000, &mut rng);
            ratios.push(e2000 / e500);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (0.3..=0.7).contains(&mean),
            "error ratio {mean} outside [0.3, 0.7]"
        );
    }
}

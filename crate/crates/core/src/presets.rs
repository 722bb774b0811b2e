//! Bundled benchmark systems used by tests and shipped as example spec files.

use nalgebra::{dmatrix, dvector, DMatrix};

use crate::system::{InitModel, LqSystem, NoiseModel, Policy};

/// Four-state, two-input benchmark with horizon 10: mildly stable drift,
/// one strong actuator per input channel, correlated control costs, and a
/// diagonal noise covariance. Initial coordinates are independent Gaussians
/// with distinctly nonzero means, so the state second moment is dominated
/// by the mean direction.
pub fn benchmark_4x2() -> LqSystem {
    let a = dmatrix![
        0.5,  0.05, 0.1,  0.2;
        0.0,  0.2,  0.3,  0.1;
        0.06, 0.1,  0.2,  0.4;
        0.05, 0.2,  0.15, 0.1
    ];
    let b = dmatrix![
        -0.05,  -0.01;
        -0.005, -0.01;
        -1.0,   -0.01;
        -0.01,   0.9
    ];
    let r = dmatrix![
        0.4,  -0.25;
        -0.25, 0.7
    ];
    let q = dmatrix![
        1.0,    0.2,  -0.0275, 0.015;
        0.2,    1.1,   0.15,   0.0;
        -0.0275, 0.15, 0.9,   -0.08;
        0.015,  0.0,  -0.08,   0.88
    ];
    let noise_cov = DMatrix::from_diagonal(&dvector![0.1, 0.5, 0.2, 0.3]);
    let horizon = 10;
    LqSystem::new(
        a,
        b,
        vec![q; horizon + 1],
        vec![r; horizon],
        NoiseModel::Gaussian { cov: noise_cov },
        InitModel::IndependentGaussian {
            means: dvector![5.0, 2.0, 8.0, 5.0],
            variances: dvector![0.1, 0.3, 1.0, 0.5],
        },
    )
    .expect("benchmark system is well formed")
}

/// The conventional starting policy for the 4x2 benchmark: every gain entry 0.4.
pub fn benchmark_initial_policy(sys: &LqSystem) -> Policy {
    Policy::uniform(sys.horizon(), sys.control_dim(), sys.state_dim(), 0.4)
}

/// The 4x2 benchmark with a whitened initial state: zero means and unit
/// variances. The dynamics and costs are unchanged, but the state second
/// moment is well conditioned, so the averaged-iterate asymptotics become
/// observable at desk-scale iteration budgets. Used by the regime
/// diagnostics.
pub fn whitened_4x2() -> LqSystem {
    benchmark_4x2()
        .with_init(InitModel::IndependentGaussian {
            means: dvector![0.0, 0.0, 0.0, 0.0],
            variances: dvector![1.0, 1.0, 1.0, 1.0],
        })
        .expect("whitened variant is well formed")
}

/// Scalar sanity system: d = p = 1, A = 0.5, B = 1, Q = R = 1, T = 2,
/// deterministic unit start, no noise.
pub fn scalar_1x1() -> LqSystem {
    LqSystem::new(
        dmatrix![0.5],
        dmatrix![1.0],
        vec![dmatrix![1.0]; 3],
        vec![dmatrix![1.0]; 2],
        NoiseModel::None,
        InitModel::Point(dvector![1.0]),
    )
    .expect("scalar system is well formed")
}

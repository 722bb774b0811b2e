//! Small dense-matrix and scalar-statistics helpers shared across modules.
//!
//! The `vec{...}` convention throughout the crate is column-major stacking,
//! which is also how `nalgebra` stores `DMatrix`, so `as_slice` on a matrix
//! is already its vectorization and `vec{A X B} = (B' ⊗ A) vec{X}` holds
//! with `kronecker` as provided.

use nalgebra::{DMatrix, DVector};

use crate::error::{LqError, Result};

/// `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a matrix assumed symmetric (symmetrized first).
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    symmetrize(m).symmetric_eigen().eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).min()
}

/// Condition number of a symmetric positive semidefinite matrix,
/// `+inf` when the smallest eigenvalue is not positive.
pub fn sym_condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = sym_eigenvalues(m);
    let max = eig.amax();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric square root of a PSD matrix. Eigenvalues below
/// `-1e-10 * lambda_max` are rejected; small negatives are clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let se = symmetrize(m).symmetric_eigen();
    let lmax = se.eigenvalues.amax().max(0.0);
    let mut d = se.eigenvalues.clone();
    for v in d.iter_mut() {
        if *v < -1e-10 * lmax.max(1.0) {
            return Err(LqError::InvalidParameter(format!(
                "matrix is not positive semidefinite (eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let mut out = &se.eigenvectors * DMatrix::from_diagonal(&d) * se.eigenvectors.transpose();
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Solve `M X = Rhs` for symmetric positive definite `M` via Cholesky,
/// reporting the condition number on failure or when it exceeds `max_cond`.
pub fn spd_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    max_cond: f64,
    context: &str,
) -> Result<DMatrix<f64>> {
    let cond = sym_condition_number(m);
    if !cond.is_finite() || cond > max_cond {
        return Err(LqError::IllConditioned {
            context: context.to_string(),
            cond,
        });
    }
    symmetrize(m)
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or_else(|| LqError::IllConditioned {
            context: context.to_string(),
            cond,
        })
}

/// Empirical quantile with linear interpolation between order statistics at
/// plotting positions `(i - 1) / (len - 1)`, `i = 1..len`. `sorted` must be
/// ascending and nonempty.
pub fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Standard-normal quantile (Acklam's rational approximation, refined with
/// one Halley step; accurate to ~1e-15 over (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile needs p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley refinement against the exact CDF.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Standard-normal CDF via `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (W. J. Cody-style rational/asymptotic blend,
/// ~1e-14 relative accuracy; adequate for quantile refinement and tests).
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 0.5 {
        return 1.0 - erf_series(x);
    }
    // Continued-fraction-free: use the scaled asymptotic-safe formula
    // erfc(x) = exp(-x^2) * P(1/x) via Numerical-Recipes erfccheb-style fit.
    let z = x;
    let t = 2.0 / (2.0 + z);
    let ty = 4.0 * t - 2.0;
    const COF: [f64; 28] = [
        -1.3026537197817094,
        6.4196979235649026e-1,
        1.9476473204185836e-2,
        -9.561514786808631e-3,
        -9.46595344482036e-4,
        3.66839497852761e-4,
        4.2523324806907e-5,
        -2.0278578112534e-5,
        -1.624290004647e-6,
        1.303655835580e-6,
        1.5626441722e-8,
        -8.5238095915e-8,
        6.529054439e-9,
        5.059343495e-9,
        -9.91364156e-10,
        -2.27365122e-10,
        9.6467911e-11,
        2.394038e-12,
        -6.886027e-12,
        8.94487e-13,
        3.13092e-13,
        -1.12708e-13,
        3.81e-16,
        7.106e-15,
        -1.523e-15,
        -9.4e-17,
        1.21e-16,
        -2.8e-17,
    ];
    let mut d = 0.0;
    let mut dd = 0.0;
    for &c in COF.iter().skip(1).rev() {
        let tmp = d;
        d = ty * d - dd + c;
        dd = tmp;
    }
    t * (-z * z + 0.5 * (COF[0] + ty * d) - dd).exp()
}

fn erf_series(x: f64) -> f64 {
    // Maclaurin series, converges fast for |x| < 0.5.
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    let mut n = 0usize;
    while term.abs() > 1e-17 * sum.abs() {
        n += 1;
        term *= -x2 / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Sample mean and (n-1)-normalized standard deviation.
pub fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn quantile_interpolation_matches_hand_values() {
        let xs = [-1.0, 1.0];
        assert_eq!(interpolated_quantile(&xs, 0.25), -0.5);
        assert_eq!(interpolated_quantile(&xs, 0.75), 0.5);
        assert_eq!(interpolated_quantile(&xs, 0.0), -1.0);
        assert_eq!(interpolated_quantile(&xs, 1.0), 1.0);
        let ys = [1.0, 2.0, 4.0];
        assert_eq!(interpolated_quantile(&ys, 0.5), 2.0);
        assert_eq!(interpolated_quantile(&ys, 0.75), 3.0);
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.84134474606854293) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn erfc_reference_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-15);
        assert!((erfc(1.0) - 0.15729920705028513).abs() < 1e-13);
        assert!((erfc(-1.0) - 1.8427007929497149).abs() < 1e-13);
        assert!((erfc(3.0) - 2.209049699858544e-5).abs() < 1e-17);
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = dmatrix![4.0, 1.0; 1.0, 2.0];
        let s = sqrt_psd(&m).unwrap();
        assert!(((&s * &s) - &m).abs().max() < 1e-12);
    }

    #[test]
    fn spd_solve_flags_ill_conditioned() {
        let m = dmatrix![1.0, 0.0; 0.0, 1e-20];
        let rhs = DMatrix::identity(2, 2);
        assert!(matches!(
            spd_solve(&m, &rhs, 1e14, "test"),
            Err(LqError::IllConditioned { .. })
        ));
    }
}

//! System-spec files: a TOML key-value tree describing one problem
//! instance.
//!
//! ```toml
//! horizon = 10
//!
//! [dims]
//! d = 4
//! p = 2
//!
//! [matrices]
//! A = [[0.5, 0.05], [0.0, 0.2]]   # row-major
//! B = [[1.0], [0.0]]
//! Q = [[1.0, 0.0], [0.0, 1.0]]    # one matrix for all t, or a list of T+1
//! R = [[1.0]]                     # one matrix for all t, or a list of T
//!
//! [noise]
//! type = "gaussian"               # none | gaussian | student_t
//! covariance = [[0.1, 0.0], [0.0, 0.1]]
//! # dof = 5.0                     # student_t only
//!
//! [init]
//! type = "independent_gaussian"   # point | independent_gaussian | pool
//! means = [5.0, 2.0]
//! variances = [0.1, 0.3]
//! # x0 = [...]                    # point
//! # states = [[...], [...]]      # pool
//! ```

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{LqError, Result};
use crate::system::{InitModel, LqSystem, NoiseModel};

#[derive(Debug, Deserialize)]
struct SpecFile {
    dims: Dims,
    horizon: usize,
    matrices: Matrices,
    noise: NoiseSection,
    init: InitSection,
}

#[derive(Debug, Deserialize)]
struct Dims {
    d: usize,
    p: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Vec<Vec<f64>>),
    Many(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Deserialize)]
struct Matrices {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: OneOrMany,
    #[serde(rename = "R")]
    r: OneOrMany,
}

#[derive(Debug, Deserialize)]
struct NoiseSection {
    #[serde(rename = "type")]
    kind: String,
    covariance: Option<Vec<Vec<f64>>>,
    dof: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct InitSection {
    #[serde(rename = "type")]
    kind: String,
    x0: Option<Vec<f64>>,
    means: Option<Vec<f64>>,
    variances: Option<Vec<f64>>,
    states: Option<Vec<Vec<f64>>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(LqError::SpecFile(format!(
            "{name} must be {nrows}x{ncols} (row-major rows of equal length)"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn matrix_list(
    spec: &OneOrMany,
    count: usize,
    nrows: usize,
    ncols: usize,
    name: &str,
) -> Result<Vec<DMatrix<f64>>> {
    match spec {
        OneOrMany::One(rows) => {
            let m = matrix_from_rows(rows, nrows, ncols, name)?;
            Ok(vec![m; count])
        }
        OneOrMany::Many(list) => {
            if list.len() != count {
                return Err(LqError::SpecFile(format!(
                    "{name} list must have {count} matrices, found {}",
                    list.len()
                )));
            }
            list.iter()
                .enumerate()
                .map(|(i, rows)| matrix_from_rows(rows, nrows, ncols, &format!("{name}[{i}]")))
                .collect()
        }
    }
}

/// Parse a system-spec document.
pub fn parse_system(text: &str) -> Result<LqSystem> {
    let spec: SpecFile =
        toml::from_str(text).map_err(|e| LqError::SpecFile(format!("TOML parse error: {e}")))?;
    let (d, p) = (spec.dims.d, spec.dims.p);
    if d == 0 || p == 0 || spec.horizon == 0 {
        return Err(LqError::SpecFile(
            "dims.d, dims.p and horizon must all be >= 1".into(),
        ));
    }
    let a = matrix_from_rows(&spec.matrices.a, d, d, "A")?;
    let b = matrix_from_rows(&spec.matrices.b, d, p, "B")?;
    let q = matrix_list(&spec.matrices.q, spec.horizon + 1, d, d, "Q")?;
    let r = matrix_list(&spec.matrices.r, spec.horizon, p, p, "R")?;

    let noise = match spec.noise.kind.as_str() {
        "none" => NoiseModel::None,
        "gaussian" => {
            let cov = spec.noise.covariance.as_deref().ok_or_else(|| {
                LqError::SpecFile("gaussian noise needs a covariance matrix".into())
            })?;
            NoiseModel::Gaussian {
                cov: matrix_from_rows(cov, d, d, "noise.covariance")?,
            }
        }
        "student_t" => {
            let cov = spec.noise.covariance.as_deref().ok_or_else(|| {
                LqError::SpecFile("student_t noise needs a covariance matrix".into())
            })?;
            NoiseModel::StudentT {
                dof: spec.noise.dof.unwrap_or(5.0),
                cov: matrix_from_rows(cov, d, d, "noise.covariance")?,
            }
        }
        other => {
            return Err(LqError::SpecFile(format!(
                "unknown noise type '{other}' (expected none | gaussian | student_t)"
            )))
        }
    };

    let init = match spec.init.kind.as_str() {
        "point" => {
            let x0 = spec
                .init
                .x0
                .as_deref()
                .ok_or_else(|| LqError::SpecFile("point init needs x0".into()))?;
            InitModel::Point(DVector::from_column_slice(x0))
        }
        "independent_gaussian" => {
            let means = spec
                .init
                .means
                .as_deref()
                .ok_or_else(|| LqError::SpecFile("independent_gaussian init needs means".into()))?;
            let variances = spec.init.variances.as_deref().ok_or_else(|| {
                LqError::SpecFile("independent_gaussian init needs variances".into())
            })?;
            if variances.iter().any(|&v| v < 0.0) {
                return Err(LqError::SpecFile("init variances must be >= 0".into()));
            }
            InitModel::IndependentGaussian {
                means: DVector::from_column_slice(means),
                variances: DVector::from_column_slice(variances),
            }
        }
        "pool" => {
            let states = spec
                .init
                .states
                .as_deref()
                .ok_or_else(|| LqError::SpecFile("pool init needs states".into()))?;
            InitModel::Pool(
                states
                    .iter()
                    .map(|s| DVector::from_column_slice(s))
                    .collect(),
            )
        }
        other => {
            return Err(LqError::SpecFile(format!(
                "unknown init type '{other}' (expected point | independent_gaussian | pool)"
            )))
        }
    };

    LqSystem::new(a, b, q, r, noise, init)
}

/// Load a system-spec file from disk.
pub fn load_system(path: &std::path::Path) -> Result<LqSystem> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LqError::SpecFile(format!("cannot read {}: {e}", path.display())))?;
    parse_system(&text)
}

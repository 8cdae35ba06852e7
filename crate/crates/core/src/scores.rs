//! The two hallucination metrics: exact EigenScore and its Efficient
//! EigenScore approximation.
//!
//! Given K generation embeddings as the columns of `E ∈ R^{d×K}`:
//!
//! - [`exact_eigenscore`] centers the columns about their mean column,
//!   forms the K×K covariance `Σ = E_cᵀE_c`, regularizes with `α·I`, and
//!   returns the mean log-eigenvalue `(1/K)·Σ log λ_i`. Higher values mean
//!   more semantic divergence among the generations.
//! - [`efficient_eigenscore`] runs the spectral pipeline instead:
//!   standardize rows, scale by the dominant singular value from the power
//!   method, estimate Chebyshev DOS moments stochastically, and contract
//!   them against cached log coefficients. It never materializes the
//!   covariance, which is the point: cost is a fixed number of
//!   matrix-vector products instead of a K×K eigendecomposition.
//!
//! The two paths deliberately follow different normalizations (column
//! centering vs row standardization), so EES lives on its own scale; it
//! tracks the exact score in rank order rather than in value.

use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::spectral::{self, LogCoefficients, SpectralError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;
use thiserror::Error;

/// Default covariance regularization strength.
pub const DEFAULT_ALPHA: f64 = 1e-3;

/// Exact path switches from the Jacobi oracle to the Householder+QL solver
/// above this covariance size; the two agree to ~1e-10 and are
/// cross-validated in tests, Jacobi just stops being affordable.
const JACOBI_SIZE_LIMIT: usize = 128;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("need at least 2 generation columns, got {got}")]
    InsufficientGenerations { got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("power method failed while scaling the spectrum: {0}")]
    PowerMethod(LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Knobs for the Efficient EigenScore approximation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EesConfig {
    /// Number of Chebyshev terms M (series runs m = 0..=M).
    pub moments: usize,
    /// Stochastic trace probes N_z.
    pub trace_samples: usize,
    /// Gauss-Chebyshev quadrature resolution N_q.
    pub quad_points: usize,
    /// Floor applied to the log argument inside the quadrature.
    pub lambda_floor: f64,
    /// Relative-change convergence tolerance for the power method.
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Master seed; probe and start-vector streams derive from it.
    pub seed: u64,
}

impl Default for EesConfig {
    fn default() -> Self {
        Self {
            moments: 20,
            trace_samples: 32,
            quad_points: 2048,
            lambda_floor: 1e-8,
            power_tol: 1e-9,
            power_max_iter: 10_000,
            seed: 0,
        }
    }
}

impl EesConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.trace_samples == 0 {
            return Err(ScoreError::InvalidConfig(
                "trace_samples must be >= 1".into(),
            ));
        }
        if self.quad_points < 4 * (self.moments + 1) {
            return Err(ScoreError::InvalidConfig(format!(
                "quad_points = {} below 4(M+1) = {}",
                self.quad_points,
                4 * (self.moments + 1)
            )));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor <= 1e-3) {
            return Err(ScoreError::InvalidConfig(format!(
                "lambda_floor = {} outside (0, 1e-3]",
                self.lambda_floor
            )));
        }
        if !(self.power_tol > 0.0) {
            return Err(ScoreError::InvalidConfig("power_tol must be > 0".into()));
        }
        if self.power_max_iter == 0 {
            return Err(ScoreError::InvalidConfig(
                "power_max_iter must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Exact,
    Ees,
}

/// Which configuration produced a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigEcho {
    Exact { alpha: f64 },
    Ees(EesConfig),
}

/// A scored matrix: the value, which path produced it, and how long the
/// path took on a monotonic clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub value: f64,
    pub method: ScoreMethod,
    pub elapsed_seconds: f64,
    pub matrix_rows: usize,
    pub matrix_cols: usize,
    pub config: ConfigEcho,
}

/// Exact EigenScore: `(1/K)·Σ log λ_i(Σ + αI)` with `Σ` the column-centered
/// K×K covariance of the generation embeddings.
pub fn exact_eigenscore(e: &DenseMatrix, alpha: f64) -> Result<ScoreReport, ScoreError> {
    if e.cols() < 2 {
        return Err(ScoreError::InsufficientGenerations { got: e.cols() });
    }
    if !(alpha > 0.0) {
        return Err(ScoreError::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let start = Instant::now();
    let centered = linalg::center_columns(e);
    let mut cov = linalg::gram_matrix(&centered);
    let k = e.cols();
    for i in 0..k {
        cov.set(i, i, cov.get(i, i) + alpha);
    }
    let eigs = if k <= JACOBI_SIZE_LIMIT {
        linalg::symmetric_eigenvalues(&cov)?
    } else {
        linalg::symmetric_eigenvalues_fast(&cov)?
    };
    // Σ + αI is positive definite; clamp only round-off straying below α.
    let value = eigs
        .as_slice()
        .iter()
        .map(|&l| l.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / k as f64;
    Ok(ScoreReport {
        value,
        method: ScoreMethod::Exact,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        matrix_rows: e.rows(),
        matrix_cols: e.cols(),
        config: ConfigEcho::Exact { alpha },
    })
}

/// Process-wide cache of log coefficients: they depend only on
/// (moments, quad_points, floor) and are reused across scores.
fn cached_log_coefficients(
    moments: usize,
    quad_points: usize,
    floor: f64,
) -> Result<Arc<LogCoefficients>, SpectralError> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Arc<LogCoefficients>>>> =
        OnceLock::new();
    let key = (moments, quad_points, floor.to_bits());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let computed = Arc::new(spectral::log_cheb_coefficients(
        moments,
        quad_points,
        floor,
    )?);
    cache
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| computed.clone());
    Ok(computed)
}

/// Efficient EigenScore: standardize, scale by the dominant singular value,
/// estimate DOS moments, contract against the log coefficients.
///
/// Deterministic given `cfg.seed`. Identical generations collapse to the
/// zero operator after standardization; the score then sits at the
/// floor-dominated minimum of its range rather than erroring.
pub fn efficient_eigenscore(e: &DenseMatrix, cfg: &EesConfig) -> Result<ScoreReport, ScoreError> {
    cfg.validate()?;
    if e.cols() < 2 {
        return Err(ScoreError::InsufficientGenerations { got: e.cols() });
    }
    let start = Instant::now();
    let mut scaled = linalg::standardize_columns(e)?;
    match linalg::power_method(
        &scaled,
        cfg.power_tol,
        cfg.power_max_iter,
        linalg::derive_seed(cfg.seed, 0x7077_6572),
    ) {
        Ok(sigma) => scaled.scale_in_place(1.0 / sigma),
        // Zero operator: spectrum is {0}, already inside [0, 1].
        Err(LinalgError::DegenerateSpectrum) => {}
        Err(err) => return Err(ScoreError::PowerMethod(err)),
    }
    let d = spectral::dos_moments(&scaled, cfg.moments, cfg.trace_samples, cfg.seed)?;
    let c = cached_log_coefficients(cfg.moments, cfg.quad_points, cfg.lambda_floor)?;
    let value = spectral::combine_ees(&d, &c, e.cols())?;
    Ok(ScoreReport {
        value,
        method: ScoreMethod::Ees,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        matrix_rows: e.rows(),
        matrix_cols: e.cols(),
        config: ConfigEcho::Ees(cfg.clone()),
    })
}

/// Both scores on the same input, timed independently.
pub fn score_pair(
    e: &DenseMatrix,
    alpha: f64,
    cfg: &EesConfig,
) -> Result<(ScoreReport, ScoreReport), ScoreError> {
    let exact = exact_eigenscore(e, alpha)?;
    let ees = efficient_eigenscore(e, cfg)?;
    Ok((exact, ees))
}

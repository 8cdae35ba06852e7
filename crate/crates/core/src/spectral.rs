//! Chebyshev spectral machinery behind the Efficient EigenScore.
//!
//! # The approximation
//!
//! The exact EigenScore of an embedding matrix needs every eigenvalue of a
//! covariance matrix. The trace identity `trace(f(C)) = Σ f(λ_i)` lets the
//! same quantity be written as the integral of `f = log` against the
//! spectral density (density of states, DOS) of `C`, and the kernel
//! polynomial method approximates that integral with a truncated Chebyshev
//! expansion:
//!
//! ```text
//!   (1/K) Σ_i log λ_i ≈ Σ_{m=0}^{M} d_m c_m
//! ```
//!
//! where
//!
//! - `d_m = (1/K)·trace(T_m(C_s))` are the DOS moments, estimated
//!   stochastically from quadratic forms `zᵀ T_m(C_s) z` with Gaussian
//!   probes ([`dos_moments`]), each `T_m(C_s)·z` coming from the three-term
//!   recurrence so only matrix-vector products against the embedding
//!   matrix are ever needed ([`cheb_apply_sequence`]);
//! - `c_m` are the Chebyshev expansion coefficients of `log λ` on the unit
//!   interval, computed once per configuration by Gauss–Chebyshev
//!   quadrature ([`log_cheb_coefficients`]).
//!
//! # Domain convention
//!
//! Chebyshev orthogonality lives on `[−1, 1]` while the scaled covariance
//! spectrum lives on `[0, 1]`, so everything here uses the shifted
//! variable `x = 2λ − 1`: the operator recurrence runs on `C_s = 2C − I`,
//! the quadrature nodes are `λ_j = (1 + cos(π(j+½)/N_q))/2`, and the dual
//! weight carries the matching `1/√(λ(1−λ))` factor. With that pairing the
//! expansion `Σ c_m T_m(2λ−1)` reproduces `log λ` pointwise and the moment
//! /coefficient contraction above is the exact truncated-series value.
//!
//! The `log` singularity at `λ = 0` is handled two ways: the quadrature
//! evaluates `log(max(λ, floor))`, and the rule is internally evaluated on
//! at least 2^18 nodes regardless of the requested resolution — the
//! endpoint singularity aliases into every coefficient at roughly
//! `ln2/N_q`, so small node counts silently cost four digits of accuracy.

use crate::linalg::{self, DenseMatrix, LinalgError, Vector};
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("intermediate Chebyshev vector norms exploded ({factor:.3e}x the probe norm at term {term}); operator spectrum is outside [0, 1]")]
    SpectrumOutOfRange { term: usize, factor: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: moments has {moments}, coefficients has {coeffs}")]
    LengthMismatch { moments: usize, coeffs: usize },
}

/// Stochastically estimated DOS moments `d_0..d_M`.
#[derive(Debug, Clone)]
pub struct MomentSet {
    moments: Vec<f64>,
    n_samples: usize,
    seed: u64,
}

impl MomentSet {
    /// Highest moment order M (length is M+1).
    pub fn order(&self) -> usize {
        self.moments.len() - 1
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Chebyshev expansion coefficients of the floored logarithm, `c_0..c_M`.
///
/// Pure function of `(M, N_q, lambda_floor)`; callers cache and reuse these
/// across scores.
#[derive(Debug, Clone)]
pub struct LogCoefficients {
    coeffs: Vec<f64>,
    quad_points: usize,
}

impl LogCoefficients {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn quad_points(&self) -> usize {
        self.quad_points
    }
}

/// Chebyshev polynomial of the first kind `T_n(x)` by the three-term
/// recurrence, with `x` clamped to `[−1, 1]`.
pub fn cheb_eval(n: usize, x: f64) -> f64 {
    let x = x.clamp(-1.0, 1.0);
    if n == 0 {
        return 1.0;
    }
    let mut t_prev = 1.0;
    let mut t = x;
    for _ in 1..n {
        let t_next = 2.0 * x * t - t_prev;
        t_prev = t;
        t = t_next;
    }
    t
}

/// Growth guard for the operator recurrence: if the spectrum leaks outside
/// [0, 1] the Chebyshev iterates grow exponentially and the quadratic forms
/// are meaningless.
const NORM_EXPLOSION_FACTOR: f64 = 1e8;

/// Quadratic forms `q_m = zᵀ T_m(C_s) z` for `m = 0..M`, where
/// `C_s = 2·EᵀE − I` is the shifted Gram operator of an already
/// standardized-and-scaled embedding matrix.
///
/// Runs the vector recurrence `t_{m+1} = 2·C_s·t_m − t_{m−1}`, costing
/// exactly M applications of the Gram operator and never materializing it.
pub fn cheb_apply_sequence(
    e_norm: &DenseMatrix,
    z: &Vector,
    order: usize,
) -> Result<Vec<f64>, SpectralError> {
    if e_norm.cols() != z.len() {
        return Err(SpectralError::Linalg(LinalgError::DimensionMismatch {
            context: "cheb_apply_sequence: E.cols vs z.len",
            expected: e_norm.cols(),
            got: z.len(),
        }));
    }
    let z_norm = z.norm();
    let guard = NORM_EXPLOSION_FACTOR * z_norm.max(f64::MIN_POSITIVE);
    let mut q = Vec::with_capacity(order + 1);

    // t0 = z
    q.push(linalg::dot(z.as_slice(), z.as_slice()));
    if order == 0 {
        return Ok(q);
    }
    // t1 = C_s z = 2·EᵀE·z − z
    let mut t_prev = z.clone();
    let mut t = shifted_apply(e_norm, z)?;
    q.push(linalg::dot(z.as_slice(), t.as_slice()));

    for m in 1..order {
        // t_{m+1} = 2·C_s·t_m − t_{m−1} = 4·EᵀE·t_m − 2·t_m − t_{m−1}
        let mut t_next = linalg::gram_apply(e_norm, &t)?;
        {
            let tn = t_next.as_mut_slice();
            let tm = t.as_slice();
            let tp = t_prev.as_slice();
            for i in 0..tn.len() {
                tn[i] = 4.0 * tn[i] - 2.0 * tm[i] - tp[i];
            }
        }
        let norm = t_next.norm();
        if norm > guard {
            return Err(SpectralError::SpectrumOutOfRange {
                term: m + 1,
                factor: norm / z_norm.max(f64::MIN_POSITIVE),
            });
        }
        q.push(linalg::dot(z.as_slice(), t_next.as_slice()));
        t_prev = t;
        t = t_next;
    }
    Ok(q)
}

/// One application of `C_s = 2·EᵀE − I`.
fn shifted_apply(e: &DenseMatrix, v: &Vector) -> Result<Vector, SpectralError> {
    let mut w = linalg::gram_apply(e, v)?;
    let ws = w.as_mut_slice();
    let vs = v.as_slice();
    for i in 0..ws.len() {
        ws[i] = 2.0 * ws[i] - vs[i];
    }
    Ok(w)
}

/// DOS moments `d_m = (1/K)·(1/N_z)·Σ_j zⱼᵀ T_m(C_s) zⱼ` with i.i.d.
/// standard Gaussian probes.
///
/// Probe j is drawn from stream j of a counter-based generator seeded with
/// `seed`, so the estimate is independent of evaluation order and exactly
/// reproducible. Internally the recurrence runs on the whole probe block
/// at once — one pass over the embedding matrix per Chebyshev term instead
/// of one per (term, probe) pair — which is algebraically identical to
/// averaging [`cheb_apply_sequence`] over probes.
pub fn dos_moments(
    e_norm: &DenseMatrix,
    order: usize,
    n_probes: usize,
    seed: u64,
) -> Result<MomentSet, SpectralError> {
    if n_probes == 0 {
        return Err(SpectralError::InvalidParameter(
            "dos_moments: n_probes must be >= 1".into(),
        ));
    }
    let k = e_norm.cols();
    let mut z = DenseMatrix::zeros(k, n_probes);
    for j in 0..n_probes {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let col = z.column_mut(j);
        for v in col.iter_mut() {
            *v = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        }
    }

    let z_norms: Vec<f64> = (0..n_probes)
        .map(|j| linalg::dot(z.column(j), z.column(j)).sqrt())
        .collect();
    let max_z_norm = z_norms.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let guard = NORM_EXPLOSION_FACTOR * max_z_norm;

    let inv = 1.0 / (k as f64 * n_probes as f64);
    let mut moments = Vec::with_capacity(order + 1);

    // q_0 = Σ_j ‖z_j‖²
    moments.push(z_norms.iter().map(|n| n * n).sum::<f64>() * inv);
    if order == 0 {
        return Ok(MomentSet {
            moments,
            n_samples: n_probes,
            seed,
        });
    }

    // T1 = C_s·Z
    let mut t_prev = z.clone();
    let mut t = {
        let mut w = linalg::gram_apply_block(e_norm, &z)?;
        for j in 0..n_probes {
            let wj = w.column_mut(j);
            let zj = &z.data()[j * k..(j + 1) * k];
            for i in 0..k {
                wj[i] = 2.0 * wj[i] - zj[i];
            }
        }
        w
    };
    moments.push(block_inner(&z, &t) * inv);

    for m in 1..order {
        let mut t_next = linalg::gram_apply_block(e_norm, &t)?;
        for j in 0..n_probes {
            let col = t_next.column_mut(j);
            let tm = &t.data()[j * k..(j + 1) * k];
            let tp = &t_prev.data()[j * k..(j + 1) * k];
            for i in 0..k {
                col[i] = 4.0 * col[i] - 2.0 * tm[i] - tp[i];
            }
        }
        let worst = (0..n_probes)
            .map(|j| linalg::dot(t_next.column(j), t_next.column(j)).sqrt())
            .fold(0.0f64, f64::max);
        if worst > guard {
            return Err(SpectralError::SpectrumOutOfRange {
                term: m + 1,
                factor: worst / max_z_norm,
            });
        }
        moments.push(block_inner(&z, &t_next) * inv);
        t_prev = t;
        t = t_next;
    }
    Ok(MomentSet {
        moments,
        n_samples: n_probes,
        seed,
    })
}

/// Σ_j dot(Z_j, W_j) over matching columns.
fn block_inner(z: &DenseMatrix, w: &DenseMatrix) -> f64 {
    (0..z.cols())
        .map(|j| linalg::dot(z.column(j), w.column(j)))
        .sum()
}

/// Rule evaluation never runs on fewer nodes than this; see the module docs
/// for why coarse rules lose four digits on the log endpoint singularity.
const MIN_QUAD_NODES: usize = 1 << 18;

/// Chebyshev expansion coefficients of `log(max(λ, lambda_floor))` over the
/// unit interval by Gauss–Chebyshev quadrature:
///
/// ```text
///   c_m = (2 − δ_{m0})/N · Σ_j log(max(λ_j, floor))·T_m(x_j),
///   x_j = cos(π(j+½)/N),  λ_j = (1 + x_j)/2
/// ```
///
/// Deterministic and cacheable: depends only on `(order, n_quad, floor)`.
pub fn log_cheb_coefficients(
    order: usize,
    n_quad: usize,
    lambda_floor: f64,
) -> Result<LogCoefficients, SpectralError> {
    if n_quad < 4 * (order + 1) {
        return Err(SpectralError::InvalidParameter(format!(
            "log_cheb_coefficients: n_quad = {n_quad} below 4(M+1) = {}",
            4 * (order + 1)
        )));
    }
    if !(lambda_floor > 0.0 && lambda_floor <= 1e-3) {
        return Err(SpectralError::InvalidParameter(format!(
            "log_cheb_coefficients: lambda_floor = {lambda_floor} outside (0, 1e-3]"
        )));
    }
    let n = n_quad.max(MIN_QUAD_NODES);
    let mut coeffs = vec![0.0; order + 1];
    for j in 0..n {
        let x = (std::f64::consts::PI * (j as f64 + 0.5) / n as f64).cos();
        let lam = 0.5 * (1.0 + x);
        let f = lam.max(lambda_floor).ln();
        // T_m(x) by recurrence, accumulated into every coefficient.
        let mut t_prev = 1.0;
        coeffs[0] += f;
        if order >= 1 {
            let mut t = x;
            coeffs[1] += f * t;
            for c in coeffs.iter_mut().skip(2) {
                let t_next = 2.0 * x * t - t_prev;
                *c += f * t_next;
                t_prev = t;
                t = t_next;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    coeffs[0] *= inv_n;
    for c in coeffs.iter_mut().skip(1) {
        *c *= 2.0 * inv_n;
    }
    Ok(LogCoefficients {
        coeffs,
        quad_points: n_quad,
    })
}

/// Contract moments against log coefficients: `(1/K)·Σ_m d_m·c_m`.
pub fn combine_ees(d: &MomentSet, c: &LogCoefficients, k: usize) -> Result<f64, SpectralError> {
    if d.moments.len() != c.coeffs.len() {
        return Err(SpectralError::LengthMismatch {
            moments: d.moments.len(),
            coeffs: c.coeffs.len(),
        });
    }
    if k == 0 {
        return Err(SpectralError::InvalidParameter(
            "combine_ees: K must be positive".into(),
        ));
    }
    let sum: f64 = d
        .moments
        .iter()
        .zip(c.coeffs.iter())
        .map(|(dm, cm)| dm * cm)
        .sum();
    Ok(sum / k as f64)
}

#[cfg(test)]
pub(crate) fn moment_set_for_tests(moments: Vec<f64>, n_samples: usize, seed: u64) -> MomentSet {
    MomentSet {
        moments,
        n_samples,
        seed,
    }
}

#[cfg(test)]
pub(crate) fn log_coefficients_for_tests(coeffs: Vec<f64>) -> LogCoefficients {
    LogCoefficients {
        quad_points: 0,
        coeffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gram_apply, symmetric_eigenvalues, DenseMatrix, Vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    // ====================================================================
    // Oracles
    // ====================================================================

    /// Dense matrix Chebyshev recurrence: materialize C_s = 2·EᵀE − I and
    /// iterate the matrix recurrence, then take the quadratic form.
    fn dense_cheb_quadratic_forms(e: &DenseMatrix, z: &[f64], order: usize) -> Vec<f64> {
        let k = e.cols();
        let gram = DenseMatrix::from_fn(k, k, |i, j| {
            (0..e.rows()).map(|r| e.get(r, i) * e.get(r, j)).sum()
        });
        let cs = DenseMatrix::from_fn(k, k, |i, j| {
            2.0 * gram.get(i, j) - if i == j { 1.0 } else { 0.0 }
        });
        let matmul = |a: &DenseMatrix, b: &DenseMatrix| {
            DenseMatrix::from_fn(k, k, |i, j| {
                (0..k).map(|r| a.get(i, r) * b.get(r, j)).sum()
            })
        };
        let qform = |m: &DenseMatrix| {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    acc += z[i] * m.get(i, j) * z[j];
                }
            }
            acc
        };
        let eye = DenseMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut out = vec![qform(&eye)];
        if order == 0 {
            return out;
        }
        let mut t_prev = eye;
        let mut t = cs.clone();
        out.push(qform(&t));
        for _ in 1..order {
            let mut t_next = matmul(&cs, &t);
            for i in 0..k {
                for j in 0..k {
                    t_next.set(i, j, 2.0 * t_next.get(i, j) - t_prev.get(i, j));
                }
            }
            out.push(qform(&t_next));
            t_prev = t;
            t = t_next;
        }
        out
    }

    /// Adaptive Simpson integration of the same coefficient integral in the
    /// θ domain, where the integrand is bounded:
    ///   c_m = (2−δ_{m0})/π ∫_0^π log(max((1+cos θ)/2, floor))·cos(mθ) dθ
    fn adaptive_cm(m: usize, floor: f64) -> f64 {
        let g = |t: f64| -> f64 {
            let lam = 0.5 * (1.0 + t.cos());
            lam.max(floor).ln() * (m as f64 * t).cos()
        };
        // Split at the floor boundary θ_f where λ(θ_f) = floor; the
        // integrand has a kink there and a steep log ramp just before it.
        // 1e-10 absolute leaves two digits of headroom under the 1e-4
        // relative comparison on the smallest coefficient (~0.1).
        let theta_f = std::f64::consts::PI - 2.0 * floor.sqrt().asin();
        let v = adaptive_simpson(&g, 0.0, theta_f, 1e-10, 48)
            + adaptive_simpson(&g, theta_f, std::f64::consts::PI, 1e-10, 48);
        let pref = if m == 0 { 1.0 } else { 2.0 } / std::f64::consts::PI;
        pref * v
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: usize) -> f64 {
        fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
            (b - a) / 6.0 * (fa + 4.0 * fm + fb)
        }
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            eps: f64,
            depth: usize,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = simpson(a, m, fa, flm, fm);
            let right = simpson(m, b, fm, frm, fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let fa = f(a);
        let fm = f(m);
        let fb = f(b);
        let whole = simpson(a, b, fa, fm, fb);
        rec(f, a, b, fa, fm, fb, whole, eps, depth)
    }

    // ====================================================================
    // cheb_eval
    // ====================================================================

    #[test]
    fn cheb_t0_is_one() {
        assert_eq!(cheb_eval(0, 0.7), 1.0);
    }

    #[test]
    fn cheb_t3_at_half() {
        // T_3(cos(π/3)) = cos(π) = -1
        assert!((cheb_eval(3, 0.5) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn cheb_matches_cosine_closed_form() {
        // T_n(cos θ) = cos(nθ)
        let theta = 0.3f64;
        let got = cheb_eval(25, theta.cos());
        assert!((got - (7.5f64).cos()).abs() < 1e-10);
        for n in 0..=100usize {
            for &th in &[0.0, 0.1, 0.7, 1.3, 2.2, std::f64::consts::PI] {
                let want = ((n as f64) * th).cos();
                assert!(
                    (cheb_eval(n, th.cos()) - want).abs() < 1e-9,
                    "n={n} theta={th}"
                );
            }
        }
    }

    // ====================================================================
    // cheb_apply_sequence
    // ====================================================================

    fn scaled_standardized(d: usize, k: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = DenseMatrix::gaussian(d, k, &mut rng);
        let s = crate::linalg::standardize_columns(&e).unwrap();
        let sigma = crate::linalg::power_method(&s, 1e-13, 100_000, seed ^ 0xabc).unwrap();
        let mut out = s;
        out.scale_in_place(1.0 / sigma);
        out
    }

    #[test]
    fn q0_is_probe_norm_squared() {
        let e = scaled_standardized(40, 8, 1);
        let z = Vector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = cheb_apply_sequence(&e, &z, 0).unwrap();
        assert_eq!(q.len(), 1);
        assert!((q[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn q1_is_shifted_quadratic_form() {
        let e = scaled_standardized(40, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Vector::new(
            (0..8)
                .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
                .collect(),
        )
        .unwrap();
        let q = cheb_apply_sequence(&e, &z, 1).unwrap();
        // zᵀC_s z = 2·zᵀ(EᵀE)z − zᵀz
        let cz = gram_apply(&e, &z).unwrap();
        let want = 2.0 * crate::linalg::dot(z.as_slice(), cz.as_slice())
            - crate::linalg::dot(z.as_slice(), z.as_slice());
        assert!(rel_err(q[1], want) < 1e-12);
    }

    #[test]
    fn sequence_matches_dense_matrix_recurrence() {
        let e = scaled_standardized(80, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..8)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
            .collect();
        let zv = Vector::new(z.clone()).unwrap();
        let got = cheb_apply_sequence(&e, &zv, 12).unwrap();
        let want = dense_cheb_quadratic_forms(&e, &z, 12);
        for (g, w) in got.iter().zip(&want) {
            assert!(
                (g - w).abs() < 1e-8 * w.abs().max(1.0),
                "got {g}, want {w}"
            );
        }
    }

    #[test]
    fn explosion_guard_fires_on_unscaled_spectrum() {
        // Deliberately skip the σ scaling: spectrum far outside [0,1].
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = DenseMatrix::gaussian(60, 6, &mut rng);
        let z = Vector::new(vec![1.0; 6]).unwrap();
        let res = cheb_apply_sequence(&e, &z, 40);
        assert!(matches!(
            res,
            Err(SpectralError::SpectrumOutOfRange { .. })
        ));
    }

    // ====================================================================
    // dos_moments
    // ====================================================================

    #[test]
    fn d0_concentrates_at_one() {
        // q_0 = ‖z‖² with E‖z‖² = K, so d_0 = mean(‖z‖²)/K ≈ 1.
        let e = scaled_standardized(30, 10, 7);
        let d = dos_moments(&e, 0, 10_000, 11).unwrap();
        assert!((d.moments()[0] - 1.0).abs() < 0.05, "{}", d.moments()[0]);
    }

    #[test]
    fn zero_operator_moments_follow_sign_pattern() {
        // C = 0 after the shift gives C_s = −I: T_m(−I) = (−1)^m·I, so
        // d_m = (−1)^m·d_0 exactly, probe by probe.
        let e = DenseMatrix::new(4, 4, vec![0.0; 16]).unwrap();
        let d = dos_moments(&e, 5, 64, 3).unwrap();
        for m in 0..=5 {
            let want = if m % 2 == 0 {
                d.moments()[0]
            } else {
                -d.moments()[0]
            };
            assert!(rel_err(d.moments()[m], want) < 1e-12);
        }
    }

    #[test]
    fn moments_within_three_standard_errors_of_trace_oracle() {
        let e = scaled_standardized(100, 10, 8);
        let order = 20;
        let n_z = 500;
        let d = dos_moments(&e, order, n_z, 17).unwrap();

        // Oracle: d_m = (1/K)·Σ_i T_m(2λ_i − 1) from the Jacobi spectrum.
        let gram = crate::linalg::gram_matrix(&e);
        let eigs = symmetric_eigenvalues(&gram).unwrap();
        let k = e.cols() as f64;
        for m in 0..=order {
            let tr: f64 = eigs
                .as_slice()
                .iter()
                .map(|&l| cheb_eval(m, 2.0 * l - 1.0))
                .sum();
            let want = tr / k;
            // Var(zᵀAz) = 2‖A‖_F² for Gaussian z; bound ‖T_m(C_s)‖_F² by K
            // since every eigenvalue of T_m(C_s) lies in [−1, 1].
            let se = (2.0 * k).sqrt() / (k * (n_z as f64).sqrt());
            assert!(
                (d.moments()[m] - want).abs() < 3.0 * se + 1e-12,
                "m={m}: got {}, want {want}, se {se}",
                d.moments()[m]
            );
        }
    }

    #[test]
    fn moments_are_deterministic_and_match_per_probe_path() {
        let e = scaled_standardized(50, 9, 9);
        let a = dos_moments(&e, 15, 33, 1234).unwrap();
        let b = dos_moments(&e, 15, 33, 1234).unwrap();
        assert_eq!(a.moments(), b.moments());
        // Against the per-probe path: identical probes, same averages.
        let mut acc = vec![0.0; 16];
        for j in 0..33 {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            rng.set_stream(j);
            let z = Vector::new(
                (0..9)
                    .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
                    .collect(),
            )
            .unwrap();
            let q = cheb_apply_sequence(&e, &z, 15).unwrap();
            for (a, q) in acc.iter_mut().zip(&q) {
                *a += q;
            }
        }
        for (m, a) in acc.iter().enumerate() {
            let want = a / (9.0 * 33.0);
            assert!(
                rel_err(b.moments()[m], want) < 1e-10,
                "m={m}: block {} vs per-probe {want}",
                b.moments()[m]
            );
        }
    }

    #[test]
    fn hutchinson_estimator_is_unbiased() {
        // Fixed SPD 10×10 A (trace well away from zero so the relative
        // bound is meaningful); mean of zᵀAz over 1e5 Gaussian probes
        // within 1% of trace(A).
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = DenseMatrix::gaussian(10, 10, &mut rng);
        let a = DenseMatrix::from_fn(10, 10, |i, j| {
            (0..10).map(|r| g.get(r, i) * g.get(r, j)).sum()
        });
        let trace: f64 = (0..10).map(|i| a.get(i, i)).sum();
        let n = 100_000usize;
        let mut mean = 0.0;
        for j in 0..n {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            r.set_stream(j as u64);
            let z: Vec<f64> = (0..10)
                .map(|_| rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal))
                .collect();
            let mut q = 0.0;
            for i in 0..10 {
                for k in 0..10 {
                    q += z[i] * a.get(i, k) * z[k];
                }
            }
            mean += q;
        }
        mean /= n as f64;
        assert!(
            rel_err(mean, trace) < 0.01,
            "mean {mean} vs trace {trace}"
        );
    }

    // ====================================================================
    // log_cheb_coefficients
    // ====================================================================

    #[test]
    fn coefficients_are_finite_at_high_order() {
        let c = log_cheb_coefficients(50, 1024, 1e-8).unwrap();
        assert_eq!(c.coeffs().len(), 51);
        assert!(c.coeffs().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn coefficients_match_adaptive_simpson_oracle() {
        let c = log_cheb_coefficients(20, 2048, 1e-8).unwrap();
        for m in 0..=20 {
            let want = adaptive_cm(m, 1e-8);
            assert!(
                rel_err(c.coeffs()[m], want) < 1e-4,
                "m={m}: quadrature {} vs oracle {want} (rel {:.2e})",
                c.coeffs()[m],
                rel_err(c.coeffs()[m], want)
            );
        }
    }

    #[test]
    fn coefficients_match_closed_form_where_floor_is_inert() {
        // Without the floor, c_0 = −2·ln2 and c_m = −2(−1)^m/m. The floor
        // at 1e-8 perturbs each coefficient by ~(4/π)·√floor ≈ 1.3e-4.
        let c = log_cheb_coefficients(10, 2048, 1e-8).unwrap();
        assert!((c.coeffs()[0] + 2.0 * (2.0f64).ln()).abs() < 5e-4);
        for m in 1..=10 {
            let closed = -2.0 * if m % 2 == 0 { 1.0 } else { -1.0 } / m as f64;
            assert!(
                (c.coeffs()[m] - closed).abs() < 5e-4,
                "m={m}: {} vs {closed}",
                c.coeffs()[m]
            );
        }
    }

    #[test]
    fn series_reconstructs_log_pointwise() {
        // Truncated expansion evaluated back at λ = 0.5. The tail of the
        // series alternates with magnitude 2/m, so the M-term error sits
        // near 1/M; it must shrink as M grows.
        let target = (0.5f64).ln();
        let recon = |order: usize| -> f64 {
            let c = log_cheb_coefficients(order, (4 * (order + 1)).max(512), 1e-8).unwrap();
            c.coeffs()
                .iter()
                .enumerate()
                .map(|(m, cm)| cm * cheb_eval(m, 0.0))
                .sum()
        };
        let e50 = (recon(50) - target).abs();
        let e12 = (recon(12) - target).abs();
        assert!(e50 < 0.025, "error at M=50: {e50}");
        assert!(e50 < e12, "M=50 error {e50} not below M=12 error {e12}");
    }

    #[test]
    fn discrete_orthogonality_holds() {
        // (2−δ_{m0})/N · Σ_j T_m(x_j) T_n(x_j) = δ_mn on the quadrature grid.
        let n_q = 4096usize;
        let max_order = 30usize;
        // Table t[m][j] built by the same recurrence cheb_eval uses.
        let mut t = vec![vec![0.0; n_q]; max_order + 1];
        for j in 0..n_q {
            let x = (std::f64::consts::PI * (j as f64 + 0.5) / n_q as f64).cos();
            t[0][j] = 1.0;
            t[1][j] = x;
            for m in 2..=max_order {
                t[m][j] = 2.0 * x * t[m - 1][j] - t[m - 2][j];
            }
        }
        for m in 0..=max_order {
            for n in 0..=max_order {
                let mut acc = 0.0;
                for j in 0..n_q {
                    acc += t[m][j] * t[n][j];
                }
                let pref = if m == 0 { 1.0 } else { 2.0 } / n_q as f64;
                let got = pref * acc;
                let want = if m == n { 1.0 } else { 0.0 };
                assert!(
                    (got - want).abs() < 1e-6,
                    "orthogonality failed at ({m},{n}): {got}"
                );
            }
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(
            log_cheb_coefficients(20, 40, 1e-8),
            Err(SpectralError::InvalidParameter(_))
        ));
        assert!(matches!(
            log_cheb_coefficients(5, 1024, 0.0),
            Err(SpectralError::InvalidParameter(_))
        ));
        assert!(matches!(
            log_cheb_coefficients(5, 1024, 0.1),
            Err(SpectralError::InvalidParameter(_))
        ));
    }

    // ====================================================================
    // combine_ees / trace-log identities
    // ====================================================================

    #[test]
    fn combine_single_surviving_term() {
        let d = moment_set_for_tests(vec![1.0, 0.0, 0.0], 1, 0);
        let c = log_coefficients_for_tests(vec![2.0, 5.0, 7.0]);
        assert!((combine_ees(&d, &c, 10).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn combine_annihilates_zero_moments() {
        let d = moment_set_for_tests(vec![0.0; 4], 1, 0);
        let c = log_coefficients_for_tests(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(combine_ees(&d, &c, 3).unwrap(), 0.0);
    }

    #[test]
    fn combine_rejects_length_mismatch() {
        let d = moment_set_for_tests(vec![0.0; 4], 1, 0);
        let c = log_coefficients_for_tests(vec![1.0; 3]);
        assert!(matches!(
            combine_ees(&d, &c, 3),
            Err(SpectralError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn trace_log_identity_on_known_spectrum() {
        // For SPD H with spectrum in [0.1, 1]: Σ log λ from the Jacobi
        // oracle equals trace(log H) with log H assembled from the same
        // eigendecomposition that built H.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..5 {
            let n = 20usize;
            let eigs: Vec<f64> = (0..n)
                .map(|_| 0.1 + 0.9 * rand::Rng::random::<f64>(&mut rng))
                .collect();
            // Orthogonal basis via Gram-Schmidt.
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < n {
                let mut v: Vec<f64> = (0..n)
                    .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
                    .collect();
                for u in &q {
                    let proj = crate::linalg::dot(&v, u);
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= proj * ui;
                    }
                }
                let norm = crate::linalg::dot(&v, &v).sqrt();
                if norm > 1e-8 {
                    for vi in v.iter_mut() {
                        *vi /= norm;
                    }
                    q.push(v);
                }
            }
            let h = DenseMatrix::from_fn(n, n, |i, j| {
                (0..n).map(|k| q[k][i] * eigs[k] * q[k][j]).sum()
            });
            let log_h_trace: f64 = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|k| q[k][i] * eigs[k].ln() * q[k][i])
                        .sum::<f64>()
                })
                .sum();
            let jac = symmetric_eigenvalues(&h).unwrap();
            let sum_log: f64 = jac.as_slice().iter().map(|l| l.ln()).sum();
            assert!(
                rel_err(sum_log, log_h_trace) < 1e-9,
                "trial {trial}: {sum_log} vs {log_h_trace}"
            );
        }
    }

    #[test]
    fn dos_integral_identity_for_low_degree_polynomials() {
        // ∫ f dμ = (1/N)·trace(f(H)) exactly for polynomial f, degree ≤ 3.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 12usize;
        let g = DenseMatrix::gaussian(n, n, &mut rng);
        let h = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
        let coeffs = [0.7, -1.3, 0.25, 0.08]; // f(x) = Σ a_p x^p
        let eigs = symmetric_eigenvalues(&h).unwrap();
        let lhs: f64 = eigs
            .as_slice()
            .iter()
            .map(|&l| coeffs[0] + coeffs[1] * l + coeffs[2] * l * l + coeffs[3] * l * l * l)
            .sum::<f64>()
            / n as f64;
        // trace(f(H)) via explicit powers.
        let matmul = |a: &DenseMatrix, b: &DenseMatrix| {
            DenseMatrix::from_fn(n, n, |i, j| (0..n).map(|r| a.get(i, r) * b.get(r, j)).sum())
        };
        let h2 = matmul(&h, &h);
        let h3 = matmul(&h2, &h);
        let trace = |m: &DenseMatrix| (0..n).map(|i| m.get(i, i)).sum::<f64>();
        let rhs = (coeffs[0] * n as f64 + coeffs[1] * trace(&h) + coeffs[2] * trace(&h2)
            + coeffs[3] * trace(&h3))
            / n as f64;
        assert!(rel_err(lhs, rhs) < 1e-9, "{lhs} vs {rhs}");
    }
}

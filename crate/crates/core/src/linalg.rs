//! Dense real linear algebra for embedding matrices.
//!
//! Everything operates on column-major `f64` matrices. The central object
//! is the implicit Gram operator `C = EᵀE` of an embedding matrix
//! `E ∈ R^{d×K}`: [`gram_apply`] evaluates `C·z` as two matrix-vector
//! products so the K×K covariance never has to be materialized on the
//! approximate scoring path, while [`gram_matrix`] builds it explicitly for
//! the exact path.
//!
//! Two symmetric eigensolvers are provided. [`symmetric_eigenvalues`] is a
//! deterministic cyclic-sweep Jacobi iteration: slow, simple, and
//! essentially exact — it is the oracle every approximation in this crate
//! is validated against, not a performance path.
//! [`symmetric_eigenvalues_fast`] is Householder tridiagonalization
//! followed by implicit-shift QL, used by the exact score once the
//! covariance side grows past a few hundred rows (the benchmark regime);
//! it is cross-checked against the Jacobi oracle in tests.
//!
//! All operations are pure functions of their inputs plus an explicit seed
//! where randomness is involved. Internal rayon parallelism partitions
//! work by output location only, so results are bit-identical regardless
//! of thread count.

use rayon::prelude::*;
use thiserror::Error;

/// Row count below which the parallel kernels fall back to plain loops.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix dimensions must be positive (got {rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("data length {got} does not match rows x cols = {expected}")]
    BadDataLength { expected: usize, got: usize },
    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },
    #[error("column standardization needs at least 2 columns, got {cols}")]
    InsufficientSamples { cols: usize },
    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {deviation:.3e} exceeds 1e-9")]
    NotSymmetric { i: usize, j: usize, deviation: f64 },
    #[error("degenerate spectrum: operator is numerically zero")]
    DegenerateSpectrum,
    #[error("no convergence after {iterations} iterations (last iterate {last:.6e})")]
    ConvergenceFailure { iterations: usize, last: f64 },
}

/// Column-major dense matrix of 64-bit floats.
///
/// Invariants enforced at construction: positive dimensions, data length
/// `rows * cols`, and all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::BadDataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix. Panics on zero dimensions.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero matrix dimensions");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from an entry function `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[j * rows + i] = f(i, j);
            }
        }
        m
    }

    /// Matrix with i.i.d. standard Gaussian entries drawn from `rng`.
    pub fn gaussian<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i] = v;
    }

    /// Contiguous view of column `j`.
    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Raw column-major storage.
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in self.data.iter_mut() {
            *v *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Dense real vector, finite entries, positive length.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::EmptyMatrix { rows: 0, cols: 1 });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "zero-length vector");
        Self {
            data: vec![0.0; len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // construction forbids empty vectors
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

/// Dot product with four independent accumulators so the loop vectorizes
/// and pipelines; the naive single-accumulator form runs ~3x slower on the
/// long columns the Gram kernels stream.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..chunks {
        let i = c * 8;
        let (xa, xb) = (&a[i..i + 8], &b[i..i + 8]);
        s0 += xa[0] * xb[0] + xa[4] * xb[4];
        s1 += xa[1] * xb[1] + xa[5] * xb[5];
        s2 += xa[2] * xb[2] + xa[6] * xb[6];
        s3 += xa[3] * xb[3] + xa[7] * xb[7];
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// SplitMix64 step; used to derive independent sub-seeds from a master seed.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dense matrix-vector product `A·x`.
pub fn matvec(a: &DenseMatrix, x: &Vector) -> Result<Vector, LinalgError> {
    if a.cols != x.len() {
        return Err(LinalgError::DimensionMismatch {
            context: "matvec: A.cols vs x.len",
            expected: a.cols,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; a.rows];
    accumulate_columns(a, x.as_slice(), &mut out);
    Ok(Vector { data: out })
}

/// out += sum_k x[k] * col_k, parallel over disjoint row chunks.
fn accumulate_columns(a: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    let rows = a.rows;
    if rows >= PAR_THRESHOLD {
        let chunk = rows.div_ceil(rayon::current_num_threads().max(1) * 4).max(1024);
        out.par_chunks_mut(chunk).enumerate().for_each(|(ci, o)| {
            let r0 = ci * chunk;
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let col = &a.column(k)[r0..r0 + o.len()];
                for (oi, &ci_) in o.iter_mut().zip(col) {
                    *oi += xk * ci_;
                }
            }
        });
    } else {
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let col = a.column(k);
            for i in 0..rows {
                out[i] += xk * col[i];
            }
        }
    }
}

/// Gram operator application `Eᵀ(E·z) = (EᵀE)·z` without forming `EᵀE`.
pub fn gram_apply(e: &DenseMatrix, z: &Vector) -> Result<Vector, LinalgError> {
    if e.cols != z.len() {
        return Err(LinalgError::DimensionMismatch {
            context: "gram_apply: E.cols vs z.len",
            expected: e.cols,
            got: z.len(),
        });
    }
    let mut w = vec![0.0; e.rows];
    accumulate_columns(e, z.as_slice(), &mut w);
    let out = transpose_apply(e, &w);
    Ok(Vector { data: out })
}

/// out[k] = dot(col_k, w), parallel over output entries.
fn transpose_apply(e: &DenseMatrix, w: &[f64]) -> Vec<f64> {
    if e.rows * e.cols >= PAR_THRESHOLD * 8 {
        (0..e.cols)
            .into_par_iter()
            .map(|k| dot(e.column(k), w))
            .collect()
    } else {
        (0..e.cols).map(|k| dot(e.column(k), w)).collect()
    }
}

/// Gram-operator application to a block of vectors: returns `Eᵀ(E·Z)` where
/// `Z` is `cols(E) × b`. One pass over `E` per block instead of per vector,
/// which is what makes the stochastic-trace loop affordable on large inputs.
pub fn gram_apply_block(e: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if e.cols != z.rows {
        return Err(LinalgError::DimensionMismatch {
            context: "gram_apply_block: E.cols vs Z.rows",
            expected: e.cols,
            got: z.rows,
        });
    }
    let b = z.cols;
    // W = E·Z, one accumulation pass per block column.
    let mut w = DenseMatrix::zeros(e.rows, b);
    if e.rows as u64 * e.cols as u64 >= PAR_THRESHOLD as u64 {
        let rows = e.rows;
        w.data
            .par_chunks_mut(rows)
            .enumerate()
            .for_each(|(j, wcol)| {
                accumulate_columns_serial(e, z.column(j), wcol);
            });
    } else {
        for j in 0..b {
            accumulate_columns(e, z.column(j), w.column_mut(j));
        }
    }
    // Out[k, j] = dot(col_k(E), col_j(W)): parallel over k, column of E read
    // once per k and reused across all block columns.
    let mut out = DenseMatrix::zeros(e.cols, b);
    let rows_out = e.cols;
    let kcols: Vec<Vec<f64>> = if rows_out * b >= 4 {
        (0..e.cols)
            .into_par_iter()
            .map(|k| {
                let ek = e.column(k);
                (0..b).map(|j| dot(ek, w.column(j))).collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    if kcols.is_empty() {
        for k in 0..e.cols {
            let ek = e.column(k);
            for j in 0..b {
                out.set(k, j, dot(ek, w.column(j)));
            }
        }
    } else {
        for (k, row) in kcols.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.set(k, j, v);
            }
        }
    }
    Ok(out)
}

fn accumulate_columns_serial(a: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let col = a.column(k);
        for i in 0..out.len() {
            out[i] += xk * col[i];
        }
    }
}

/// Explicit Gram matrix `EᵀE` (K×K), blocked and parallelized over column
/// tiles so each pair of columns is streamed from memory once per tile.
pub fn gram_matrix(e: &DenseMatrix) -> DenseMatrix {
    let k = e.cols;
    let d = e.rows;
    let mut out = DenseMatrix::zeros(k, k);
    const CB: usize = 32; // column tile
    const DB: usize = 1024; // row chunk: 2·CB·DB·8B fits in L2

    let nblocks = k.div_ceil(CB);
    let tiles: Vec<(usize, usize, Vec<f64>)> = (0..nblocks)
        .into_par_iter()
        .flat_map_iter(|jb| (0..=jb).map(move |ib| (ib, jb)))
        .map(|(ib, jb)| {
            let j0 = jb * CB;
            let j1 = ((jb + 1) * CB).min(k);
            let i0 = ib * CB;
            let i1 = ((ib + 1) * CB).min(k);
            let mut acc = vec![0.0; (i1 - i0) * (j1 - j0)];
            let mut r0 = 0;
            while r0 < d {
                let r1 = (r0 + DB).min(d);
                for j in j0..j1 {
                    let cj = &e.column(j)[r0..r1];
                    let ilim = if ib == jb { j + 1 } else { i1 };
                    for i in i0..ilim {
                        let ci = &e.column(i)[r0..r1];
                        acc[(j - j0) * (i1 - i0) + (i - i0)] += dot(ci, cj);
                    }
                }
                r0 = r1;
            }
            (ib, jb, acc)
        })
        .collect();

    for (ib, jb, acc) in tiles {
        let j0 = jb * CB;
        let j1 = ((jb + 1) * CB).min(k);
        let i0 = ib * CB;
        let i1 = ((ib + 1) * CB).min(k);
        for j in j0..j1 {
            let ilim = if ib == jb { j + 1 } else { i1 };
            for i in i0..ilim {
                let v = acc[(j - j0) * (i1 - i0) + (i - i0)];
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
    }
    out
}

/// Subtract the mean column from every column (the centering step of the
/// exact covariance path).
pub fn center_columns(e: &DenseMatrix) -> DenseMatrix {
    let (d, k) = (e.rows, e.cols);
    let mut mean = vec![0.0; d];
    for j in 0..k {
        let col = e.column(j);
        for i in 0..d {
            mean[i] += col[i];
        }
    }
    let inv = 1.0 / k as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let mut out = e.clone();
    for j in 0..k {
        let col = out.column_mut(j);
        for i in 0..d {
            col[i] -= mean[i];
        }
    }
    out
}

/// Standardize each row over its K columns: subtract the row mean, divide by
/// the population standard deviation. Rows with standard deviation below
/// 1e-12 are only centered (divisor forced to 1), so constant rows come out
/// exactly zero instead of NaN.
pub fn standardize_columns(e: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if e.cols < 2 {
        return Err(LinalgError::InsufficientSamples { cols: e.cols });
    }
    let (d, k) = (e.rows, e.cols);
    let inv_k = 1.0 / k as f64;

    let mut mean = vec![0.0; d];
    for j in 0..k {
        let col = e.column(j);
        for i in 0..d {
            mean[i] += col[i];
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_k;
    }
    let mut var = vec![0.0; d];
    for j in 0..k {
        let col = e.column(j);
        for i in 0..d {
            let c = col[i] - mean[i];
            var[i] += c * c;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let sd = (v * inv_k).sqrt();
            if sd < 1e-12 {
                1.0
            } else {
                1.0 / sd
            }
        })
        .collect();

    let mut out = e.clone();
    if d * k >= PAR_THRESHOLD * 4 {
        let rows = d;
        out.data.par_chunks_mut(rows).for_each(|col| {
            for i in 0..rows {
                col[i] = (col[i] - mean[i]) * inv_std[i];
            }
        });
    } else {
        for j in 0..k {
            let col = out.column_mut(j);
            for i in 0..d {
                col[i] = (col[i] - mean[i]) * inv_std[i];
            }
        }
    }
    Ok(out)
}

/// Dominant singular value of `E` by power iteration on the Gram operator.
///
/// Iterates `v ← C·v / ‖C·v‖` with `C = EᵀE` applied through [`gram_apply`],
/// starting from a seeded Gaussian vector, and reads the eigenvalue off the
/// Rayleigh quotient. Converged when the relative change between successive
/// eigenvalue iterates drops below `tol`; the returned value is
/// `sqrt(λ_max)`.
pub fn power_method(
    e: &DenseMatrix,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<f64, LinalgError> {
    assert!(tol > 0.0, "power_method: tol must be positive");
    assert!(max_iter >= 1, "power_method: max_iter must be >= 1");
    if e.is_zero() {
        return Err(LinalgError::DegenerateSpectrum);
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = e.cols;
    let mut v = Vector::zeros(k);
    for x in v.as_mut_slice() {
        *x = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
    }
    let nv = v.norm();
    if nv == 0.0 {
        return Err(LinalgError::DegenerateSpectrum);
    }
    for x in v.as_mut_slice() {
        *x /= nv;
    }

    let mut lambda_prev = f64::NAN;
    for it in 0..max_iter {
        let w = gram_apply(e, &v)?;
        // v is unit, so the Rayleigh quotient is a plain inner product.
        let lambda = dot(v.as_slice(), w.as_slice());
        let wn = w.norm();
        if wn == 0.0 || lambda <= 0.0 {
            // Start vector fell into the null space; the operator itself is
            // nonzero, so reseed deterministically and keep going.
            for x in v.as_mut_slice() {
                *x = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
            }
            let n = v.norm();
            if n == 0.0 {
                return Err(LinalgError::DegenerateSpectrum);
            }
            for x in v.as_mut_slice() {
                *x /= n;
            }
            continue;
        }
        if lambda_prev.is_finite() && (lambda - lambda_prev).abs() <= tol * lambda.abs() {
            return Ok(lambda.sqrt());
        }
        lambda_prev = lambda;
        v = w;
        let inv = 1.0 / wn;
        for x in v.as_mut_slice() {
            *x *= inv;
        }
        let _ = it;
    }
    Err(LinalgError::ConvergenceFailure {
        iterations: max_iter,
        last: if lambda_prev.is_finite() {
            lambda_prev.max(0.0).sqrt()
        } else {
            0.0
        },
    })
}

const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_SWEEP_CAP: usize = 100;

fn check_symmetric(c: &DenseMatrix) -> Result<usize, LinalgError> {
    let n = c.rows;
    if c.cols != n {
        return Err(LinalgError::DimensionMismatch {
            context: "symmetric_eigenvalues: square matrix required",
            expected: n,
            got: c.cols,
        });
    }
    for j in 0..n {
        for i in (j + 1)..n {
            let dev = (c.get(i, j) - c.get(j, i)).abs();
            if dev > SYMMETRY_TOL {
                return Err(LinalgError::NotSymmetric {
                    i,
                    j,
                    deviation: dev,
                });
            }
        }
    }
    Ok(n)
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi
/// rotations.
///
/// Sweeps rotate every off-diagonal pair in a fixed order until the
/// off-diagonal Frobenius mass falls below 1e-12 of the total Frobenius
/// norm. Deterministic, unconditionally stable, O(n³) per sweep — this is
/// the exactness oracle, not the performance path.
pub fn symmetric_eigenvalues(c: &DenseMatrix) -> Result<Vector, LinalgError> {
    let n = check_symmetric(c)?;
    if n == 1 {
        return Vector::new(vec![c.get(0, 0)]);
    }
    let mut a = c.clone();
    let total_fro: f64 = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if total_fro == 0.0 {
        return Ok(Vector {
            data: vec![0.0; n],
        });
    }
    let target = 1e-12 * total_fro;

    for _sweep in 0..JACOBI_SWEEP_CAP {
        let mut off = 0.0;
        for j in 0..n {
            for i in (j + 1)..n {
                let v = a.get(i, j);
                off += 2.0 * v * v;
            }
        }
        if off.sqrt() < target {
            let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            return Vector::new(eig);
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Stable rotation (Numerical Recipes 11.1).
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e154 {
                    0.5 / theta
                } else {
                    let s = theta.signum();
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;
                let tau = sin / (1.0 + cos);

                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    let nrp = arp - sin * (arq + tau * arp);
                    let nrq = arq + sin * (arp - tau * arq);
                    a.set(r, p, nrp);
                    a.set(p, r, nrp);
                    a.set(r, q, nrq);
                    a.set(q, r, nrq);
                }
            }
        }
    }
    Err(LinalgError::ConvergenceFailure {
        iterations: JACOBI_SWEEP_CAP,
        last: a.get(0, 0),
    })
}

/// All eigenvalues of a symmetric matrix, ascending, by Householder
/// tridiagonalization and implicit-shift QL.
///
/// O(n³) with a far smaller constant than Jacobi and no eigenvector
/// accumulation; used for the exact score once the covariance is large.
pub fn symmetric_eigenvalues_fast(c: &DenseMatrix) -> Result<Vector, LinalgError> {
    let n = check_symmetric(c)?;
    if n == 1 {
        return Vector::new(vec![c.get(0, 0)]);
    }
    // Column-major data of a symmetric matrix reads identically as
    // row-major, so the clone can be indexed [i*n + k] with contiguous k.
    let mut a = c.data.clone();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    tridiagonalize(&mut a, n, &mut diag, &mut off);
    ql_implicit(&mut diag, &mut off, n)?;
    diag.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Vector::new(diag)
}

/// Householder reduction to tridiagonal form, eigenvalues only
/// (Numerical Recipes tred2 with the eigenvector accumulation stripped).
/// Works on full symmetric row-major storage so every inner loop runs over
/// contiguous memory; the O(n²) matvec and rank-2 update parallelize over
/// rows once the trailing block is large. On exit a's diagonal holds the
/// tridiagonal diagonal and e[1..] the off-diagonal.
fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    for i in (1..n).rev() {
        let l = i - 1;
        if l == 0 {
            e[i] = a[i * n];
            continue;
        }
        let scale: f64 = a[i * n..i * n + l + 1].iter().map(|v| v.abs()).sum();
        if scale == 0.0 {
            e[i] = a[i * n + l];
            continue;
        }
        let inv_scale = 1.0 / scale;
        let mut h = 0.0;
        for k in 0..=l {
            a[i * n + k] *= inv_scale;
            h += a[i * n + k] * a[i * n + k];
        }
        let f = a[i * n + l];
        let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
        e[i] = scale * g;
        h -= f * g;
        a[i * n + l] = f - g;

        // u is the Householder vector; p = A·u / h over the leading block.
        let u: Vec<f64> = a[i * n..i * n + l + 1].to_vec();
        let inv_h = 1.0 / h;
        let mut p: Vec<f64> = if l + 1 >= 256 {
            a.par_chunks(n)
                .take(l + 1)
                .map(|row| dot(&row[..l + 1], &u) * inv_h)
                .collect()
        } else {
            (0..=l)
                .map(|j| dot(&a[j * n..j * n + l + 1], &u) * inv_h)
                .collect()
        };
        let uau: f64 = p.iter().zip(u.iter()).map(|(pj, uj)| pj * uj).sum();
        let hh = uau * inv_h / 2.0;
        for (pj, uj) in p.iter_mut().zip(u.iter()) {
            *pj -= hh * uj;
        }
        // Rank-2 update A -= u·pᵀ + p·uᵀ on the leading block.
        if l + 1 >= 256 {
            a.par_chunks_mut(n)
                .take(l + 1)
                .enumerate()
                .for_each(|(j, row)| {
                    let uj = u[j];
                    let pj = p[j];
                    for k in 0..=l {
                        row[k] -= uj * p[k] + pj * u[k];
                    }
                });
        } else {
            for j in 0..=l {
                let uj = u[j];
                let pj = p[j];
                let row = &mut a[j * n..j * n + l + 1];
                for k in 0..=l {
                    row[k] -= uj * p[k] + pj * u[k];
                }
            }
        }
    }
    for i in 0..n {
        d[i] = a[i * n + i];
    }
    e[0] = 0.0;
}

/// Implicit-shift QL on a tridiagonal matrix (diag, off), eigenvalues only.
fn ql_implicit(d: &mut [f64], e: &mut [f64], n: usize) -> Result<(), LinalgError> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(LinalgError::ConvergenceFailure {
                    iterations: 50,
                    last: d[l],
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    // Rotation annihilated early; restart the QL step.
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

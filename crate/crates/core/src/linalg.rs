//! Minimal dense linear algebra over `f64`.
//!
//! Everything downstream (assignment, pooling kernels, gradients, the
//! training loop) is built from the handful of primitives in this module.
//! Two properties are load-bearing and worth stating up front:
//!
//! - **Determinism.** All loops run in a fixed order on a single thread, so
//!   identical inputs give bitwise identical outputs across runs. Each output
//!   element of [`matmul`] accumulates over `k` in ascending order, which is
//!   the same order a naive triple loop uses.
//! - **Instrumented multiplies.** The primitives report the exact number of
//!   scalar multiplications they perform to a thread-local counter (see
//!   [`ops_count`]). The cost model is validated against this counter, so
//!   kernels route their arithmetic through these primitives (or count inline
//!   products explicitly).
//!
//! Storage is row-major, 64-bit floats only. No decompositions, no sparse
//! formats, no GPU paths.

use crate::error::{Error, Result};

/// Default guard for divisions by a vector norm.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Thread-local count of scalar multiplications executed by the primitives.
pub mod ops_count {
    use std::cell::Cell;

    thread_local! {
        static MULS: Cell<u64> = const { Cell::new(0) };
    }

    /// Reset the counter to zero.
    pub fn reset() {
        MULS.with(|c| c.set(0));
    }

    /// Multiplications counted since the last [`reset`].
    pub fn total() -> u64 {
        MULS.with(|c| c.get())
    }

    /// Record `n` multiplications. Kernels call this for inline products
    /// that do not go through a primitive.
    pub fn add(n: u64) {
        MULS.with(|c| c.set(c.get() + n));
    }
}

// ---------------------------------------------------------------------------
// slice primitives
// ---------------------------------------------------------------------------

/// Dot product. Counts `a.len()` multiplications.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    ops_count::add(a.len() as u64);
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// `out += alpha * x`. Counts `x.len()` multiplications.
pub fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    ops_count::add(x.len() as u64);
    for i in 0..x.len() {
        out[i] += alpha * x[i];
    }
}

/// `out *= alpha`. Counts `out.len()` multiplications.
pub fn scale(out: &mut [f64], alpha: f64) {
    ops_count::add(out.len() as u64);
    for v in out.iter_mut() {
        *v *= alpha;
    }
}

/// Euclidean norm, `sqrt(dot(x, x))`.
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Wraps `data`. Panics on an empty vector; dimensions are positive by
    /// construction everywhere in this crate.
    pub fn new(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must have positive dimension");
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, validating the length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(
                "matrix",
                format!("dimensions must be positive, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::shape("matrix", "no rows given"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("matrix", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j`, copied into a fresh buffer (storage is row-major).
    pub fn col(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.col_into(j, &mut out);
        out
    }

    /// Copies column `j` into `out` without allocating.
    pub fn col_into(&self, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            out[i] = self.data[i * self.cols + j];
        }
    }

    pub fn set_col(&mut self, j: usize, col: &[f64]) {
        debug_assert_eq!(col.len(), self.rows);
        for i in 0..self.rows {
            self.data[i * self.cols + j] = col[i];
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `y += alpha * A * x` for row-major `A`. Counts `rows * cols` muls.
    pub fn matvec_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            y[i] += alpha * dot(self.row(i), x);
        }
        if alpha != 1.0 {
            ops_count::add(self.rows as u64);
        }
    }

    /// `y += Aᵀ * x`. Counts `rows * cols` muls.
    pub fn matvec_t_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        ops_count::add((self.rows * self.cols) as u64);
        for i in 0..self.rows {
            let xi = x[i];
            let row = self.row(i);
            for j in 0..self.cols {
                y[j] += xi * row[j];
            }
        }
    }

    /// Rank-one accumulation `self += alpha * u * vᵀ`. Counts `u.len() * v.len()`
    /// muls (plus `u.len()` for the `alpha` scaling when `alpha != 1`).
    pub fn outer_acc(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        ops_count::add((self.rows * self.cols) as u64);
        if alpha != 1.0 {
            ops_count::add(self.rows as u64);
        }
        for i in 0..self.rows {
            let ui = alpha * u[i];
            let row = self.row_mut(i);
            for j in 0..v.len() {
                row[j] += ui * v[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Matrix product `a * b`.
///
/// The accumulation over the inner dimension runs in ascending order for
/// every output element, so the result is bitwise identical to a naive
/// triple-loop product and does not depend on thread count (there are no
/// threads here at all).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    ops_count::add((a.rows * a.cols * b.cols) as u64);
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                crow[j] += aik * brow[j];
            }
        }
    }
    Ok(c)
}

/// Kronecker product of two vectors: `out[i*b.dim + j] = a[i] * b[j]`.
pub fn kron(a: &Vector, b: &Vector) -> Vector {
    ops_count::add((a.dim() * b.dim()) as u64);
    let mut out = vec![0.0; a.dim() * b.dim()];
    for i in 0..a.dim() {
        let ai = a[i];
        let block = &mut out[i * b.dim()..(i + 1) * b.dim()];
        for j in 0..b.dim() {
            block[j] = ai * b[j];
        }
    }
    Vector::new(out)
}

/// Returns `v / max(‖v‖, eps)`. The guard keeps the zero vector at zero
/// instead of producing NaNs.
pub fn l2_normalize(v: &Vector, eps: f64) -> Vector {
    assert!(eps > 0.0, "eps must be positive");
    let mut out = v.clone();
    l2_normalize_in_place(out.as_mut_slice(), eps);
    out
}

/// In-place variant of [`l2_normalize`]; returns the pre-normalization norm.
pub fn l2_normalize_in_place(v: &mut [f64], eps: f64) -> f64 {
    let n = norm2(v);
    scale(v, 1.0 / n.max(eps));
    n
}

/// Shift-invariant softmax: the maximum entry is subtracted before
/// exponentiation, so arbitrarily large scores stay finite.
pub fn softmax(v: &Vector) -> Vector {
    let mut out = v.clone();
    softmax_in_place(out.as_mut_slice());
    out
}

/// In-place variant of [`softmax`].
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = matmul(&Matrix::identity(2), &a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_selects_basis_column() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let e1 = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &e1).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let a = seeded(5, 7, 11);
        let b = seeded(7, 3, 12);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        // exact bit equality: same per-element accumulation order
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = seeded(2, 3, 1);
        let b = seeded(2, 3, 2);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_is_deterministic_across_runs() {
        let a = seeded(6, 6, 3);
        let b = seeded(6, 6, 4);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn kron_self_product() {
        let a = Vector::new(vec![1.0, 2.0]);
        assert_eq!(kron(&a, &a).as_slice(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn kron_basis_vector_places_block() {
        let e1 = Vector::new(vec![1.0, 0.0, 0.0]);
        let v = Vector::new(vec![5.0, 7.0]);
        let k = kron(&e1, &v);
        assert_eq!(k.as_slice(), &[5.0, 7.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kron_matches_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Vector::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Vector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let k = kron(&a, &b);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(k[i * 4 + j], a[i] * b[j]);
            }
        }
    }

    #[test]
    fn kron_reshape_equals_outer_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let a = Vector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Vector::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let k = kron(&a, &b);
        let mut outer = Matrix::zeros(4, 5);
        outer.outer_acc(1.0, a.as_slice(), b.as_slice());
        assert_eq!(k.as_slice(), outer.data());
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let v = l2_normalize(&Vector::new(vec![3.0, 4.0]), DEFAULT_EPS);
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_guard() {
        let v = l2_normalize(&Vector::new(vec![0.0, 0.0]), 1e-12);
        assert_eq!(v.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gives_unit_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v = Vector::new((0..9).map(|_| rng.random_range(-10.0..10.0)).collect());
            let n = l2_normalize(&v, DEFAULT_EPS).norm();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&Vector::new(vec![0.0, 0.0]));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let s = softmax(&Vector::new(vec![1000.0, 0.0]));
        assert!(s.is_finite());
        assert!(s[0] > 1.0 - 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let s = softmax(&Vector::new(vec![1.0, 0.0]));
        let e = std::f64::consts::E;
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mul_counter_tracks_primitives() {
        ops_count::reset();
        let _ = dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        assert_eq!(ops_count::total(), 3);
        let a = seeded(2, 3, 8);
        let b = seeded(3, 4, 9);
        ops_count::reset();
        let _ = matmul(&a, &b).unwrap();
        assert_eq!(ops_count::total(), 2 * 3 * 4);
    }
}

//! Deterministic dense linear algebra and stable elementary kernels.
//!
//! Everything here is 64-bit, row-major, and free of platform-dependent
//! reduction orders: sums always run in ascending index order so that repeated
//! runs produce bit-identical results.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::argument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from per-row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::argument("matrix needs at least one row"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::argument("ragged rows in matrix construction"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self * other`, plain triple loop in fixed i,k,j order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::argument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Stack `self` above `other` (column counts must agree).
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::argument("vstack column mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Copy rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// Deterministic seeded random generator.
///
/// Backed by ChaCha8 (`rand_chacha::ChaCha8Rng`), a counter-based stream
/// cipher generator whose output stream depends only on the 64-bit seed, on
/// every platform. All stochastic operations in this crate take one of these
/// explicitly.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller. Two uniforms per draw, spare discarded,
    /// so the stream position is input-independent.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Exponential with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        let u = 1.0 - self.uniform(); // (0, 1]
        -u.ln() / rate
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independent child generator. SplitMix64 mixing of
    /// (seed, stream) keeps children decorrelated and reproducible.
    pub fn derive(&self, stream: u64) -> SeededRng {
        let mut z = self
            .seed
            .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        SeededRng::new(z)
    }
}

/// log(sum_i exp(v_i)) computed with a max shift so it never overflows for
/// |v_i| <= 1e300. Entries may be -inf (they contribute nothing); the vector
/// must be non-empty and not all -inf.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::argument("logsumexp of empty vector"));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::argument("logsumexp requires entries < +inf"));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::argument("logsumexp of all -inf"));
    }
    let mut sum = 0.0;
    for &v in values {
        sum += (v - max).exp();
    }
    Ok(max + sum.ln())
}

/// Row-wise softmax via `logsumexp`; each output row sums to 1 within 1e-12.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let lse = logsumexp(m.row(r))?;
        for c in 0..m.cols() {
            out.set(r, c, (m.get(r, c) - lse).exp());
        }
    }
    Ok(out)
}

/// Pairwise squared L2 distances: entry (i, c) = ||a_i - b_c||^2.
pub fn pairwise_sq_l2(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::argument(format!(
            "pairwise_sq_l2 dim mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for c in 0..b.rows() {
            let rb = b.row(c);
            let mut s = 0.0;
            for d in 0..a.cols() {
                let diff = ra[d] - rb[d];
                s += diff * diff;
            }
            out.set(i, c, s);
        }
    }
    Ok(out)
}

/// Squared L2 distance between two equal-length slices.
pub fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for d in 0..a.len() {
        let diff = a[d] - b[d];
        s += diff * diff;
    }
    s
}

/// Dot product in fixed index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for d in 0..a.len() {
        s += a[d] * b[d];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_two_equal_terms() {
        let v = logsumexp(&[0.0, 0.0]).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_shift_invariance_large() {
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_at_small_scale() {
        let vals = [0.5f64, 1.5, -2.0];
        let naive: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&vals).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_rejects_empty_and_all_neg_inf() {
        assert!(logsumexp(&[]).is_err());
        assert!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn logsumexp_allows_some_neg_inf() {
        let v = logsumexp(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert!((v - 0.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let m = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        let e = std::f64::consts::E;
        assert!((s.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((s.get(0, 0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn softmax_saturation_no_overflow() {
        let m = Matrix::from_vec(1, 2, vec![700.0, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!(s.is_finite());
        assert!(s.get(0, 0) > 1.0 - 1e-12);
        assert!(s.get(0, 1) < 1e-12);
    }

    #[test]
    fn pairwise_three_four_five() {
        let a = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let d = pairwise_sq_l2(&a, &b).unwrap();
        assert_eq!(d.get(0, 0), 25.0);
    }

    #[test]
    fn pairwise_self_zero_diagonal() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let d = pairwise_sq_l2(&a, &a).unwrap();
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
        }
    }

    #[test]
    fn pairwise_matches_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let a_data: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let b_data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let a = Matrix::from_vec(5, 3, a_data).unwrap();
        let b = Matrix::from_vec(4, 3, b_data).unwrap();
        let d = pairwise_sq_l2(&a, &b).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    let diff = a.get(i, k) - b.get(c, k);
                    s += diff * diff;
                }
                assert!((d.get(i, c) - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pairwise_dim_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(pairwise_sq_l2(&a, &b).is_err());
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(m.matmul(&i).unwrap(), m);
    }

    proptest! {
        #[test]
        fn prop_logsumexp_shift_invariance(
            v in prop::collection::vec(-50.0f64..50.0, 1..20),
            s in -100.0f64..100.0,
        ) {
            let base = logsumexp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + s).collect();
            let got = logsumexp(&shifted).unwrap();
            prop_assert!((got - (base + s)).abs() < 1e-12);
        }

        #[test]
        fn prop_softmax_rows_sum_to_one(
            data in prop::collection::vec(-200.0f64..200.0, 6..24),
        ) {
            let cols = 3;
            let rows = data.len() / cols;
            let m = Matrix::from_vec(rows, cols, data[..rows*cols].to_vec()).unwrap();
            let s = row_softmax(&m).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for c in 0..cols {
                    prop_assert!(s.get(r, c) > 0.0 && s.get(r, c) <= 1.0);
                }
            }
        }

        #[test]
        fn prop_pairwise_symmetric_under_swap_transpose(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 9),
        ) {
            let ma = Matrix::from_vec(2, 3, a).unwrap();
            let mb = Matrix::from_vec(3, 3, b).unwrap();
            let d1 = pairwise_sq_l2(&ma, &mb).unwrap();
            let d2 = pairwise_sq_l2(&mb, &ma).unwrap().transpose();
            for i in 0..2 {
                for j in 0..3 {
                    prop_assert!((d1.get(i, j) - d2.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }
}

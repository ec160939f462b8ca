//! Dense float64 vectors and matrices.
//!
//! Only what the experiments need: elementwise vector algebra, Euclidean
//! norms and inner products, row-major matrices, power-iteration spectral
//! norms and a cyclic Jacobi eigensolver for small symmetric matrices.
//! All reductions sum in index order so results are reproducible.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Start-vector seed used by [`spectral_norm`].
pub const POWER_ITERATION_SEED: u64 = 0x5EED_0F_5EC7;
pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX_ITER: usize = 5000;

/// Flat parameter-space vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Standard basis vector `e_index`.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[index] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            })
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|a| factor * a).collect())
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Self) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_len(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sum of vectors in slice order.
    pub fn sum<'a>(len: usize, vectors: impl IntoIterator<Item = &'a ParamVector>) -> Result<Self> {
        let mut acc = Self::zeros(len);
        for v in vectors {
            acc.add_assign(v)?;
        }
        Ok(acc)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2_unchecked(a: &[f64]) -> f64 {
    let sq = dot(a, a);
    if sq.is_finite() && sq > 1e-280 {
        return sq.sqrt();
    }
    // squares under- or overflowed: rescale by the largest entry
    let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * a.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

/// Euclidean norm.
pub fn norm2(v: &ParamVector) -> Result<f64> {
    v.check_finite()?;
    Ok(norm2_unchecked(v.as_slice()))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(v: &ParamVector, w: &ParamVector) -> Result<f64> {
    let nv = norm2(v)?;
    let nw = norm2(w)?;
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    let c = v.dot(w)? / (nv * nw);
    Ok(c.clamp(-1.0, 1.0))
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::LengthMismatch {
                    expected: c,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Entries drawn i.i.d. from `scale * N(0, 1)`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `M x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Mᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += m * yi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::LengthMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| factor * x).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2_unchecked(&self.data)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Largest singular value with the default tolerance, iteration cap and seed.
pub fn spectral_norm(m: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    spectral_norm_seeded(m, tol, max_iter, POWER_ITERATION_SEED)
}

/// Power iteration on `MᵀM`.
///
/// The estimate after each step is `‖M x‖` for a unit `x`, so every iterate
/// is a lower bound on the true value. Stops once the relative change of the
/// estimate drops below `tol`.
pub fn spectral_norm_seeded(m: &DenseMatrix, tol: f64, max_iter: usize, seed: u64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    if m.rows == 0 || m.cols == 0 || m.data.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..m.cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nx = norm2_unchecked(&x);
    x.iter_mut().for_each(|v| *v /= nx);

    let mut estimate = norm2_unchecked(&m.matvec(&x));
    for _ in 0..max_iter {
        let mx = m.matvec(&x);
        let mut y = m.matvec_t(&mx);
        let ny = norm2_unchecked(&y);
        if ny == 0.0 {
            // start vector in the null space of a nonzero M: restart on its heaviest column
            let heaviest = (0..m.cols)
                .max_by(|&a, &b| column_norm(m, a).total_cmp(&column_norm(m, b)))
                .unwrap_or(0);
            y = vec![0.0; m.cols];
            y[heaviest] = 1.0;
        } else {
            y.iter_mut().for_each(|v| *v /= ny);
        }
        let next = norm2_unchecked(&m.matvec(&y));
        let change = (next - estimate).abs();
        x = y;
        estimate = next.max(estimate);
        if change <= tol * estimate {
            return Ok(estimate);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        last_estimate: estimate,
    })
}

fn column_norm(m: &DenseMatrix, j: usize) -> f64 {
    (0..m.rows).map(|i| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as the columns of the second matrix.
pub fn symmetric_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!(
            "eigen-decomposition needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = m.rows;
    let mut a = m.clone();
    // work on the exactly symmetric part
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, col)] = v[(k, src)];
        }
    }
    Ok((values, vectors))
}

/// Largest absolute eigenvalue of a symmetric matrix.
///
/// Tries power iteration first and falls back to Jacobi when the top of the
/// spectrum is too clustered for power iteration to settle.
pub fn symmetric_spectral_norm(m: &DenseMatrix) -> Result<f64> {
    match spectral_norm(m, POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER) {
        Ok(s) => Ok(s),
        Err(Error::NotConverged { .. }) => {
            let (values, _) = symmetric_eigen(m)?;
            Ok(values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn norm2_basics() {
        assert_eq!(norm2(&ParamVector::zeros(3)).unwrap(), 0.0);
        assert_eq!(norm2(&ParamVector::new(vec![3.0, 4.0])).unwrap(), 5.0);
        assert!(matches!(
            norm2(&ParamVector::new(vec![1.0, f64::NAN])),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn cosine_basics() {
        let e1 = ParamVector::new(vec![1.0, 0.0]);
        let e2 = ParamVector::new(vec![0.0, 1.0]);
        let d = ParamVector::new(vec![1.0, 1.0]);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_relative_eq!(cosine(&d, &e1).unwrap(), 0.7071067811865475, epsilon = 1e-12);
        assert!(matches!(
            cosine(&e1, &ParamVector::zeros(2)),
            Err(Error::UndefinedCosine)
        ));
    }

    #[test]
    fn spectral_norm_of_simple_matrices() {
        let i3 = DenseMatrix::identity(3);
        assert_relative_eq!(spectral_norm(&i3, 1e-10, 5000).unwrap(), 1.0, epsilon = 1e-12);
        let d = DenseMatrix::from_diag(&[3.0, 1.0]);
        assert_relative_eq!(spectral_norm(&d, 1e-10, 5000).unwrap(), 3.0, max_relative = 1e-10);
        assert_eq!(spectral_norm(&DenseMatrix::zeros(2, 3), 1e-10, 10).unwrap(), 0.0);
        assert!(spectral_norm(&d, 0.0, 10).is_err());
    }

    #[test]
    fn spectral_norm_reports_last_estimate() {
        // two nearly equal singular values and a single iteration
        let d = DenseMatrix::from_diag(&[1.0, 0.999_999, 0.5]);
        match spectral_norm(&d, 1e-15, 1) {
            Err(Error::NotConverged { last_estimate, .. }) => {
                assert!(last_estimate > 0.5 && last_estimate <= 1.0)
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn jacobi_eigen_diagonalizes() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, -1.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert_relative_eq!(vals[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vals[2], -1.0, epsilon = 1e-12);
        for (k, lambda) in vals.iter().enumerate() {
            let col: Vec<f64> = (0..3).map(|i| vecs[(i, k)]).collect();
            let mv = m.matvec(&col);
            for i in 0..3 {
                assert_relative_eq!(mv[i], lambda * col[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_spectral_norm_sees_negative_eigenvalues() {
        let m = DenseMatrix::from_diag(&[1.0, -4.0]);
        assert_relative_eq!(symmetric_spectral_norm(&m).unwrap(), 4.0, max_relative = 1e-10);
    }
}

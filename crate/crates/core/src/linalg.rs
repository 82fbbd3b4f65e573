//! Dense real linear algebra: row-major matrices, symmetric eigendecomposition
//! via cyclic Jacobi rotations, numeric rank, Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// self (m x n) * other (n x p) -> m x p
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self (m x n) * v (n) -> m
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "matvec {}x{} * {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted descending; row `k` of `eigenvectors` is the unit
/// eigenvector belonging to `eigenvalues[k]`. Sign convention: within each
/// eigenvector the entry of largest magnitude is positive (lowest index wins
/// ties), so the decomposition is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

const JACOBI_REL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as (A + A^T)/2 before iterating, so inputs that
/// are symmetric only up to round-off are fine.
pub fn sym_eig(sigma: &Matrix) -> Result<EigenDecomposition> {
    let n = sigma.rows();
    if n != sigma.cols() {
        return Err(Error::Dimension(format!(
            "sym_eig needs a square matrix, got {}x{}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    if !sigma.is_finite() {
        return Err(Error::Numerical("sym_eig: non-finite input".into()));
    }

    // Work on the symmetrized copy.
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (sigma.get(i, j) + sigma.get(j, i)));
        }
    }
    let norm = a.frobenius_norm();
    let mut v = Matrix::identity(n);

    if n > 1 && norm > 0.0 {
        let tol = JACOBI_REL_TOL * norm;
        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off: f64 = {
                let mut s = 0.0;
                for i in 0..n {
                    for j in (i + 1)..n {
                        let x = a.get(i, j);
                        s += 2.0 * x * x;
                    }
                }
                s.sqrt()
            };
            if off <= tol {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() <= tol / (n as f64) {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = (aqq - app) / (2.0 * apq);
                    // tan of the rotation angle, smaller root for stability
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        if !converged {
            // final check after the last sweep
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let x = a.get(i, j);
                    off += 2.0 * x * x;
                }
            }
            if off.sqrt() > tol {
                return Err(Error::Numerical(format!(
                    "Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
                )));
            }
        }
    }

    // Collect eigenpairs (eigenvectors are columns of v) and sort descending.
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let val = a.get(k, k);
            let vec: Vec<f64> = (0..n).map(|i| v.get(i, k)).collect();
            (val, vec)
        })
        .collect();
    // Stable sort keeps tie order deterministic.
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, (val, mut vec)) in pairs.into_iter().enumerate() {
        // sign convention: entry of largest magnitude positive, lowest index wins ties
        let mut best = 0;
        for (i, x) in vec.iter().enumerate() {
            if x.abs() > vec[best].abs() {
                best = i;
            }
        }
        if vec[best] < 0.0 {
            for x in vec.iter_mut() {
                *x = -*x;
            }
        }
        eigenvalues.push(val);
        eigenvectors.row_mut(k).copy_from_slice(&vec);
    }

    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Default relative tolerance for [`numeric_rank`].
pub const RANK_REL_TOL: f64 = 1e-6;

/// Count of eigenvalues above `rel_tol * max(eigenvalues)`.
///
/// Expects descending eigenvalues. Tiny negatives (round-off) are treated as
/// zero; negatives below `-rel_tol * lambda_1` are rejected.
pub fn numeric_rank(eigenvalues: &[f64], rel_tol: f64) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Ok(0);
    }
    let lambda1 = eigenvalues[0];
    if lambda1 <= 0.0 {
        if eigenvalues.iter().any(|&x| x < -rel_tol * lambda1.abs().max(1e-300)) && lambda1 < 0.0 {
            return Err(Error::Numerical(format!(
                "largest eigenvalue is negative: {lambda1}"
            )));
        }
        return Ok(0);
    }
    let clamp_floor = -rel_tol * lambda1;
    for &x in eigenvalues {
        if x < clamp_floor {
            return Err(Error::Numerical(format!(
                "eigenvalue {x} below round-off floor {clamp_floor}"
            )));
        }
    }
    let threshold = rel_tol * lambda1;
    Ok(eigenvalues.iter().filter(|&&x| x > threshold).count())
}

/// Standard Pearson correlation coefficient.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "pearson_correlation: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedStatistic(
            "pearson_correlation: zero variance input".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

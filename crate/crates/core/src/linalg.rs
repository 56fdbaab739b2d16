//! Small dense linear algebra used by the preconditioners.
//!
//! Everything here is 64-bit and sequential: each output element is
//! accumulated in a fixed order, so results do not depend on the caller's
//! thread pool.

use std::ops::{Index, IndexMut};

use crate::error::{check_dim, EfcpError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("DenseMatrix::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("DenseMatrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("matmul", self.cols, rhs.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self[(i, k)] * rhs[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn transpose_matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("transpose_matmul", self.rows, rhs.rows)?;
        let mut out = DenseMatrix::zeros(self.cols, rhs.cols);
        for i in 0..self.cols {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.rows {
                    acc += self[(k, i)] * rhs[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`, accumulated over rows in ascending order.
    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("transpose_matvec", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖a − b‖ / ‖b‖`, or the absolute difference when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
}

impl EigenDecomposition {
    /// `Q Λ Qᵀ`.
    pub fn recompose(&self) -> DenseMatrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..self.eigenvalues.len())
                .map(|k| q[(i, k)] * self.eigenvalues[k] * q[(j, k)])
                .sum()
        })
    }
}

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm drops below
/// `1e-12 · ‖A‖_F`. Each eigenvector is sign-normalized so that its
/// largest-magnitude component is positive.
pub fn sym_eig(a: &DenseMatrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(EfcpError::Dimension {
            context: "sym_eig (square matrix)",
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Err(EfcpError::Parameter {
            name: "a",
            reason: "empty matrix".into(),
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > SYMMETRY_TOLERANCE || gap.is_nan() {
                return Err(EfcpError::Asymmetric {
                    row: i,
                    col: j,
                    gap,
                });
            }
        }
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(EfcpError::NonFinite("sym_eig input"));
    }

    // Work on the exactly-symmetrized copy.
    let mut w = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_TOLERANCE * w.frobenius_norm();

    let off_norm = |w: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += w[(i, j)] * w[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&w) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (w[(q, q)] - w[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = w[(k, p)];
                    let akq = w[(k, q)];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    w[(k, p)] = new_kp;
                    w[(p, k)] = new_kp;
                    w[(k, q)] = new_kq;
                    w[(q, k)] = new_kq;
                }
                w[(p, p)] -= t * apq;
                w[(q, q)] += t * apq;
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&w) <= threshold;
    }
    if !converged {
        return Err(EfcpError::Breakdown(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(j, j)].total_cmp(&w[(i, i)]).then(i.cmp(&j)));

    let eigenvalues = order.iter().map(|&i| w[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        let pivot = col.iter().copied().fold(
            0.0_f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Residual threshold, relative to the column's own input norm, below
/// which a column is treated as linearly dependent.
const DEGENERATE_COLUMN_TOLERANCE: f64 = 1e-12;

/// Modified Gram–Schmidt with one re-orthogonalization pass.
///
/// Columns that are (numerically) in the span of the earlier ones come
/// back as zero columns.
pub fn orthogonalize(p: &DenseMatrix) -> DenseMatrix {
    let (n, rho) = (p.rows(), p.cols());
    let mut out = DenseMatrix::zeros(n, rho);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rho);
    for j in 0..rho {
        let mut v = p.column(j);
        let original = norm(&v);
        if original == 0.0 || !original.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= proj * qi;
                }
            }
        }
        let residual = norm(&v);
        if residual < DEGENERATE_COLUMN_TOLERANCE * original {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= residual);
        out.set_column(j, &v);
        basis.push(v);
    }
    out
}

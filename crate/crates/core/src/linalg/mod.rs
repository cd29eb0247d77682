//! Dense linear-algebra helpers shared by the solvers.

pub mod schur;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub use schur::{CMatrix, ComplexSchur};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Relative asymmetry `‖M − Mᵀ‖_F / max(‖M‖_F, tiny)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(f64::MIN_POSITIVE)
}

/// Symmetric eigendecomposition with eigenvalues in descending order and each
/// eigenvector's largest-magnitude entry made positive.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let eig = symmetrize(m).symmetric_eigen();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (col, &i) in idx.iter().enumerate() {
            let mut v = eig.eigenvectors.column(i).clone_owned();
            let (mut best, mut best_abs) = (0, -1.0f64);
            for (k, x) in v.iter().enumerate() {
                if x.abs() > best_abs + 1e-14 * best_abs.max(1.0) {
                    best = k;
                    best_abs = x.abs();
                }
            }
            if v[best] < 0.0 {
                v.neg_mut();
            }
            vectors.set_column(col, &v);
        }
        Self { values, vectors }
    }

    pub fn max(&self) -> f64 {
        self.values.get(0).copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().last().unwrap_or(0.0)
    }
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Symmetric square root of a PSD matrix; negative eigenvalues from roundoff
/// are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymEig::new(m);
    let d = DMatrix::from_diagonal(&e.values.map(|x| x.max(0.0).sqrt()));
    &e.vectors * d * e.vectors.transpose()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

pub fn svec_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Orthonormal coordinates of a symmetric matrix (upper triangle, column
/// major, off-diagonal entries scaled by √2), so the trace inner product
/// becomes the Euclidean one.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(svec_dim(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[k] = if i == j {
                m[(i, i)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)])
            };
            k += 1;
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                out[(i, i)] = v[k];
            } else {
                let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                out[(i, j)] = x;
                out[(j, i)] = x;
            }
            k += 1;
        }
    }
    out
}

pub fn smat_complex(v: &[Complex64], n: usize) -> CMatrix {
    let mut out = CMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                out[(i, i)] = v[k];
            } else {
                let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                out[(i, j)] = x;
                out[(j, i)] = x;
            }
            k += 1;
        }
    }
    out
}

/// Symmetric basis element with unit Frobenius norm matching `svec` index `k`.
pub fn svec_basis(n: usize, k: usize) -> DMatrix<f64> {
    let mut e = vec![0.0; svec_dim(n)];
    e[k] = 1.0;
    smat(&e, n)
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a general real matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite entry passed to eigensolver"));
    }
    to_faer(m)
        .eigenvalues()
        .map_err(|e| Error::numerical(format!("eigensolver failed: {e:?}")))
}

/// Eigenvalues and right eigenvectors (columns) of a general real matrix.
pub fn eigen(m: &DMatrix<f64>) -> Result<(Vec<Complex64>, CMatrix)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), CMatrix::zeros(0, 0)));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite entry passed to eigensolver"));
    }
    let e = to_faer(m)
        .eigen()
        .map_err(|e| Error::numerical(format!("eigensolver failed: {e:?}")))?;
    let s = e.S();
    let u = e.U();
    let values = (0..n).map(|i| s.column_vector()[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    Ok((values, vectors))
}

/// Solves `M x = b` by LU with partial pivoting.
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::numerical("singular linear system"))
}

pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() < 64 {
        return m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("matrix is singular"));
    }
    use faer::linalg::solvers::DenseSolveCore;
    let inv = to_faer(m).partial_piv_lu().inverse();
    let out = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| inv[(i, j)]);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("matrix is singular"));
    }
    Ok(out)
}

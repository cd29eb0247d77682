//! Complex Schur decomposition with eigenvalue reordering.
//!
//! `A = Z T Z^H` with `Z` unitary and `T` upper triangular. Used by the
//! Bartels–Stewart Lyapunov kernel and the Hamiltonian Riccati solver, both of
//! which only ever see matrices of dimension at most `2n` for desk-scale `n`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone)]
pub struct ComplexSchur {
    /// Unitary Schur vectors.
    pub z: CMatrix,
    /// Upper triangular factor.
    pub t: CMatrix,
}

/// Rotation `[c s; -conj(s) c]` annihilating the second entry of `(x, y)`.
#[derive(Debug, Clone, Copy)]
struct Givens {
    c: f64,
    s: Complex64,
}

impl Givens {
    fn new(x: Complex64, y: Complex64) -> Self {
        let ax = x.norm();
        let ay = y.norm();
        if ay == 0.0 {
            return Self { c: 1.0, s: Complex64::new(0.0, 0.0) };
        }
        if ax == 0.0 {
            return Self { c: 0.0, s: y.conj() / ay };
        }
        let nrm = ax.hypot(ay);
        Self { c: ax / nrm, s: (x / ax) * y.conj() / nrm }
    }

    /// Left application to rows `k`, `k+1` over columns `cols`.
    fn rows(&self, m: &mut CMatrix, k: usize, cols: std::ops::Range<usize>) {
        for j in cols {
            let a = m[(k, j)];
            let b = m[(k + 1, j)];
            m[(k, j)] = a * self.c + self.s * b;
            m[(k + 1, j)] = b * self.c - self.s.conj() * a;
        }
    }

    /// Right application of the adjoint to columns `k`, `k+1` over `rows`.
    fn cols(&self, m: &mut CMatrix, k: usize, rows: std::ops::Range<usize>) {
        for i in rows {
            let a = m[(i, k)];
            let b = m[(i, k + 1)];
            m[(i, k)] = a * self.c + b * self.s.conj();
            m[(i, k + 1)] = b * self.c - a * self.s;
        }
    }
}

impl ComplexSchur {
    pub fn of_real(a: &DMatrix<f64>) -> Result<Self> {
        Self::new(a.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn new(mut h: CMatrix) -> Result<Self> {
        let n = h.nrows();
        if n != h.ncols() {
            return Err(Error::input("Schur decomposition needs a square matrix"));
        }
        if h.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return Err(Error::numerical("non-finite entry in Schur input"));
        }
        let mut z = CMatrix::identity(n, n);
        hessenberg(&mut h, &mut z);
        qr_iterate(&mut h, &mut z)?;
        for j in 0..n {
            for i in j + 1..n {
                h[(i, j)] = Complex64::new(0.0, 0.0);
            }
        }
        Ok(Self { z, t: h })
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        (0..self.t.nrows()).map(|i| self.t[(i, i)]).collect()
    }

    /// Swaps the adjacent diagonal entries `k` and `k+1`.
    fn swap(&mut self, k: usize) {
        let n = self.t.nrows();
        let a = self.t[(k, k)];
        let b = self.t[(k + 1, k + 1)];
        let g = Givens::new(self.t[(k, k + 1)], b - a);
        g.rows(&mut self.t, k, k + 2..n);
        g.cols(&mut self.t, k, 0..k);
        self.t[(k, k)] = b;
        self.t[(k + 1, k + 1)] = a;
        g.cols(&mut self.z, k, 0..n);
    }

    /// Moves every eigenvalue satisfying `select` to the leading block, keeping
    /// relative order within both groups. Returns the size of the leading block.
    pub fn reorder<F: Fn(Complex64) -> bool>(&mut self, select: F) -> usize {
        let n = self.t.nrows();
        let mut ks = 0;
        for k in 0..n {
            if select(self.t[(k, k)]) {
                let mut pos = k;
                while pos > ks {
                    self.swap(pos - 1);
                    pos -= 1;
                }
                ks += 1;
            }
        }
        ks
    }
}

fn hessenberg(h: &mut CMatrix, z: &mut CMatrix) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    for k in 0..n - 2 {
        let mut v: Vec<Complex64> = (k + 1..n).map(|i| h[(i, k)]).collect();
        let xnorm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            continue;
        }
        let x0 = v[0];
        let phase = if x0.norm() == 0.0 { Complex64::new(1.0, 0.0) } else { x0 / x0.norm() };
        v[0] += phase * xnorm;
        let vnorm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        // H <- (I - 2 v v^H) H on rows k+1..
        for j in 0..n {
            let mut dot = Complex64::new(0.0, 0.0);
            for (idx, i) in (k + 1..n).enumerate() {
                dot += v[idx].conj() * h[(i, j)];
            }
            for (idx, i) in (k + 1..n).enumerate() {
                h[(i, j)] -= v[idx] * dot * 2.0;
            }
        }
        // H <- H (I - 2 v v^H) on columns k+1.., same for Z
        for m in [&mut *h, &mut *z] {
            for i in 0..n {
                let mut dot = Complex64::new(0.0, 0.0);
                for (idx, j) in (k + 1..n).enumerate() {
                    dot += m[(i, j)] * v[idx];
                }
                for (idx, j) in (k + 1..n).enumerate() {
                    m[(i, j)] -= dot * v[idx].conj() * 2.0;
                }
            }
        }
        for i in k + 2..n {
            h[(i, k)] = Complex64::new(0.0, 0.0);
        }
    }
}

fn wilkinson_shift(h: &CMatrix, hi: usize) -> Complex64 {
    let a = h[(hi - 1, hi - 1)];
    let b = h[(hi - 1, hi)];
    let c = h[(hi, hi - 1)];
    let d = h[(hi, hi)];
    let half = (a - d) * 0.5;
    let disc = (half * half + b * c).sqrt();
    let m = (a + d) * 0.5;
    let mu1 = m + disc;
    let mu2 = m - disc;
    if (mu1 - d).norm() <= (mu2 - d).norm() {
        mu1
    } else {
        mu2
    }
}

fn qr_iterate(h: &mut CMatrix, z: &mut CMatrix) -> Result<()> {
    let n = h.nrows();
    if n <= 1 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let scale = h.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut hi = n - 1;
    let mut iter = 0usize;
    let mut total = 0usize;
    let budget = 60 * n.max(10);
    while hi > 0 {
        let mut l = hi;
        while l > 0 {
            let mut s = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            if s == 0.0 {
                s = scale;
            }
            if h[(l, l - 1)].norm() <= eps * s {
                h[(l, l - 1)] = Complex64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total += 1;
        if total > budget * n {
            return Err(Error::numerical("complex QR iteration failed to converge"));
        }
        let mu = if iter % 11 == 0 {
            h[(hi, hi)] + Complex64::new(h[(hi, hi - 1)].norm() * 0.75, h[(hi, hi - 1)].norm() * 0.5)
        } else {
            wilkinson_shift(h, hi)
        };
        let mut x = h[(l, l)] - mu;
        let mut y = h[(l + 1, l)];
        for k in l..hi {
            if k > l {
                x = h[(k, k - 1)];
                y = h[(k + 1, k - 1)];
            }
            let g = Givens::new(x, y);
            let c0 = if k > l { k - 1 } else { l };
            g.rows(h, k, c0..n);
            let r1 = (k + 3).min(hi + 1);
            g.cols(h, k, 0..r1);
            g.cols(z, k, 0..n);
            if k > l {
                h[(k + 1, k - 1)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(())
}

//! Linear stochastic systems with multiplicative noise.
//!
//! ```text
//! dx = (A x + B u) dt + Σ_i N_i x dW_i,   y = C x,   E[W Wᵀ](t) = K t
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Coefficients `(A, N_1..N_q, B, C)` together with the Wiener covariance `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSystem {
    a: DMatrix<f64>,
    n: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl StochasticSystem {
    pub fn new(
        a: DMatrix<f64>,
        n: Vec<DMatrix<f64>>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        let dim = a.nrows();
        if a.ncols() != dim {
            return Err(Error::input(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        for (i, ni) in n.iter().enumerate() {
            if ni.shape() != (dim, dim) {
                return Err(Error::input(format!(
                    "N{} must be {dim}x{dim}, got {}x{}",
                    i + 1,
                    ni.nrows(),
                    ni.ncols()
                )));
            }
        }
        if b.nrows() != dim {
            return Err(Error::input(format!("B must have {dim} rows, got {}", b.nrows())));
        }
        if c.ncols() != dim {
            return Err(Error::input(format!("C must have {dim} columns, got {}", c.ncols())));
        }
        let q = n.len();
        if k.shape() != (q, q) {
            return Err(Error::input(format!(
                "K must be {q}x{q} to match the noise channels, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        if q > 0 {
            let scale = k.norm().max(f64::MIN_POSITIVE);
            if (&k - k.transpose()).norm() > 1e-12 * scale {
                return Err(Error::input("K is not symmetric"));
            }
            if linalg::lambda_min(&k) < -1e-12 * scale {
                return Err(Error::input("K is not positive semidefinite"));
            }
        }
        let all = std::iter::once(&a).chain(n.iter()).chain([&b, &c, &k]);
        if all.flat_map(|m| m.iter()).any(|x| !x.is_finite()) {
            return Err(Error::input("non-finite coefficient"));
        }
        Ok(Self { a, n, b, c, k })
    }

    /// Single-channel system with `K = [1]`.
    pub fn with_unit_noise(
        a: DMatrix<f64>,
        n1: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(a, vec![n1], b, c, DMatrix::identity(1, 1))
    }

    /// Scalar system `(a, n₁, b, c)` with covariance `k`.
    pub fn scalar(a: f64, n1: f64, b: f64, c: f64, k: f64) -> Result<Self> {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        Self::new(m(a), vec![m(n1)], m(b), m(c), m(k))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn noise(&self) -> &[DMatrix<f64>] {
        &self.n
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn channels(&self) -> usize {
        self.n.len()
    }

    pub fn with_a(&self, a: DMatrix<f64>) -> Result<Self> {
        Self::new(a, self.n.clone(), self.b.clone(), self.c.clone(), self.k.clone())
    }

    pub fn with_b(&self, b: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.n.clone(), b, self.c.clone(), self.k.clone())
    }

    pub fn with_c(&self, c: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.n.clone(), self.b.clone(), c, self.k.clone())
    }

    /// The dual triple `(Aᵀ, Cᵀ, N_iᵀ)` viewed as a system with input matrix `Cᵀ`
    /// and output `Bᵀ`.
    pub fn dual(&self) -> Self {
        Self {
            a: self.a.transpose(),
            n: self.n.iter().map(|m| m.transpose()).collect(),
            b: self.c.transpose(),
            c: self.b.transpose(),
            k: self.k.clone(),
        }
    }

    /// State-space transformation `(SAS⁻¹, SN_iS⁻¹, SB, CS⁻¹)`.
    pub fn transform(&self, s: &DMatrix<f64>, s_inv: &DMatrix<f64>) -> Self {
        Self {
            a: s * &self.a * s_inv,
            n: self.n.iter().map(|m| s * m * s_inv).collect(),
            b: s * &self.b,
            c: &self.c * s_inv,
            k: self.k.clone(),
        }
    }
}

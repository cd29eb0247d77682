//! Standard and generalized Lyapunov equations.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, ComplexSchur};
use crate::operators;
use crate::system::StochasticSystem;

use super::SolverConfig;

/// Reusable Bartels–Stewart kernel for `AᵀX + XA + W = 0` built on the
/// complex Schur form of `A`.
#[derive(Debug, Clone)]
pub struct LyapunovKernel {
    a: DMatrix<f64>,
    schur: ComplexSchur,
}

impl LyapunovKernel {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::input("Lyapunov coefficient must be square"));
        }
        let schur = ComplexSchur::of_real(a)?;
        let kernel = Self { a: a.clone(), schur };
        kernel.check_spectrum()?;
        Ok(kernel)
    }

    fn check_spectrum(&self) -> Result<()> {
        let ev = self.schur.eigenvalues();
        let scale = ev.iter().map(|l| l.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for (i, li) in ev.iter().enumerate() {
            for lj in &ev[i..] {
                if (li.conj() + lj).norm() <= 1e3 * f64::EPSILON * scale {
                    return Err(Error::SingularSpectrum { lhs: format!("{li}"), rhs: format!("{lj}") });
                }
            }
        }
        Ok(())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn solve_once(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.a.nrows();
        let u = &self.schur.z;
        let t = &self.schur.t;
        let wc = w.map(|x| Complex64::new(x, 0.0));
        let rhs: CMatrix = u.adjoint() * wc * u;
        let mut y = CMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let mut acc = -rhs[(i, j)];
                for k in 0..i {
                    acc -= t[(k, i)].conj() * y[(k, j)];
                }
                for k in 0..j {
                    acc -= y[(i, k)] * t[(k, j)];
                }
                y[(i, j)] = acc / (t[(i, i)].conj() + t[(j, j)]);
            }
        }
        let x = u * y * u.adjoint();
        linalg::symmetrize(&x.map(|z| z.re))
    }

    /// Solves `AᵀX + XA + W = 0` with one step of iterative refinement.
    pub fn solve(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.shape() != self.a.shape() {
            return Err(Error::input("Lyapunov right-hand side has the wrong shape"));
        }
        let mut x = self.solve_once(w);
        let r = lyapunov_residual(&self.a, &x, w);
        if r.norm() > 0.0 {
            x += self.solve_once(&r);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("Lyapunov solution is not finite"));
        }
        Ok(x)
    }
}

/// `AᵀX + XA + W`.
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * x + x * a + w
}

/// Solves `AᵀX + XA + W = 0`.
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LyapunovKernel::new(a)?.solve(w)
}

/// `AᵀX + XA + Π_N(X) + W`.
pub fn generalized_residual(sys: &StochasticSystem, x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    operators::apply_unchecked(sys, x, false) + w
}

/// Solves `AᵀX + XA + Π_N(X) + W = 0` for a mean-square stable `(A, N_i)`.
pub fn solve_generalized_lyapunov(
    sys: &StochasticSystem,
    w: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    if w.shape() != (sys.n(), sys.n()) {
        return Err(Error::input("generalized Lyapunov right-hand side has the wrong shape"));
    }
    let cert = operators::mean_square_stability(sys)?;
    if !cert.stable {
        return Err(Error::precondition(format!(
            "(A, N) is not mean-square stable (spectral abscissa {:.3e})",
            cert.abscissa
        )));
    }
    generalized_lyapunov_unchecked(sys, w, cfg)
}

const DIRECT_LIMIT: usize = 80;

/// Fixed-point iteration `X ← lyap(A, Π_N(X) + W)` with a direct
/// symmetric-coordinate solve once it stalls. Stability is not checked.
pub(crate) fn generalized_lyapunov_unchecked(
    sys: &StochasticSystem,
    w: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let n = sys.n();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let wn = w.norm();
    let target = cfg.tol * wn.max(f64::MIN_POSITIVE);
    let zero_noise = sys.noise().iter().all(|m| m.iter().all(|&v| v == 0.0));
    let kernel = match LyapunovKernel::new(sys.a()) {
        Ok(k) => Some(k),
        Err(Error::SingularSpectrum { .. }) if n <= DIRECT_LIMIT && !zero_noise => None,
        Err(e) => return Err(e),
    };
    if let Some(kernel) = &kernel {
        if zero_noise {
            return kernel.solve(w);
        }
        let mut x = kernel.solve(w)?;
        let mut prev_change = f64::INFINITY;
        for it in 0..cfg.max_outer {
            let next = kernel.solve(&(operators::noise_term(sys, &x, false) + w))?;
            let change = (&next - &x).norm();
            x = next;
            if generalized_residual(sys, &x, w).norm() <= target {
                return Ok(x);
            }
            let ratio = change / prev_change;
            prev_change = change;
            if !change.is_finite() || (it >= 8 && ratio > 0.9) {
                break;
            }
        }
    }
    direct_generalized_lyapunov(sys, w, target)
}

fn direct_generalized_lyapunov(sys: &StochasticSystem, w: &DMatrix<f64>, target: f64) -> Result<DMatrix<f64>> {
    let n = sys.n();
    if n > DIRECT_LIMIT {
        return Err(Error::NonConvergence {
            what: "generalized Lyapunov fixed point stalled beyond the direct-solve budget".into(),
            iterations: 0,
            residual: f64::NAN,
        });
    }
    let m = operators::matricize_symmetric(sys, false)?;
    let lu = m.lu();
    let rhs = -linalg::svec(w);
    let mut sol = lu.solve(&rhs).ok_or_else(|| Error::numerical("generalized Lyapunov operator is singular"))?;
    let mut x = linalg::smat(sol.as_slice(), n);
    for _ in 0..2 {
        let r = generalized_residual(sys, &x, w);
        if r.norm() <= target {
            break;
        }
        if let Some(d) = lu.solve(&-linalg::svec(&r)) {
            sol += d;
            x = linalg::smat(sol.as_slice(), n);
        }
    }
    let res = generalized_residual(sys, &x, w).norm();
    if !res.is_finite() || res > target.max(1e-12 * w.norm()) * 1e2 {
        return Err(Error::NonConvergence {
            what: "generalized Lyapunov equation".into(),
            iterations: 1,
            residual: res,
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn scalar_and_diagonal() {
        let x = solve_lyapunov(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let x = solve_lyapunov(&-&i2, &i2).unwrap();
        assert!((x - &i2 * 0.5).norm() < 1e-15);
    }

    #[test]
    fn random_stable_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = rand_mat(&mut rng, 8, 8) - DMatrix::identity(8, 8) * 2.0;
            let g = rand_mat(&mut rng, 8, 3);
            let w = &g * g.transpose();
            let x = solve_lyapunov(&a, &w).unwrap();
            assert!(lyapunov_residual(&a, &x, &w).norm() <= 1e-11 * w.norm());
        }
    }

    #[test]
    fn unstable_nonsingular_spectrum_is_fine() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 6, 6) + DMatrix::identity(6, 6) * 3.0;
        let w = DMatrix::identity(6, 6);
        let x = solve_lyapunov(&a, &w).unwrap();
        assert!(lyapunov_residual(&a, &x, &w).norm() <= 1e-11);
    }

    #[test]
    fn singular_spectrum_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::SingularSpectrum { .. }));
    }

    #[test]
    fn generalized_scalar_closed_form() {
        let sys = StochasticSystem::scalar(-1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let x = solve_generalized_lyapunov(&sys, &DMatrix::from_element(1, 1, 1.0), &SolverConfig::default())
            .unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generalized_without_noise_matches_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 5, 5) - DMatrix::identity(5, 5) * 2.0;
        let sys = StochasticSystem::new(
            a.clone(),
            vec![DMatrix::zeros(5, 5)],
            DMatrix::zeros(5, 1),
            DMatrix::zeros(1, 5),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let w = DMatrix::identity(5, 5);
        let x = solve_generalized_lyapunov(&sys, &w, &SolverConfig::default()).unwrap();
        assert!((x - solve_lyapunov(&a, &w).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn generalized_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 6, 6) - DMatrix::identity(6, 6) * 2.5;
        let n1 = rand_mat(&mut rng, 6, 6);
        let sys = StochasticSystem::with_unit_noise(a, n1, DMatrix::zeros(6, 1), DMatrix::zeros(1, 6)).unwrap();
        assert!(operators::mean_square_stability(&sys).unwrap().stable);
        let g = rand_mat(&mut rng, 6, 6);
        let w = &g * g.transpose();
        let x = solve_generalized_lyapunov(&sys, &w, &SolverConfig::default()).unwrap();
        assert!(generalized_residual(&sys, &x, &w).norm() <= 1e-10 * w.norm());
    }

    #[test]
    fn generalized_rejects_unstable() {
        let sys = StochasticSystem::scalar(-0.4, 1.0, 0.0, 0.0, 1.0).unwrap();
        let err = solve_generalized_lyapunov(&sys, &DMatrix::from_element(1, 1, 1.0), &SolverConfig::default());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn slow_contraction_uses_direct_fallback() {
        // 2a + n²k = -0.01: the fixed point contracts with ratio 0.99.
        let sys = StochasticSystem::scalar(-1.0, 1.41067, 0.0, 0.0, 1.0).unwrap();
        let w = DMatrix::from_element(1, 1, 1.0);
        let x = solve_generalized_lyapunov(&sys, &w, &SolverConfig::default()).unwrap();
        let expect = 1.0 / (2.0 - 1.41067f64.powi(2));
        assert!((x[(0, 0)] - expect).abs() < 1e-9 * expect);
    }
}

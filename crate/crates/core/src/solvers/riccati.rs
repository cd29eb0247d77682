//! Stabilizing solutions of `AᵀX + XA + W − XBBᵀX = 0`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, ComplexSchur};

use super::lyapunov::LyapunovKernel;

const MAX_NEWTON: usize = 3;

/// `AᵀX + XA + W − XBBᵀX`.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let xb = x * b;
    a.transpose() * x + x * a + w - &xb * xb.transpose()
}

fn hurwitz_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(linalg::eigenvalues(a)?.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Hamiltonian `[A, −BBᵀ; −W, −Aᵀ]` with its stable invariant subspace.
fn hamiltonian_solution(a: &DMatrix<f64>, g: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&-g);
    h.view_mut((n, 0), (n, n)).copy_from(&-w);
    h.view_mut((n, n), (n, n)).copy_from(&-a.transpose());
    let mut schur = ComplexSchur::of_real(&h)?;
    let scale = h.norm().max(1.0);
    let ev = schur.eigenvalues();
    if let Some(l) = ev.iter().find(|l| l.re.abs() <= 1e-10 * scale) {
        return Err(Error::numerical(format!(
            "Hamiltonian has an eigenvalue {l} on the imaginary axis; no stabilizing solution"
        )));
    }
    let k = schur.reorder(|l| l.re < 0.0);
    if k != n {
        return Err(Error::numerical(format!("Hamiltonian has {k} stable eigenvalues, expected {n}")));
    }
    let u1: CMatrix = schur.z.view((0, 0), (n, n)).clone_owned();
    let u2: CMatrix = schur.z.view((n, 0), (n, n)).clone_owned();
    let sv = u1.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smin <= 1e-13 * smax.max(f64::MIN_POSITIVE) {
        return Err(Error::numerical("stable invariant subspace is not a graph; no stabilizing solution"));
    }
    // X U1 = U2  ⇔  U1ᴴ Xᴴ = U2ᴴ.
    let x: CMatrix = u1
        .adjoint()
        .lu()
        .solve(&u2.adjoint())
        .ok_or_else(|| Error::numerical("singular U1 in Riccati solve"))?;
    let x = x.adjoint();
    let xr = x.map(|z: Complex64| z.re);
    Ok(linalg::symmetrize(&xr))
}

/// Stabilizing solution of `AᵀX + XA + W − XBBᵀX = 0` by the ordered-Schur
/// Hamiltonian method followed by Newton–Kleinman refinement.
pub fn solve_riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || w.shape() != (n, n) {
        return Err(Error::input("inconsistent Riccati dimensions"));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let g = b * b.transpose();
    let mut x = hamiltonian_solution(a, &g, w)?;
    let target = 1e-10 * w.norm().max(1.0);
    let mut res = riccati_residual(a, b, w, &x).norm();
    let mut steps = 0;
    while steps < MAX_NEWTON && (steps == 0 || res > target) {
        let acl = a - &g * &x;
        let xb = &x * b;
        let rhs = w + &xb * xb.transpose();
        let next = LyapunovKernel::new(&acl)?.solve(&rhs)?;
        let next_res = riccati_residual(a, b, w, &next).norm();
        steps += 1;
        if next_res.is_finite() && next_res <= res.max(target) {
            x = next;
            res = next_res;
        } else {
            break;
        }
    }
    if res > target {
        return Err(Error::NonConvergence { what: "Riccati refinement".into(), iterations: steps, residual: res });
    }
    let abscissa = hurwitz_abscissa(&(a - &g * &x))?;
    if abscissa >= 0.0 {
        return Err(Error::numerical(format!(
            "Riccati solution is not stabilizing (closed-loop abscissa {abscissa:.3e})"
        )));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::lyapunov::solve_lyapunov;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_positive_root() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let x = solve_riccati(&m(1.0), &m(1.0), &m(1.0)).unwrap();
        assert!((x[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-13);
    }

    #[test]
    fn zero_input_reduces_to_lyapunov() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() - 0.5) - DMatrix::identity(5, 5) * 2.0;
        let w = DMatrix::identity(5, 5);
        let x = solve_riccati(&a, &DMatrix::zeros(5, 2), &w).unwrap();
        assert!((x - solve_lyapunov(&a, &w).unwrap()).norm() < 1e-11);
    }

    #[test]
    fn random_stabilizable_residual_and_closed_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>() - 0.3);
            let b = DMatrix::from_fn(8, 2, |_, _| rng.random::<f64>() - 0.5);
            let c = DMatrix::from_fn(3, 8, |_, _| rng.random::<f64>() - 0.5);
            let w = c.transpose() * &c;
            let x = solve_riccati(&a, &b, &w).unwrap();
            assert!(riccati_residual(&a, &b, &w, &x).norm() <= 1e-10 * w.norm().max(1.0));
            assert!(hurwitz_abscissa(&(&a - &b * b.transpose() * &x)).unwrap() < 0.0);
            assert!(linalg::lambda_min(&x) > -1e-10);
        }
    }

    #[test]
    fn unstabilizable_is_rejected() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        assert!(solve_riccati(&m(1.0), &m(0.0), &m(1.0)).is_err());
    }
}

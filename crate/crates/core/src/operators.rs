//! Generalized Lyapunov operators `L_A + Π_N`, their matricizations, the
//! mean-square stability test and the Hautus-type cone eigenvector tests.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::solvers::{self, SolverConfig};
use crate::system::StochasticSystem;

/// Largest state dimension for which dense Kronecker representations are
/// formed.
pub const MATRICIZE_LIMIT: usize = 150;

/// Default relative tolerance of the Hautus tests.
pub const HAUTUS_TOL: f64 = 1e-8;

const CONVEX_SAMPLES: usize = 17;

fn check_square(sys: &StochasticSystem, x: &DMatrix<f64>) -> Result<()> {
    if x.shape() != (sys.n(), sys.n()) {
        return Err(Error::input(format!(
            "operator argument must be {0}x{0}, got {1}x{2}",
            sys.n(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// `Π_N(X) = Σ k_ij N_iᵀ X N_j`, or `Π_N*(X) = Σ k_ij N_i X N_jᵀ` when `adjoint`.
pub fn noise_term(sys: &StochasticSystem, x: &DMatrix<f64>, adjoint: bool) -> DMatrix<f64> {
    let n = sys.n();
    let k = sys.covariance();
    let ns = sys.noise();
    let mut out = DMatrix::zeros(n, n);
    if adjoint {
        let right: Vec<DMatrix<f64>> = ns.iter().map(|nj| x * nj.transpose()).collect();
        for (i, ni) in ns.iter().enumerate() {
            let mut acc = DMatrix::zeros(n, n);
            for (j, r) in right.iter().enumerate() {
                if k[(i, j)] != 0.0 {
                    acc += r * k[(i, j)];
                }
            }
            out += ni * acc;
        }
    } else {
        let right: Vec<DMatrix<f64>> = ns.iter().map(|nj| x * nj).collect();
        for (i, ni) in ns.iter().enumerate() {
            let mut acc = DMatrix::zeros(n, n);
            for (j, r) in right.iter().enumerate() {
                if k[(i, j)] != 0.0 {
                    acc += r * k[(i, j)];
                }
            }
            out += ni.transpose() * acc;
        }
    }
    linalg::symmetrize(&out)
}

/// `(L_A + Π_N)(X)` or its adjoint `(L_A + Π_N)*(X) = AX + XAᵀ + Σ k_ij N_i X N_jᵀ`.
pub fn apply_operator(sys: &StochasticSystem, x: &DMatrix<f64>, adjoint: bool) -> Result<DMatrix<f64>> {
    check_square(sys, x)?;
    Ok(apply_unchecked(sys, x, adjoint))
}

pub(crate) fn apply_unchecked(sys: &StochasticSystem, x: &DMatrix<f64>, adjoint: bool) -> DMatrix<f64> {
    let a = sys.a();
    let lyap = if adjoint { a * x + x * a.transpose() } else { a.transpose() * x + x * a };
    linalg::symmetrize(&(lyap + noise_term(sys, x, adjoint)))
}

/// Kronecker matrix of the operator acting on column-major `vec(X)`.
#[derive(Debug, Clone)]
pub struct OperatorMatricization {
    pub matrix: DMatrix<f64>,
    pub adjoint: bool,
}

impl OperatorMatricization {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        linalg::unvec(&(&self.matrix * linalg::vec(x)), n)
    }
}

fn budget(n: usize) -> Result<()> {
    if n > MATRICIZE_LIMIT {
        return Err(Error::Capacity { n, limit: MATRICIZE_LIMIT });
    }
    Ok(())
}

/// Full `n²×n²` matricization: `I⊗Aᵀ + Aᵀ⊗I + Σ k_ij N_jᵀ⊗N_iᵀ` (or the
/// adjoint `I⊗A + A⊗I + Σ k_ij N_j⊗N_i`).
pub fn matricize(sys: &StochasticSystem, adjoint: bool) -> Result<OperatorMatricization> {
    let n = sys.n();
    budget(n)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let a = if adjoint { sys.a().clone() } else { sys.a().transpose() };
    let mut m = linalg::kron(&eye, &a) + linalg::kron(&a, &eye);
    let k = sys.covariance();
    for (i, ni) in sys.noise().iter().enumerate() {
        for (j, nj) in sys.noise().iter().enumerate() {
            if k[(i, j)] == 0.0 {
                continue;
            }
            let term = if adjoint {
                linalg::kron(nj, ni)
            } else {
                linalg::kron(&nj.transpose(), &ni.transpose())
            };
            m += term * k[(i, j)];
        }
    }
    Ok(OperatorMatricization { matrix: m, adjoint })
}

/// Matrix of the operator restricted to symmetric matrices in orthonormal
/// `svec` coordinates (dimension `n(n+1)/2`). The adjoint representation is
/// the transpose of the forward one.
pub fn matricize_symmetric(sys: &StochasticSystem, adjoint: bool) -> Result<DMatrix<f64>> {
    let n = sys.n();
    budget(n)?;
    let d = linalg::svec_dim(n);
    let mut m = DMatrix::zeros(d, d);
    for k in 0..d {
        let e = linalg::svec_basis(n, k);
        let col = linalg::svec(&apply_unchecked(sys, &e, adjoint));
        m.set_column(k, &col);
    }
    Ok(m)
}

/// Spectral abscissa of `L_A + Π_N` and the eigenvalue attaining it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralCertificate {
    pub abscissa: f64,
    pub witness_re: f64,
    pub witness_im: f64,
    pub stable: bool,
}

impl SpectralCertificate {
    pub fn witness_eigenvalue(&self) -> Complex64 {
        Complex64::new(self.witness_re, self.witness_im)
    }

    fn from_eigenvalues(values: &[Complex64]) -> Self {
        let best = values
            .iter()
            .copied()
            .max_by(|a, b| a.re.total_cmp(&b.re))
            .unwrap_or(Complex64::new(f64::NEG_INFINITY, 0.0));
        Self { abscissa: best.re, witness_re: best.re, witness_im: best.im, stable: best.re < 0.0 }
    }
}

/// Mean-square asymptotic stability of `(A, N_i)`: the spectral abscissa of
/// `L_A + Π_N` on the symmetric matrices is negative.
pub fn mean_square_stability(sys: &StochasticSystem) -> Result<SpectralCertificate> {
    if sys.n() == 0 {
        return Ok(SpectralCertificate::from_eigenvalues(&[]));
    }
    let m = matricize_symmetric(sys, false)?;
    let values = linalg::eigenvalues(&m)?;
    Ok(SpectralCertificate::from_eigenvalues(&values))
}

/// Cone eigenvector `V ⪰ 0` of the adjoint operator with `CV ≈ 0`.
#[derive(Debug, Clone)]
pub struct HautusWitness {
    pub eigenvalue: Complex64,
    pub v: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct HautusReport {
    /// `true` when the property (detectability or observability) holds.
    pub holds: bool,
    pub witness: Option<HautusWitness>,
}

/// Real representative of a complex eigenvector: rotated so its largest
/// entry is real positive, then the real part.
fn real_representative(v: &[Complex64]) -> (DVector<f64>, f64) {
    let (mut best, mut best_abs) = (0, -1.0);
    for (k, z) in v.iter().enumerate() {
        if z.norm() > best_abs {
            best = k;
            best_abs = z.norm();
        }
    }
    let phase = if best_abs > 0.0 { v[best].conj() / best_abs } else { Complex64::new(1.0, 0.0) };
    let rotated: Vec<Complex64> = v.iter().map(|z| z * phase).collect();
    let re = DVector::from_iterator(v.len(), rotated.iter().map(|z| z.re));
    let im = rotated.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    let total = rotated.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    (re, if total > 0.0 { im / total } else { 0.0 })
}

/// Sign-normalizes to `tr V ≥ 0` and tests `λ_min(V) ≥ −tol·λ_max(V)`.
fn cone_member(v: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let v = if v.trace() < 0.0 { -v } else { v.clone() };
    let eig = v.clone().symmetric_eigenvalues();
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if max > 0.0 && min >= -tol * max {
        Some(v)
    } else {
        None
    }
}

fn annihilated(c: &DMatrix<f64>, v: &DMatrix<f64>, tol: f64) -> bool {
    (c * v).norm() <= tol * c.norm() * v.norm()
}

/// Null space (columns) of `coeff ↦ C·Σ coeff_k V_k`.
fn output_null_combinations(c: &DMatrix<f64>, basis: &[DMatrix<f64>], tol: f64) -> Vec<DMatrix<f64>> {
    let d = basis.len();
    if c.nrows() == 0 || c.norm() == 0.0 {
        return basis.to_vec();
    }
    let rows = c.nrows() * c.ncols();
    let mut map = DMatrix::zeros(rows, d);
    for (k, v) in basis.iter().enumerate() {
        let cv = c * v / v.norm().max(f64::MIN_POSITIVE);
        map.set_column(k, &linalg::vec(&cv));
    }
    // Right singular vectors of small singular values span the null space.
    let gram = map.transpose() * &map;
    let eig = linalg::SymEig::new(&gram);
    let scale = c.norm() * c.norm();
    let mut out = Vec::new();
    for j in 0..d {
        if eig.values[j].abs() <= (tol * tol).max(1e-24) * scale.max(1.0) * 1e2 {
            let mut v = DMatrix::zeros(c.ncols(), c.ncols());
            for (k, b) in basis.iter().enumerate() {
                v += b * (eig.vectors[(k, j)] / b.norm().max(f64::MIN_POSITIVE));
            }
            out.push(linalg::symmetrize(&v));
        }
    }
    out
}

fn cluster_tol(lambda: Complex64) -> f64 {
    1e-7 * lambda.norm().max(1.0)
}

/// Scans eigenpairs of the adjoint operator for a cone witness annihilated
/// by `C`. `accept` decides which eigenvalues are eligible.
fn scan_witness<F>(sys: &StochasticSystem, tol: f64, accept: F) -> Result<Option<HautusWitness>>
where
    F: Fn(Complex64) -> bool,
{
    let n = sys.n();
    if n == 0 {
        return Ok(None);
    }
    let m = matricize_symmetric(sys, true)?;
    let (values, vectors) = linalg::eigen(&m)?;
    let c = sys.c();
    let mut used = vec![false; values.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].re.total_cmp(&values[a].re));
    for &idx in &order {
        if used[idx] || !accept(values[idx]) {
            continue;
        }
        let lambda = values[idx];
        let cluster: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&j| !used[j] && (values[j] - lambda).norm() <= cluster_tol(lambda))
            .collect();
        for &j in &cluster {
            used[j] = true;
        }
        let mut basis = Vec::new();
        for &j in &cluster {
            let col: Vec<Complex64> = vectors.column(j).iter().copied().collect();
            let (re, _) = real_representative(&col);
            let v = linalg::smat(re.as_slice(), n);
            if v.norm() > 0.0 {
                basis.push(v);
            }
        }
        if basis.is_empty() {
            continue;
        }
        let candidates = if basis.len() == 1 {
            basis.clone()
        } else {
            let mut null = output_null_combinations(c, &basis, tol);
            let signed: Vec<DMatrix<f64>> = null
                .iter()
                .map(|v| if v.trace() < 0.0 { -v } else { v.clone() })
                .collect();
            if signed.len() > 1 {
                for _ in 0..CONVEX_SAMPLES {
                    let w: Vec<f64> = (0..signed.len()).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = w.iter().sum();
                    let mut v = DMatrix::zeros(n, n);
                    for (wk, b) in w.iter().zip(&signed) {
                        v += b * (wk / s / b.norm().max(f64::MIN_POSITIVE));
                    }
                    null.push(v);
                }
            }
            null
        };
        for v in candidates {
            if let Some(v) = cone_member(&v, tol) {
                if annihilated(c, &v, tol.sqrt().max(tol)) {
                    return Ok(Some(HautusWitness { eigenvalue: lambda, v: &v / v.norm() }));
                }
            }
        }
    }
    Ok(None)
}

/// Detectability of `(A, C, N_i)`: no cone eigenvector of the adjoint operator
/// with eigenvalue `Re λ ≥ −tol` is annihilated by `C`.
pub fn hautus_detectability(sys: &StochasticSystem, tol: f64) -> Result<HautusReport> {
    let witness = scan_witness(sys, tol, |l| l.re >= -tol)?;
    Ok(HautusReport { holds: witness.is_none(), witness })
}

/// Observability of `(A, C, N_i)`: no cone eigenvector of the adjoint operator
/// (any eigenvalue) is annihilated by `C`.
pub fn hautus_observability(sys: &StochasticSystem, tol: f64) -> Result<HautusReport> {
    let witness = scan_witness(sys, tol, |_| true)?;
    Ok(HautusReport { holds: witness.is_none(), witness })
}

#[derive(Debug, Clone)]
pub struct StabilizabilityReport {
    pub stabilizable: bool,
    /// Stabilizing gain `F` with `(A + BF, N_i)` mean-square stable.
    pub gain: Option<DMatrix<f64>>,
    pub closed_loop: Option<SpectralCertificate>,
}

/// Semi-decision for stabilizability of `(A, B, N_i)`: runs the observability
/// Gramian iteration with identity output and certifies the resulting
/// feedback. A failed iteration is reported as a negative answer.
pub fn stabilizability_probe(sys: &StochasticSystem) -> Result<StabilizabilityReport> {
    let n = sys.n();
    let probe = sys.with_c(DMatrix::identity(n, n))?;
    let negative = StabilizabilityReport { stabilizable: false, gain: None, closed_loop: None };
    let q = match solvers::solve_observability_gramian(&probe, &SolverConfig::default()) {
        Ok(out) => out.q,
        Err(Error::Capacity { n, limit }) => return Err(Error::Capacity { n, limit }),
        Err(_) => return Ok(negative),
    };
    let gain = -(sys.b().transpose() * &q);
    let closed = sys.with_a(sys.a() + sys.b() * &gain)?;
    let cert = mean_square_stability(&closed)?;
    Ok(StabilizabilityReport { stabilizable: cert.stable, gain: cert.stable.then_some(gain), closed_loop: Some(cert) })
}

/// Complex eigenvector matrix type re-exported for callers inspecting spectra.
pub type EigenvectorMatrix = CMatrix;

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn random_system(n: usize, q: usize, seed: u64, shift: f64) -> StochasticSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r, c| DMatrix::<f64>::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5);
        let a = g(n, n) - DMatrix::identity(n, n) * shift;
        let ns: Vec<_> = (0..q).map(|_| g(n, n) * 0.5).collect();
        let b = g(n, 2);
        let c = g(1, n);
        let l = g(q, q);
        let k = &l * l.transpose() + DMatrix::identity(q, q) * 0.1;
        StochasticSystem::new(a, ns, b, c, k).unwrap()
    }

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        linalg::symmetrize(&m)
    }

    #[test]
    fn scalar_operator_value() {
        let sys = StochasticSystem::scalar(-1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let x = DMatrix::from_element(1, 1, 1.0);
        assert!((apply_operator(&sys, &x, false).unwrap()[(0, 0)] + 1.0).abs() < 1e-15);
        assert!((apply_operator(&sys, &x, true).unwrap()[(0, 0)] + 1.0).abs() < 1e-15);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(apply_operator(&sys, &zero, false).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn operator_dimension_mismatch() {
        let sys = StochasticSystem::scalar(-1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        assert!(matches!(apply_operator(&sys, &DMatrix::zeros(2, 2), false), Err(Error::Input(_))));
    }

    #[test]
    fn zero_noise_reduces_to_lyapunov_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_system(4, 1, 3, 0.0);
        let sys = StochasticSystem::new(
            base.a().clone(),
            vec![DMatrix::zeros(4, 4)],
            base.b().clone(),
            base.c().clone(),
            base.covariance().clone(),
        )
        .unwrap();
        let x = random_sym(4, &mut rng);
        let expect = sys.a().transpose() * &x + &x * sys.a();
        assert!((apply_operator(&sys, &x, false).unwrap() - expect).norm() < 1e-13);
    }

    #[test]
    fn scalar_matricization() {
        let sys = StochasticSystem::scalar(-1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let m = matricize(&sys, false).unwrap();
        assert_eq!(m.matrix.shape(), (1, 1));
        assert!((m.matrix[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_drift_matricization() {
        let n2 = DMatrix::zeros(2, 2);
        let sys = StochasticSystem::new(
            DMatrix::identity(2, 2),
            vec![n2],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let m = matricize(&sys, false).unwrap();
        assert!((m.matrix - DMatrix::<f64>::identity(4, 4) * 2.0).norm() < 1e-15);
    }

    #[test]
    fn adjoint_matricization_is_transpose() {
        for seed in 0..5 {
            let sys = random_system(3, 2, seed, 0.0);
            let m = matricize(&sys, false).unwrap();
            let ma = matricize(&sys, true).unwrap();
            assert!((m.matrix.transpose() - &ma.matrix).norm() < 1e-13);
            let s = matricize_symmetric(&sys, false).unwrap();
            let sa = matricize_symmetric(&sys, true).unwrap();
            assert!((s.transpose() - sa).norm() < 1e-13);
        }
    }

    #[test]
    fn matricization_budget() {
        let n = MATRICIZE_LIMIT + 1;
        let sys = StochasticSystem::new(
            DMatrix::zeros(n, n),
            vec![],
            DMatrix::zeros(n, 1),
            DMatrix::zeros(1, n),
            DMatrix::zeros(0, 0),
        )
        .unwrap();
        assert!(matches!(matricize(&sys, false), Err(Error::Capacity { .. })));
    }

    #[test]
    fn scalar_stability_examples() {
        let s = StochasticSystem::scalar(-1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let cert = mean_square_stability(&s).unwrap();
        assert!((cert.abscissa + 1.0).abs() < 1e-13 && cert.stable);
        let u = StochasticSystem::scalar(-0.4, 1.0, 0.0, 0.0, 1.0).unwrap();
        let cert = mean_square_stability(&u).unwrap();
        assert!((cert.abscissa - 0.2).abs() < 1e-13 && !cert.stable);
    }

    #[test]
    fn deterministic_abscissa_is_twice_drift_abscissa() {
        for seed in 10..14 {
            let base = random_system(5, 1, seed, 1.5);
            let det = StochasticSystem::new(
                base.a().clone(),
                vec![DMatrix::zeros(5, 5)],
                base.b().clone(),
                base.c().clone(),
                base.covariance().clone(),
            )
            .unwrap();
            let drift = linalg::eigenvalues(det.a()).unwrap();
            let expect = 2.0 * drift.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
            let cert = mean_square_stability(&det).unwrap();
            assert!((cert.abscissa - expect).abs() < 1e-10, "{} vs {}", cert.abscissa, expect);
        }
    }

    #[test]
    fn symmetric_and_full_spectra_share_the_abscissa() {
        for seed in 20..24 {
            let sys = random_system(4, 2, seed, 0.3);
            let full = matricize(&sys, false).unwrap();
            let vals = linalg::eigenvalues(&full.matrix).unwrap();
            let full_abscissa = vals.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
            let cert = mean_square_stability(&sys).unwrap();
            assert!((cert.abscissa - full_abscissa).abs() < 1e-9);
        }
    }

    #[test]
    fn detectability_examples() {
        let s = StochasticSystem::scalar(-1.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(hautus_detectability(&s, HAUTUS_TOL).unwrap().holds);
        let u = StochasticSystem::scalar(1.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let rep = hautus_detectability(&u, HAUTUS_TOL).unwrap();
        assert!(!rep.holds);
        let w = rep.witness.unwrap();
        assert!((w.eigenvalue.re - 2.0).abs() < 1e-12);
        assert!((w.v[(0, 0)] - 1.0).abs() < 1e-12);
        let obs = StochasticSystem::scalar(1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(hautus_detectability(&obs, HAUTUS_TOL).unwrap().holds);
    }

    fn diag_system(c: &[f64]) -> StochasticSystem {
        StochasticSystem::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, c),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn observability_examples() {
        let s = StochasticSystem::scalar(-1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(hautus_observability(&s, HAUTUS_TOL).unwrap().holds);

        let rep = hautus_observability(&diag_system(&[1.0, 0.0]), HAUTUS_TOL).unwrap();
        assert!(!rep.holds);
        let w = rep.witness.unwrap();
        assert!((w.eigenvalue.re + 4.0).abs() < 1e-12);
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((w.v - expect).norm() < 1e-10);
        assert!(hautus_detectability(&diag_system(&[1.0, 0.0]), HAUTUS_TOL).unwrap().holds);

        assert!(hautus_observability(&diag_system(&[1.0, 1.0]), HAUTUS_TOL).unwrap().holds);
    }

    #[test]
    fn degenerate_eigenspace_witness_found() {
        // A = -I₂: every symmetric matrix is an eigenvector for λ = -2, and
        // e₂e₂ᵀ is annihilated by C = [1 0].
        let sys = StochasticSystem::new(
            -DMatrix::<f64>::identity(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let rep = hautus_observability(&sys, HAUTUS_TOL).unwrap();
        assert!(!rep.holds);
        let v = rep.witness.unwrap().v;
        assert!(v[(0, 0)].abs() < 1e-8 && v[(0, 1)].abs() < 1e-8);
    }

    #[test]
    fn stabilizability_examples() {
        let s = StochasticSystem::scalar(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let rep = stabilizability_probe(&s).unwrap();
        assert!(rep.stabilizable);
        let f = rep.gain.unwrap()[(0, 0)];
        assert!((f + 1.0 + 2f64.sqrt()).abs() < 1e-8, "gain {f}");
        assert!(1.0 + f < 0.0);

        let stable = StochasticSystem::scalar(-1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(stabilizability_probe(&stable).unwrap().stabilizable);

        let hopeless = StochasticSystem::scalar(1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(!stabilizability_probe(&hopeless).unwrap().stabilizable);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn adjointness_and_matricization(seed in 0u64..10_000) {
            let sys = random_system(4, 2, seed, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let x = random_sym(4, &mut rng);
            let y = random_sym(4, &mut rng);
            let lhs = (apply_operator(&sys, &x, false).unwrap() * &y).trace();
            let rhs = (&x * apply_operator(&sys, &y, true).unwrap()).trace();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));

            for adjoint in [false, true] {
                let m = matricize(&sys, adjoint).unwrap();
                let direct = apply_operator(&sys, &x, adjoint).unwrap();
                prop_assert!((m.apply(&x) - &direct).norm() <= 1e-12 * direct.norm().max(1.0));
            }
        }

        #[test]
        fn noise_term_is_positive(seed in 0u64..10_000) {
            let sys = random_system(4, 2, seed, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::<f64>::from_fn(4, 3, |_, _| rng.random::<f64>() - 0.5);
            let x = &g * g.transpose();
            let pi = noise_term(&sys, &x, false);
            prop_assert!(linalg::lambda_min(&pi) >= -1e-12 * x.norm());
        }

        #[test]
        fn observable_implies_detectable(seed in 0u64..10_000) {
            let sys = random_system(3, 1, seed, 0.5);
            let obs = hautus_observability(&sys, HAUTUS_TOL).unwrap();
            let det = hautus_detectability(&sys, HAUTUS_TOL).unwrap();
            prop_assert!(!obs.holds || det.holds);
        }
    }
}

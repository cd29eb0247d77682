//! Stabilizing solution `Q ⪰ 0` of
//! `AᵀQ + QA + Π_N(Q) + CᵀC − QBBᵀQ = 0`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::operators::{self, SpectralCertificate};
use crate::system::StochasticSystem;

use super::lyapunov::generalized_lyapunov_unchecked;
use super::riccati::solve_riccati;
use super::SolverConfig;

const WATCHDOG: usize = 5;
const MAX_POLISH: usize = 4;

#[derive(Debug, Clone)]
pub struct ObservabilitySolution {
    pub q: DMatrix<f64>,
    /// Frobenius residual of the stochastic Riccati equation.
    pub residual: f64,
    pub iterations: usize,
    /// Newton steps taken after the fixed point.
    pub polish_steps: usize,
    /// Certificate for `(A − BBᵀQ, N_i)`.
    pub closed_loop: SpectralCertificate,
}

/// `AᵀQ + QA + Π_N(Q) + CᵀC − QBBᵀQ`.
pub fn observability_residual(sys: &StochasticSystem, q: &DMatrix<f64>) -> DMatrix<f64> {
    let qb = q * sys.b();
    let ctc = sys.c().transpose() * sys.c();
    operators::apply_unchecked(sys, q, false) + ctc - &qb * qb.transpose()
}

fn acceptance_scale(sys: &StochasticSystem) -> f64 {
    let s = (sys.c().transpose() * sys.c()).norm();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Newton step: with `A_k = A − BBᵀQ_k`, solve
/// `A_kᵀQ + QA_k + Π_N(Q) + CᵀC + Q_kBBᵀQ_k = 0`.
fn newton_step(sys: &StochasticSystem, q: &DMatrix<f64>, cfg: &SolverConfig) -> Result<DMatrix<f64>> {
    let b = sys.b();
    let qb = q * b;
    let acl = sys.a() - b * qb.transpose();
    let closed = sys.with_a(acl)?;
    let w = sys.c().transpose() * sys.c() + &qb * qb.transpose();
    let inner = SolverConfig { tol: cfg.tol * 1e-3, ..cfg.clone() };
    generalized_lyapunov_unchecked(&closed, &w, &inner)
}

/// Fixed point `Q_{k+1} = ric(A, B, CᵀC + Π_N(Q_k))` from `Q_0 = I`, followed by
/// Newton polishing when the residual is above `10·tol·‖CᵀC‖_F`.
pub fn solve_observability_gramian(sys: &StochasticSystem, cfg: &SolverConfig) -> Result<ObservabilitySolution> {
    cfg.validate()?;
    let n = sys.n();
    let ctc = sys.c().transpose() * sys.c();
    let target = 10.0 * cfg.tol * acceptance_scale(sys);
    let mut q = DMatrix::<f64>::identity(n, n);
    let mut residual = observability_residual(sys, &q).norm();
    let mut growth = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_outer {
        let w = &ctc + operators::noise_term(sys, &q, false);
        let next = solve_riccati(sys.a(), sys.b(), &w)?;
        iterations += 1;
        let change = (&next - &q).norm();
        let scale = q.norm();
        q = next;
        let r = observability_residual(sys, &q).norm();
        if !r.is_finite() {
            return Err(Error::NonConvergence { what: "observability Gramian".into(), iterations, residual: r });
        }
        growth = if r > residual { growth + 1 } else { 0 };
        residual = r;
        if growth >= WATCHDOG {
            return Err(Error::NonConvergence {
                what: "observability Gramian fixed point diverges".into(),
                iterations,
                residual,
            });
        }
        if change <= cfg.tol * scale || residual <= target * 1e-3 {
            converged = true;
            break;
        }
    }
    let mut polish_steps = 0;
    while residual > target && polish_steps < MAX_POLISH {
        let next = match newton_step(sys, &q, cfg) {
            Ok(x) => x,
            Err(_) => break,
        };
        let r = observability_residual(sys, &next).norm();
        polish_steps += 1;
        if !(r < residual) {
            break;
        }
        q = next;
        residual = r;
    }
    if residual > target {
        return Err(Error::NonConvergence {
            what: if converged {
                "observability Gramian residual above tolerance".into()
            } else {
                "observability Gramian fixed point".into()
            },
            iterations,
            residual,
        });
    }
    let acl = sys.a() - sys.b() * (sys.b().transpose() * &q);
    let closed_loop = operators::mean_square_stability(&sys.with_a(acl)?)?;
    if !closed_loop.stable {
        return Err(Error::Certificate(format!(
            "A − BBᵀQ is not mean-square stable (abscissa {:.3e})",
            closed_loop.abscissa
        )));
    }
    Ok(ObservabilitySolution { q, residual, iterations, polish_steps, closed_loop })
}

//! Matrix-equation solvers for the Gramian pair.

pub mod lyapunov;
pub mod observability;
pub mod reachability;
pub mod riccati;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operators::SpectralCertificate;
use crate::system::StochasticSystem;

pub use lyapunov::{solve_generalized_lyapunov, solve_lyapunov, LyapunovKernel};
pub use observability::{observability_residual, solve_observability_gramian, ObservabilitySolution};
pub use reachability::{
    reachability_margin, solve_reachability_gramian, ReachabilitySolution, ReachabilityStrategy,
};
pub use riccati::{riccati_residual, solve_riccati};

#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    /// Relative residual / change tolerance.
    pub tol: f64,
    /// Outer iteration budget of the Gramian fixed points.
    pub max_outer: usize,
    /// Required negativity `f(X) ≤ −lmi_margin` of the reachability LMI.
    pub lmi_margin: f64,
    /// Step budget of the projected subgradient method.
    pub max_subgradient_steps: usize,
    /// After feasibility, push `tr P⁻¹` up by a log-barrier path.
    pub maximize_trace: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_outer: 200,
            lmi_margin: 1e-6,
            max_subgradient_steps: 20_000,
            maximize_trace: true,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::input("tol must be positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::input("max_outer must be at least 1"));
        }
        if !(self.lmi_margin >= 0.0) {
            return Err(Error::input("lmi_margin must be non-negative"));
        }
        Ok(())
    }
}

/// Observability and reachability Gramians with solver diagnostics.
#[derive(Debug, Clone)]
pub struct GramianPair {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_residual: f64,
    pub p_margin: f64,
    pub iterations: usize,
    pub p_iterations: usize,
    pub p_trace_steps: usize,
    pub strategy: ReachabilityStrategy,
    pub closed_loop_certificate: SpectralCertificate,
}

/// Solves for `Q`, then for a feasible `P`.
pub fn compute_gramians(
    sys: &StochasticSystem,
    cfg: &SolverConfig,
    strategy: &ReachabilityStrategy,
) -> Result<GramianPair> {
    let obs = solve_observability_gramian(sys, cfg)?;
    let reach = solve_reachability_gramian(sys, cfg, strategy)?;
    Ok(GramianPair {
        p: reach.p,
        q: obs.q,
        q_residual: obs.residual,
        p_margin: reach.margin,
        iterations: obs.iterations,
        p_iterations: reach.iterations,
        p_trace_steps: reach.trace_steps,
        strategy: strategy.clone(),
        closed_loop_certificate: obs.closed_loop,
    })
}

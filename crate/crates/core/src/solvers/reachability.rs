//! Feasible reachability Gramians `P ≻ 0` with
//! `AᵀP⁻¹ + P⁻¹A + Π_N(P⁻¹) − CᵀC + P⁻¹BBᵀP⁻¹ ⪯ 0`.
//!
//! All strategies work with `X = P⁻¹`. The lifted form of the inequality is
//! the LMI `[L(X) − CᵀC, XB; BᵀX, −I] ⪯ 0` with `L = L_A + Π_N`.

use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::operators;
use crate::system::StochasticSystem;

use super::lyapunov::generalized_lyapunov_unchecked;
use super::observability::solve_observability_gramian;
use super::SolverConfig;

/// Lower eigenvalue clip for `X` in the projected subgradient method.
pub const DELTA: f64 = 1e-8;

/// Acceptance threshold on `λ_max` of the Riccati-type inequality.
pub const MARGIN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReachabilityStrategy {
    SubgradientFeasibility,
    ConstructiveEpsilon,
    /// Exchange directory for an external SDP solver.
    ExternalSdp { dir: PathBuf },
}

impl ReachabilityStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SubgradientFeasibility => "subgradient_feasibility",
            Self::ConstructiveEpsilon => "constructive_epsilon",
            Self::ExternalSdp { .. } => "external_sdp",
        }
    }

    pub fn parse(name: &str, dir: Option<&Path>) -> Result<Self> {
        match name {
            "subgradient_feasibility" => Ok(Self::SubgradientFeasibility),
            "constructive_epsilon" => Ok(Self::ConstructiveEpsilon),
            "external_sdp" => Ok(Self::ExternalSdp {
                dir: dir
                    .map(Path::to_path_buf)
                    .ok_or_else(|| Error::input("external_sdp needs an exchange directory"))?,
            }),
            other => Err(Error::input(format!("unknown reachability strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReachabilitySolution {
    pub p: DMatrix<f64>,
    /// `P⁻¹`.
    pub x: DMatrix<f64>,
    /// `λ_max(L(X) − CᵀC + XBBᵀX)`.
    pub margin: f64,
    /// `λ_max` of the lifted LMI block at `X`.
    pub lmi_value: f64,
    pub iterations: usize,
    /// Newton steps of the trace-ascent phase (0 when disabled).
    pub trace_steps: usize,
}

/// `λ_max(AᵀX + XA + Π_N(X) − CᵀC + XBBᵀX)`.
pub fn reachability_margin(sys: &StochasticSystem, x: &DMatrix<f64>) -> f64 {
    linalg::lambda_max(&inequality(sys, x))
}

fn inequality(sys: &StochasticSystem, x: &DMatrix<f64>) -> DMatrix<f64> {
    let xb = x * sys.b();
    let ctc = sys.c().transpose() * sys.c();
    operators::apply_unchecked(sys, x, false) - ctc + &xb * xb.transpose()
}

/// `[L(X) − CᵀC, XB; BᵀX, −I]`, or just the upper-left block.
fn lmi_block(sys: &StochasticSystem, x: &DMatrix<f64>, lifted: bool) -> DMatrix<f64> {
    let n = sys.n();
    let ctc = sys.c().transpose() * sys.c();
    let top = operators::apply_unchecked(sys, x, false) - ctc;
    if !lifted {
        return top;
    }
    let m = sys.inputs();
    let xb = x * sys.b();
    let mut g = DMatrix::zeros(n + m, n + m);
    g.view_mut((0, 0), (n, n)).copy_from(&top);
    g.view_mut((0, n), (n, m)).copy_from(&xb);
    g.view_mut((n, 0), (m, n)).copy_from(&xb.transpose());
    g.view_mut((n, n), (m, m)).fill_with_identity();
    g.view_mut((n, n), (m, m)).neg_mut();
    g
}

fn top_eigenpair(g: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let e = linalg::SymEig::new(g);
    (e.values[0], e.vectors.column(0).clone_owned())
}

fn clip(x: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let e = linalg::SymEig::new(x);
    let d = DMatrix::from_diagonal(&e.values.map(|v| v.max(delta)));
    linalg::symmetrize(&(&e.vectors * d * e.vectors.transpose()))
}

/// Projected subgradient minimization of `λ_max` of the (lifted) LMI block
/// over `X ⪰ δI`, stopped at `f ≤ −lmi_margin`.
fn subgradient(
    sys: &StochasticSystem,
    x0: DMatrix<f64>,
    lifted: bool,
    cfg: &SolverConfig,
) -> Result<(DMatrix<f64>, f64, usize)> {
    let n = sys.n();
    let target = -2.0 * cfg.lmi_margin.max(f64::EPSILON);
    let mut x = clip(&x0, DELTA);
    let mut best = (x.clone(), f64::INFINITY);
    for step in 0..=cfg.max_subgradient_steps {
        let (f, v) = top_eigenpair(&lmi_block(sys, &x, lifted));
        if f < best.1 {
            best = (x.clone(), f);
        }
        if f <= -cfg.lmi_margin {
            return Ok((x, f, step));
        }
        if step == cfg.max_subgradient_steps {
            break;
        }
        let v1 = v.rows(0, n).clone_owned();
        let mut g = operators::apply_unchecked(sys, &(&v1 * v1.transpose()), true);
        if lifted {
            let w = sys.b() * v.rows(n, sys.inputs());
            g += &v1 * w.transpose() + &w * v1.transpose();
        }
        let gn2 = g.norm_squared();
        if gn2 == 0.0 {
            break;
        }
        let alpha = (f - target) / gn2;
        x = clip(&(&x - g * alpha), DELTA);
    }
    Err(Error::NonConvergence {
        what: "reachability LMI infeasible within the subgradient budget; (Aᵀ, Cᵀ, Nᵀ) may not be stabilizable"
            .into(),
        iterations: cfg.max_subgradient_steps,
        residual: best.1,
    })
}

/// Starting point from a dual stabilizing gain: with `(A + FᵀC, N)` stable,
/// `X₀` solves `(A+FᵀC)ᵀX₀ + X₀(A+FᵀC) + Π_N(X₀) + I = 0`, so that
/// `L(εX₀) − CᵀC + ε²X₀BBᵀX₀ ⪯ −εI + ε²X₀(FᵀF + [lifted]BBᵀ)X₀`.
fn dual_start(sys: &StochasticSystem, lifted: bool, cfg: &SolverConfig) -> Option<DMatrix<f64>> {
    let n = sys.n();
    let dual = sys.dual();
    let probe = dual.with_c(DMatrix::identity(n, n)).ok()?;
    let qt = solve_observability_gramian(&probe, cfg).ok()?.q;
    // Dual gain −C Q̃ on (Aᵀ, Cᵀ) corresponds to Fᵀ = −Q̃Cᵀ here.
    let ft = -(&qt * sys.c().transpose());
    let a_f = sys.a() + &ft * sys.c();
    let closed = sys.with_a(a_f).ok()?;
    let x0 = generalized_lyapunov_unchecked(&closed, &DMatrix::identity(n, n), cfg).ok()?;
    if linalg::lambda_min(&x0) <= 0.0 {
        return None;
    }
    let mut quad = &ft * ft.transpose();
    if lifted {
        quad += sys.b() * sys.b().transpose();
    }
    let curv = linalg::lambda_max(&(&x0 * quad * &x0));
    let eps = if curv > 0.0 { (0.5 / curv).min(1.0) } else { 1.0 };
    Some(x0 * eps)
}

fn start_point(sys: &StochasticSystem, lifted: bool, cfg: &SolverConfig) -> DMatrix<f64> {
    dual_start(sys, lifted, cfg).unwrap_or_else(|| DMatrix::identity(sys.n(), sys.n()) * 1e-3)
}

fn finish(sys: &StochasticSystem, x: DMatrix<f64>, iterations: usize, trace_steps: usize) -> Result<ReachabilitySolution> {
    let x = linalg::symmetrize(&x);
    let chol = Cholesky::new(x.clone()).ok_or_else(|| Error::Certificate("P⁻¹ is not positive definite".into()))?;
    let p = linalg::symmetrize(&chol.inverse());
    let margin = reachability_margin(sys, &x);
    let (lmi_value, _) = top_eigenpair(&lmi_block(sys, &x, true));
    if !(margin <= MARGIN_TOL) {
        return Err(Error::Certificate(format!("reachability inequality violated: λ_max = {margin:.3e}")));
    }
    Ok(ReachabilitySolution { p, x, margin, lmi_value, iterations, trace_steps })
}

/// Computes a feasible reachability Gramian using `strategy`.
pub fn solve_reachability_gramian(
    sys: &StochasticSystem,
    cfg: &SolverConfig,
    strategy: &ReachabilityStrategy,
) -> Result<ReachabilitySolution> {
    cfg.validate()?;
    if sys.n() == 0 {
        return Err(Error::input("empty system"));
    }
    match strategy {
        ReachabilityStrategy::SubgradientFeasibility => {
            let (x, _, steps) = subgradient(sys, start_point(sys, true, cfg), true, cfg)?;
            let (x, trace_steps) = if cfg.maximize_trace { trace_ascent(sys, x, cfg) } else { (x, 0) };
            finish(sys, x, steps, trace_steps)
        }
        ReachabilityStrategy::ConstructiveEpsilon => {
            let (x, _, steps) = subgradient(sys, start_point(sys, false, cfg), false, cfg)?;
            let ctc = sys.c().transpose() * sys.c();
            let y = -(operators::apply_unchecked(sys, &x, false) - ctc);
            let ymin = linalg::lambda_min(&y);
            if !(ymin > 0.0) {
                return Err(Error::Internal(format!("Y is not positive definite (λ_min = {ymin:.3e})")));
            }
            let xb = &x * sys.b();
            let curv = linalg::lambda_max(&(&xb * xb.transpose()));
            let eps = if curv > 0.0 { ((1.0 - 1e-6) * ymin / curv).min(1.0) } else { 1.0 };
            if !(eps > 0.0) {
                return Err(Error::Internal("non-positive ε".into()));
            }
            finish(sys, x * eps, steps, 0)
        }
        ReachabilityStrategy::ExternalSdp { dir } => external(sys, cfg, dir),
    }
}

/// Barrier objective `−t·tr X − log det S − log det X − log det(cI − X)`
/// with `S = −F(X)`. The cap `c` keeps the path bounded when the feasible set
/// is unbounded along weakly reachable directions.
struct Barrier<'a> {
    sys: &'a StochasticSystem,
    bbt: DMatrix<f64>,
    cap: f64,
}

struct BarrierPoint {
    value: f64,
    s_inv: DMatrix<f64>,
    x_inv: DMatrix<f64>,
    cap_inv: DMatrix<f64>,
}

fn logdet_inverse(m: DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let chol = Cholesky::new(m)?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((logdet, linalg::symmetrize(&chol.inverse())))
}

impl Barrier<'_> {
    fn eval(&self, x: &DMatrix<f64>, t: f64) -> Option<BarrierPoint> {
        let s = -inequality(self.sys, x);
        let (ls, s_inv) = logdet_inverse(linalg::symmetrize(&s))?;
        let (lx, x_inv) = logdet_inverse(x.clone())?;
        let n = x.nrows();
        let (lc, cap_inv) = logdet_inverse(DMatrix::identity(n, n) * self.cap - x)?;
        Some(BarrierPoint { value: -t * x.trace() - ls - lx - lc, s_inv, x_inv, cap_inv })
    }

    /// Directional derivative operator `F'(X)[D] = A_XᵀD + DA_X + Π_N(D)`.
    fn closed(&self, x: &DMatrix<f64>) -> StochasticSystem {
        let ax = self.sys.a() + &self.bbt * x;
        self.sys.with_a(ax).expect("dimensions preserved")
    }

    /// Newton direction for the barrier at `x`; returns `(D, decrement²)`.
    fn newton(&self, x: &DMatrix<f64>, pt: &BarrierPoint, t: f64) -> Result<(DMatrix<f64>, f64)> {
        let n = x.nrows();
        let d = linalg::svec_dim(n);
        let lin = self.closed(x);
        let j = operators::matricize_symmetric(&lin, false)?;
        let eye = DMatrix::<f64>::identity(n, n);
        let grad = -linalg::svec(&eye) * t + j.transpose() * linalg::svec(&pt.s_inv) - linalg::svec(&pt.x_inv)
            + linalg::svec(&pt.cap_inv);
        let mut ks = DMatrix::zeros(d, d);
        let mut kx = DMatrix::zeros(d, d);
        for k in 0..d {
            let e = linalg::svec_basis(n, k);
            ks.set_column(k, &linalg::svec(&(&pt.s_inv * &e * &pt.s_inv)));
            let mixed = &pt.s_inv * &e * &self.bbt;
            let quad = &pt.x_inv * &e * &pt.x_inv + &pt.cap_inv * &e * &pt.cap_inv + &mixed + mixed.transpose();
            kx.set_column(k, &linalg::svec(&quad));
        }
        let h = j.transpose() * ks * &j + kx;
        let h = (&h + h.transpose()) * 0.5;
        // Jacobi scaling keeps the factorization usable near the boundary.
        let scale = h.diagonal().map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt());
        let hs = DMatrix::from_fn(d, d, |i, k| h[(i, k)] * scale[i] * scale[k]);
        let chol = Cholesky::new(hs).ok_or_else(|| Error::numerical("barrier Hessian is not positive definite"))?;
        let dir = chol.solve(&-grad.component_mul(&scale)).component_mul(&scale);
        let dec = -grad.dot(&dir);
        Ok((linalg::smat(dir.as_slice(), n), dec))
    }
}

const TRACE_OUTER: usize = 40;
const TRACE_NEWTON: usize = 60;
const TRACE_GAP: f64 = 1e-7;
/// Upper bound on `λ_max(X)` during the ascent, relative to the start.
const TRACE_CAP: f64 = 1e6;

/// Log-barrier path following for `max tr X` subject to the inequality, from
/// a strictly feasible `x`. Returns the iterate with the largest trace among
/// those satisfying the LMI with margin `lmi_margin`; the path stops early
/// when the Newton system becomes numerically singular near the boundary.
fn trace_ascent(sys: &StochasticSystem, x: DMatrix<f64>, cfg: &SolverConfig) -> (DMatrix<f64>, usize) {
    let n = sys.n();
    let cap = TRACE_CAP * linalg::lambda_max(&x).max(1.0);
    let bar = Barrier { sys, bbt: sys.b() * sys.b().transpose(), cap };
    let accept = |x: &DMatrix<f64>| top_eigenpair(&lmi_block(sys, x, true)).0 <= -cfg.lmi_margin;
    let mut best = x.clone();
    let mut x = x;
    let mut steps = 0;
    let mut t = 2.0 * n as f64 / x.trace().abs().max(1.0);
    for _ in 0..TRACE_OUTER {
        let Some(mut pt) = bar.eval(&x, t) else { break };
        for _ in 0..TRACE_NEWTON {
            let Ok((dir, dec)) = bar.newton(&x, &pt, t) else { return (best, steps) };
            steps += 1;
            if dec * 0.5 <= 1e-9 {
                break;
            }
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-12 {
                let cand = linalg::symmetrize(&(&x + &dir * s));
                if let Some(cp) = bar.eval(&cand, t) {
                    if cp.value <= pt.value - 0.25 * s * dec {
                        x = cand;
                        pt = cp;
                        moved = true;
                        if x.trace() > best.trace() && accept(&x) {
                            best = x.clone();
                        }
                        break;
                    }
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if accept(&x) {
            best = x.clone();
        } else {
            break;
        }
        if 2.0 * n as f64 / t <= TRACE_GAP * x.trace().abs().max(1.0) {
            break;
        }
        t *= 8.0;
    }
    (best, steps)
}

/// JSON manifest describing the LMI handed to an external SDP solver.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SdpManifest {
    pub kind: String,
    pub variable: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub blocks: Vec<usize>,
    pub objective: String,
    pub constraint: String,
    pub margin: f64,
    pub a: String,
    pub b: String,
    pub c: String,
    pub noise: Vec<String>,
    pub k: Vec<Vec<f64>>,
    pub response: String,
}

pub const SDP_MANIFEST: &str = "lmi.json";
pub const SDP_RESPONSE: &str = "Pinv.mtx";

fn external(sys: &StochasticSystem, cfg: &SolverConfig, dir: &Path) -> Result<ReachabilitySolution> {
    let response = dir.join(SDP_RESPONSE);
    if response.exists() {
        let x = io::read_mtx(&response)?;
        if x.shape() != (sys.n(), sys.n()) {
            return Err(Error::input(format!("{} has the wrong shape", response.display())));
        }
        if linalg::asymmetry(&x) > 1e-8 {
            return Err(Error::input("external P⁻¹ is not symmetric"));
        }
        return finish(sys, x, 0, 0);
    }
    std::fs::create_dir_all(dir)?;
    let noise: Vec<String> = (1..=sys.channels()).map(|i| format!("N{i}.mtx")).collect();
    io::write_mtx(&dir.join("A.mtx"), sys.a())?;
    io::write_mtx(&dir.join("B.mtx"), sys.b())?;
    io::write_mtx(&dir.join("C.mtx"), sys.c())?;
    for (name, m) in noise.iter().zip(sys.noise()) {
        io::write_mtx(&dir.join(name), m)?;
    }
    let k = sys.covariance();
    let manifest = SdpManifest {
        kind: "lmi".into(),
        variable: "X".into(),
        n: sys.n(),
        m: sys.inputs(),
        p: sys.outputs(),
        q: sys.channels(),
        blocks: vec![sys.n(), sys.inputs()],
        objective: "maximize trace(X)".into(),
        constraint: "[[A^T X + X A + sum_ij k_ij N_i^T X N_j - C^T C, X B], [B^T X, -I]] <= -margin*I, X >= 0"
            .into(),
        margin: cfg.lmi_margin,
        a: "A.mtx".into(),
        b: "B.mtx".into(),
        c: "C.mtx".into(),
        noise,
        k: (0..k.nrows()).map(|i| k.row(i).iter().copied().collect()).collect(),
        response: SDP_RESPONSE.into(),
    };
    io::write_json(&dir.join(SDP_MANIFEST), &manifest)?;
    Err(Error::AwaitingExternal(dir.display().to_string()))
}

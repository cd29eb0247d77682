//! Error bounds for the reduced model, energy estimates for the Gramians and
//! certificates for the properties preserved by truncation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::balancing::{self, BalancedRealization, ReducedModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::{self, SpectralCertificate, HAUTUS_TOL};
use crate::simulate::{self, ControlSpec, InitialState, InputSignal, MomentStepper, SimulationConfig};
use crate::system::StochasticSystem;

/// Relative tolerance for the feedback energy identity.
pub const ENERGY_IDENTITY_TOL: f64 = 5e-3;

/// Relative quadrature slack for the inequalities checked on a time grid.
pub const QUADRATURE_TOL: f64 = 1e-4;

/// Relative tolerance for the type-II inequality margins.
pub const TYPE_II_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

impl Horizon {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Horizon::Finite(t) => Some(t),
            Horizon::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMethod {
    WorstCase,
    OperatorNorm,
}

impl GammaMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "worst_case" => Ok(GammaMethod::WorstCase),
            "operator_norm" => Ok(GammaMethod::OperatorNorm),
            other => Err(Error::input(format!("unknown gamma method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GammaEstimate {
    pub value: f64,
    pub method: GammaMethod,
    /// Time step of the discretized input-output map.
    pub step: Option<f64>,
    pub iterations: usize,
    /// Horizon actually used (the config horizon truncates `T = ∞`).
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBoundReport {
    pub r: usize,
    pub n: usize,
    pub tail_coefficient: f64,
    pub hat_sigma: Vec<f64>,
    pub plain_tail: f64,
    pub beta: f64,
    pub gamma_t: Option<GammaEstimate>,
    pub b_r: f64,
    pub b: f64,
    /// `null` stands for an infinite horizon.
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
}

/// `‖BᵀQ^{1/2}‖₂²`.
pub fn b_constant(sys: &StochasticSystem, q: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(&(sys.b().transpose() * linalg::psd_sqrt(q))).powi(2)
}

/// `‖CP^{1/2}‖₂²`.
pub fn c_constant(sys: &StochasticSystem, p: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(&(sys.c() * linalg::psd_sqrt(p))).powi(2)
}

pub fn beta(sys: &StochasticSystem, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    b_constant(sys, q).max(c_constant(sys, p))
}

/// `‖B_rᵀΣ_r^{1/2}‖₂²`.
pub fn b_reduced(reduced: &ReducedModel) -> f64 {
    let half = DMatrix::from_diagonal(&DVector::from_iterator(reduced.r, reduced.sigma_r.iter().map(|s| s.sqrt())));
    linalg::spectral_norm(&(reduced.system.b().transpose() * half)).powi(2)
}

fn check_order(sigma: &[f64], r: usize) -> Result<()> {
    if r > sigma.len() {
        return Err(Error::input(format!("order {r} exceeds the {} singular values", sigma.len())));
    }
    if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::input("singular values must be finite and non-negative"));
    }
    Ok(())
}

fn check_energy(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::input(format!("{name} must be a finite non-negative number, got {v}")));
    }
    Ok(())
}

/// `2·Σ_{k>r} σ_k`.
pub fn plain_tail(sigma: &[f64], r: usize) -> f64 {
    2.0 * sigma[r.min(sigma.len())..].iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundContext {
    /// `J_T(0,u)` and `E[x(T)ᵀQx(T)]`.
    Finite { j_t: f64, terminal: f64 },
    /// `‖(u, y)‖_{L²}`.
    Infinite { pair_norm: f64 },
}

/// Error bound on `‖(u − u_r, y − y_r)‖` for zero initial states.
pub fn apriori_bound(sigma: &[f64], r: usize, context: BoundContext) -> Result<f64> {
    check_order(sigma, r)?;
    let tail = balancing::tail_coefficient(sigma, r);
    match context {
        BoundContext::Finite { j_t, terminal } => {
            check_energy("J_T", j_t)?;
            check_energy("terminal energy", terminal)?;
            Ok(tail * (j_t + terminal).sqrt())
        }
        BoundContext::Infinite { pair_norm } => {
            check_energy("‖(u, y)‖", pair_norm)?;
            Ok(tail * pair_norm)
        }
    }
}

/// Bound for the feedback `u = −BᵀQx + u¹`.
pub fn feedback_bound(sigma: &[f64], r: usize, norm_u1: f64) -> Result<f64> {
    check_order(sigma, r)?;
    check_energy("‖u¹‖", norm_u1)?;
    Ok(balancing::tail_coefficient(sigma, r) * norm_u1)
}

/// Open-loop output error bound `(1 + γ_T)·apriori`.
pub fn open_loop_bound(sigma: &[f64], r: usize, gamma: f64, context: BoundContext) -> Result<f64> {
    check_energy("γ_T", gamma)?;
    Ok((1.0 + gamma) * apriori_bound(sigma, r, context)?)
}

/// `2·(Σ_{k>r} σ_k)·‖e^{−β·/2}u‖`; the weight `e^{−βt}` is applied by the caller
/// to both the output error and the input.
pub fn weighted_bound(sigma: &[f64], r: usize, beta: f64, weighted_input_norm: f64) -> Result<f64> {
    check_order(sigma, r)?;
    check_energy("β", beta)?;
    check_energy("weighted input norm", weighted_input_norm)?;
    Ok(plain_tail(sigma, r) * weighted_input_norm)
}

/// Implicit midpoint maps for the moment dynamics with `X` in `svec`
/// coordinates; linear in `(m, x)`, which the adjoint recursions below need.
#[derive(Debug, Clone)]
struct MidpointMaps {
    h: f64,
    n: usize,
    /// `(I − h/2·A_cl)⁻¹(I + h/2·A_cl)`.
    mean_map: DMatrix<f64>,
    /// `(I − h/2·A_cl)⁻¹·h·B`.
    mean_input: DMatrix<f64>,
    /// `(I − h/2·𝓜)⁻¹(I + h/2·𝓜)`.
    phi: DMatrix<f64>,
    /// `(I − h/2·𝓜)⁻¹·h`.
    psi: DMatrix<f64>,
}

impl MidpointMaps {
    /// `sys` carries the closed-loop drift already.
    fn new(sys: &StochasticSystem, h: f64) -> Result<Self> {
        let n = sys.n();
        let eye = DMatrix::<f64>::identity(n, n);
        let lhs = &eye - sys.a() * (0.5 * h);
        let lhs_inv = linalg::inverse(&lhs).map_err(|_| Error::StepSize(format!("I − (h/2)A singular at h = {h}")))?;
        let mean_map = &lhs_inv * (&eye + sys.a() * (0.5 * h));
        let mean_input = &lhs_inv * sys.b() * h;
        let op = operators::matricize_symmetric(sys, true)?;
        let d = op.nrows();
        let eye_d = DMatrix::<f64>::identity(d, d);
        let inv = linalg::inverse(&(&eye_d - &op * (0.5 * h)))
            .map_err(|_| Error::StepSize(format!("implicit moment map singular at h = {h}")))?;
        let phi = &inv * 2.0 - &eye_d;
        let psi = inv * h;
        Ok(Self { h, n, mean_map, mean_input, phi, psi })
    }

    /// Advances `(m, x)` by one step with midpoint input `u`.
    #[cfg(test)]
    fn step(&self, b: &DMatrix<f64>, m: &mut DVector<f64>, x: &mut DVector<f64>, u: &DVector<f64>) {
        let next = &self.mean_map * &*m + &self.mean_input * u;
        let mid = (&*m + &next) * 0.5;
        let bu = b * u;
        let forcing = &bu * mid.transpose() + &mid * bu.transpose();
        let g = linalg::svec(&forcing);
        let mut xn = &self.phi * &*x;
        xn.gemv(1.0, &self.psi, &g, 1.0);
        *m = next;
        *x = xn;
    }
}

/// Discretized quadratic form `u ↦ ∫₀ᵀ E‖y_r‖²dt` of the reduced moment
/// dynamics with piecewise-constant inputs `u_j` on each step.
pub(crate) struct ReducedIoMap {
    stepper: MidpointMaps,
    /// `Λ_j B_r`, with `J(u) = 2 Σ_j mid_jᵀ Λ_j B_r u_j`.
    k: Vec<DMatrix<f64>>,
    steps: usize,
    m: usize,
}

impl ReducedIoMap {
    pub(crate) fn new(sys: &StochasticSystem, t: f64, dt: f64) -> Result<Self> {
        let steps = ((t / dt).round() as usize).max(1);
        let h = t / steps as f64;
        let stepper = MidpointMaps::new(sys, h)?;
        let c = linalg::svec(&(sys.c().transpose() * sys.c()));
        let phi_t = stepper.phi.transpose();
        let psi_t = stepper.psi.transpose();
        let weight = |k: usize| if k == steps { 0.5 * h } else { h };
        let mut k = vec![DMatrix::zeros(sys.n(), sys.inputs()); steps];
        let mut mu = &c * weight(steps);
        for j in (0..steps).rev() {
            if j + 1 < steps {
                mu = &phi_t * &mu + &c * weight(j + 1);
            }
            let lambda = linalg::smat((&psi_t * &mu).as_slice(), sys.n());
            k[j] = lambda * sys.b();
        }
        Ok(Self { stepper, k, steps, m: sys.inputs() })
    }

    fn h(&self) -> f64 {
        self.stepper.h
    }

    fn means(&self, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut m = DVector::zeros(self.stepper.n);
        let mut mids = Vec::with_capacity(self.steps);
        for uj in u {
            let next = &self.stepper.mean_map * &m + &self.stepper.mean_input * uj;
            mids.push((&m + &next) * 0.5);
            m = next;
        }
        mids
    }

    /// `J(u) = uᵀ G u`.
    #[cfg(test)]
    pub(crate) fn energy(&self, u: &[DVector<f64>]) -> f64 {
        let mids = self.means(u);
        2.0 * mids.iter().zip(&self.k).zip(u).map(|((mid, k), uj)| mid.dot(&(k * uj))).sum::<f64>()
    }

    /// `G u` (half the gradient of `J`).
    pub(crate) fn apply(&self, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mids = self.means(u);
        let mut out: Vec<DVector<f64>> = self.k.iter().zip(&mids).map(|(k, mid)| k.transpose() * mid).collect();
        let a: Vec<DVector<f64>> = self.k.iter().zip(u).map(|(k, uj)| k * uj).collect();
        let map_t = self.stepper.mean_map.transpose();
        let input_t = self.stepper.mean_input.transpose();
        let s = |k: usize| -> DVector<f64> {
            let cur = if k < self.steps { a[k].clone() } else { DVector::zeros(self.stepper.n) };
            let prev = if k > 0 { a[k - 1].clone() } else { DVector::zeros(self.stepper.n) };
            (cur + prev) * 0.5
        };
        let mut rho = s(self.steps);
        for i in (0..self.steps).rev() {
            if i + 1 < self.steps {
                rho = s(i + 1) + &map_t * &rho;
            }
            out[i] += &input_t * &rho;
        }
        out
    }

    /// Largest `J(u)/‖u‖²_{L²}` by power iteration.
    pub(crate) fn gain(&self, max_iter: usize, tol: f64) -> (f64, usize) {
        let norm = |u: &[DVector<f64>]| u.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        let mut u: Vec<DVector<f64>> = (0..self.steps)
            .map(|j| DVector::from_element(self.m, 1.0 + 0.5 * ((j as f64 * 0.37).sin())))
            .collect();
        let s = norm(&u);
        u.iter_mut().for_each(|v| *v /= s);
        let mut lambda = 0.0;
        for it in 1..=max_iter {
            let g = self.apply(&u);
            let next_lambda: f64 = u.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
            let gn = norm(&g);
            if gn == 0.0 {
                return (0.0, it);
            }
            u = g.into_iter().map(|v| v / gn).collect();
            if (next_lambda - lambda).abs() <= tol * next_lambda.abs() {
                return (next_lambda / self.h(), it);
            }
            lambda = next_lambda;
        }
        (lambda / self.h(), max_iter)
    }
}

/// `γ_T` such that `‖y_r(·,0,u_r)‖_{L²_T} ≤ γ_T ‖u_r‖_{L²_T}`.
pub fn gamma_t(reduced: &ReducedModel, horizon: Horizon, method: GammaMethod, cfg: &SimulationConfig) -> Result<GammaEstimate> {
    let b_r = b_reduced(reduced);
    match (method, horizon) {
        (GammaMethod::WorstCase, Horizon::Finite(t)) => {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::input(format!("horizon must be positive, got {t}")));
            }
            Ok(GammaEstimate { value: (b_r * t).exp(), method, step: None, iterations: 0, horizon: t })
        }
        (GammaMethod::WorstCase, Horizon::Infinite) => {
            Err(Error::Unsupported("the worst-case γ_T needs a finite horizon".into()))
        }
        (GammaMethod::OperatorNorm, h) => {
            cfg.validate()?;
            let t = match h {
                Horizon::Finite(t) => t,
                Horizon::Infinite => {
                    let cert = operators::mean_square_stability(&reduced.system)?;
                    if !cert.stable {
                        return Err(Error::Unsupported(format!(
                            "reduced model is not mean-square stable (abscissa {:.3e}); γ_∞ is undefined",
                            cert.abscissa
                        )));
                    }
                    cfg.t_end
                }
            };
            let map = ReducedIoMap::new(&reduced.system, t, cfg.dt)?;
            let (lambda, iterations) = map.gain(500, 1e-10);
            Ok(GammaEstimate {
                value: lambda.max(0.0).sqrt(),
                method,
                step: Some(map.h()),
                iterations,
                horizon: t,
            })
        }
    }
}

/// Report with all constants of the a-priori, open-loop and weighted bounds.
pub fn error_bound_report(
    sys: &StochasticSystem,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    sigma: &[f64],
    reduced: &ReducedModel,
    horizon: Horizon,
    gamma: Option<GammaEstimate>,
) -> Result<ErrorBoundReport> {
    check_order(sigma, reduced.r)?;
    let r = reduced.r;
    Ok(ErrorBoundReport {
        r,
        n: sigma.len(),
        tail_coefficient: balancing::tail_coefficient(sigma, r),
        hat_sigma: sigma.iter().map(|&s| balancing::hat(s)).collect(),
        plain_tail: plain_tail(sigma, r),
        beta: beta(sys, p, q),
        gamma_t: gamma,
        b_r: b_reduced(reduced),
        b: b_constant(sys, q),
        horizon: horizon.value(),
    })
}

/// Symmetric eigenpairs in descending order.
pub fn eigenpairs(m: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let e = linalg::SymEig::new(m);
    let values = e.values.iter().copied().collect();
    let vectors = e.vectors.column_iter().map(|c| c.into_owned()).collect();
    (values, vectors)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachabilityEstimate {
    /// `sup_t E⟨x(t), p_i⟩²`.
    pub lhs: f64,
    pub lambda_p: f64,
    pub j_t: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeedbackEnergy {
    /// `J_∞(q_i, −BᵀQx)` on the integration horizon.
    pub j_inf: f64,
    pub lambda_q: f64,
    pub relative_gap: f64,
    pub horizon: f64,
    /// Final over initial `tr X`.
    pub decay: f64,
    pub holds: bool,
    pub equality: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightedOutputEnergy {
    /// `∫₀ᵀ e^{−bs} E‖y(s, q_i, 0)‖² ds`.
    pub lhs: f64,
    pub lambda_q: f64,
    pub b: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub index: usize,
    pub reachability: ReachabilityEstimate,
    pub feedback: FeedbackEnergy,
    pub weighted_output: WeightedOutputEnergy,
}

/// Decay target for the feedback energy horizon.
/// Stop the feedback energy integration once `tr X(t) ≤ DECAY · tr X(0)`.
pub const DECAY: f64 = 1e-14;

/// Energy estimates for the `i`-th (0-based, descending) eigenpairs of `P` and
/// `Q`: (a) with `x₀ = 0` and the test input on `[0, T]`; (b) from `x₀ = q_i`
/// under `u = −BᵀQx` until `tr X` decays below `1e-10·tr X(0)` or `cfg.t_end`;
/// (c) weighted open-loop output energy from `x₀ = q_i` on `[0, T]`.
pub fn energy_estimate_check(
    sys: &StochasticSystem,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    i: usize,
    t: f64,
    cfg: &SimulationConfig,
    input: &InputSignal,
) -> Result<EnergyReport> {
    let n = sys.n();
    if i >= n {
        return Err(Error::input(format!("eigen index {i} out of range for n = {n}")));
    }
    if p.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::input("Gramian dimensions do not match the system"));
    }
    let (lp, vp) = eigenpairs(p);
    let (lq, vq) = eigenpairs(q);
    let finite = SimulationConfig { t_end: t, record_every: 1, ..cfg.clone() };

    let traj = simulate::propagate_moments(
        sys,
        &ControlSpec::OpenLoop(input.clone()),
        &SimulationConfig { x0: InitialState::Zero, ..finite.clone() },
    )?;
    let pi = &vp[i];
    let lhs = traj.second.iter().map(|x| (pi.transpose() * x * pi)[0]).fold(0.0, f64::max);
    let j_t = simulate::cost_functional(&traj);
    let reachability = ReachabilityEstimate {
        lhs,
        lambda_p: lp[i],
        j_t,
        holds: lhs <= lp[i] * j_t * (1.0 + QUADRATURE_TOL) + 1e-14,
    };

    let feedback = feedback_energy(sys, q, &vq[i], lq[i], cfg)?;

    let b = b_constant(sys, q);
    let open = simulate::propagate_moments(
        sys,
        &ControlSpec::Zero,
        &SimulationConfig { x0: InitialState::Fixed(vq[i].clone()), record_every: usize::MAX, ..finite },
    )?;
    let w = simulate::weighted_trapezoid(&open.t, &open.output_energy, b);
    let weighted_output = WeightedOutputEnergy { lhs: w, lambda_q: lq[i], b, holds: w <= lq[i] * (1.0 + QUADRATURE_TOL) + 1e-14 };

    Ok(EnergyReport { index: i, reachability, feedback, weighted_output })
}

fn feedback_energy(
    sys: &StochasticSystem,
    q: &DMatrix<f64>,
    qi: &DVector<f64>,
    lambda: f64,
    cfg: &SimulationConfig,
) -> Result<FeedbackEnergy> {
    cfg.validate()?;
    let n = sys.n();
    let kq = sys.b().transpose() * q;
    let closed = sys.with_a(sys.a() - sys.b() * &kq)?;
    let h = cfg.dt;
    let stepper = MomentStepper::new(&closed, h)?;
    let w = sys.c().transpose() * sys.c() + kq.transpose() * &kq;
    let mut m = qi.clone();
    let mut c = DMatrix::zeros(n, n);
    let zero = DVector::zeros(sys.inputs());
    let start = qi.norm_squared();
    let max_steps = ((cfg.t_end / h).ceil() as usize).max(1);
    let energy = |m: &DVector<f64>, c: &DMatrix<f64>| w.dot(c) + (m.transpose() * &w * m)[0];
    let mut prev = energy(&m, &c);
    let mut j = 0.0;
    let mut steps = 0;
    let mut decay = 1.0;
    while steps < max_steps {
        stepper.step(&mut m, &mut c, &zero);
        steps += 1;
        let e = energy(&m, &c);
        if !e.is_finite() {
            return Err(Error::numerical("closed-loop moment propagation diverged"));
        }
        j += 0.5 * h * (prev + e);
        prev = e;
        decay = (c.trace() + m.norm_squared()) / start;
        if decay <= DECAY {
            break;
        }
    }
    let psd = simulate::psd_ratio(&simulate::second_moment(&m, &c));
    if psd < -simulate::PSD_TOL {
        return Err(Error::StepSize(format!("closed-loop second moment lost definiteness (ratio {psd:.3e})")));
    }
    let gap = if lambda != 0.0 { (j - lambda).abs() / lambda.abs() } else { j.abs() };
    Ok(FeedbackEnergy {
        j_inf: j,
        lambda_q: lambda,
        relative_gap: gap,
        horizon: steps as f64 * h,
        decay,
        holds: j <= lambda * (1.0 + ENERGY_IDENTITY_TOL) + 1e-14,
        equality: gap <= ENERGY_IDENTITY_TOL,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PreservationCertificate {
    /// `(A_r − B_rB_rᵀΣ_r, N_{i,r})`.
    pub reduced_closed_loop: SpectralCertificate,
    pub reduced_detectable: bool,
    /// `λ_max` of the residuals of the closed-loop inequalities for `Σ_n` and
    /// for `Υ_n⁻¹ = Σ_n + Σ_n⁻¹`, both expected `≤ 0`.
    pub typeii_margins: (f64, f64),
    pub typeii_scales: (f64, f64),
    pub typeii_holds: bool,
    pub passed: bool,
}

/// Closed-loop stability and detectability of the reduced model and the two
/// type-II inequalities of the balanced closed loop `A_n − B_nB_nᵀΣ_n`.
pub fn preservation_certificates(bal: &BalancedRealization, reduced: &ReducedModel) -> Result<PreservationCertificate> {
    let red = &reduced.system;
    let sig_r = reduced.sigma_matrix();
    let acl_r = red.a() - red.b() * (red.b().transpose() * &sig_r);
    let reduced_closed_loop = operators::mean_square_stability(&red.with_a(acl_r)?)?;
    let reduced_detectable = operators::hautus_detectability(red, HAUTUS_TOL)?.holds;

    let full = &bal.system;
    let n = full.n();
    let sig = DMatrix::from_diagonal(&DVector::from_vec(bal.sigma.clone()));
    let sig_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, bal.sigma.iter().map(|s| 1.0 / s)));
    let b = full.b();
    let closed = full.with_a(full.a() - b * (b.transpose() * &sig))?;

    let ctc = full.c().transpose() * full.c();
    let sb = &sig * b;
    let sbbs = &sb * sb.transpose();
    let first = operators::apply_operator(&closed, &sig, false)? + &ctc + &sbbs;
    let scale1 = 1f64.max(linalg::spectral_norm(&ctc) + linalg::spectral_norm(&sbbs));

    let ups_inv = &sig + &sig_inv;
    let ub = &ups_inv * b;
    let ubbu = &ub * ub.transpose();
    let second = operators::apply_operator(&closed, &ups_inv, false)? + &ubbu;
    let scale2 = 1f64.max(linalg::spectral_norm(&ubbu));

    let margins = (linalg::lambda_max(&first), linalg::lambda_max(&second));
    let typeii_holds = margins.0 <= TYPE_II_TOL * scale1 && margins.1 <= TYPE_II_TOL * scale2;
    Ok(PreservationCertificate {
        reduced_closed_loop,
        reduced_detectable,
        typeii_margins: margins,
        typeii_scales: (scale1, scale2),
        typeii_holds,
        passed: reduced_closed_loop.stable && reduced_detectable && typeii_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{compute_gramians, ReachabilityStrategy, SolverConfig};
    use proptest::prelude::*;

    fn small_system() -> StochasticSystem {
        StochasticSystem::with_unit_noise(
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.0, -0.2, -2.0, 0.3, 0.1, 0.0, -0.7]),
            DMatrix::from_row_slice(3, 3, &[0.2, 0.1, 0.0, 0.0, 0.3, 0.1, 0.1, 0.0, 0.2]),
            DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -0.3]),
            DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.5]),
        )
        .unwrap()
    }

    fn reduced_pair(r: usize) -> (StochasticSystem, crate::solvers::GramianPair, BalancedRealization, ReducedModel) {
        let sys = small_system();
        let pair = compute_gramians(&sys, &SolverConfig::default(), &ReachabilityStrategy::SubgradientFeasibility).unwrap();
        let bal = balancing::balance(&sys, &pair.p, &pair.q).unwrap();
        let red = balancing::truncate(&bal, r).unwrap();
        (sys, pair, bal, red)
    }

    #[test]
    fn apriori_examples() {
        let sigma = [1.0, 0.5, 1e-3, 1e-4];
        assert_eq!(apriori_bound(&sigma, 4, BoundContext::Infinite { pair_norm: 1.0 }).unwrap(), 0.0);
        let v = apriori_bound(&sigma, 2, BoundContext::Finite { j_t: 0.75, terminal: 0.25 }).unwrap();
        let expect = 2.0 * (1e-3 / (1.0f64 + 1e-6).sqrt() + 1e-4 / (1.0f64 + 1e-8).sqrt());
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 2.2e-3).abs() < 1e-8);
        assert!(apriori_bound(&sigma, 2, BoundContext::Finite { j_t: -1.0, terminal: 0.0 }).is_err());
        assert!(apriori_bound(&sigma, 2, BoundContext::Infinite { pair_norm: f64::NAN }).is_err());
    }

    #[test]
    fn feedback_examples() {
        let sigma = [1.0, 0.5, 1e-3];
        assert_eq!(feedback_bound(&sigma, 1, 0.0).unwrap(), 0.0);
        let tail = balancing::tail_coefficient(&sigma, 1);
        assert!((feedback_bound(&sigma, 1, 3.0).unwrap() - 3.0 * tail).abs() < 1e-15);
        let finite = apriori_bound(&sigma, 1, BoundContext::Finite { j_t: 6.0, terminal: 3.0 }).unwrap();
        assert!((finite - feedback_bound(&sigma, 1, 3.0).unwrap()).abs() < 1e-14);
        // Synthetic tail 0.002: a single tail value solving 2σ/√(1+σ²) = 0.002.
        let s = 0.001 / (1.0f64 - 1e-6).sqrt();
        assert!((feedback_bound(&[1.0, s], 1, 3.0).unwrap() - 0.006).abs() < 1e-15);
    }

    #[test]
    fn open_loop_and_weighted_examples() {
        let sigma = [1.0, 0.1, 0.05];
        let ctx = BoundContext::Infinite { pair_norm: 1.0 };
        let a = apriori_bound(&sigma, 1, ctx).unwrap();
        assert_eq!(open_loop_bound(&sigma, 1, 0.0, ctx).unwrap(), a);
        assert!((open_loop_bound(&sigma, 1, 2.0, ctx).unwrap() - 3.0 * a).abs() < 1e-15);
        assert!(open_loop_bound(&sigma, 1, 1.0, ctx).unwrap() < open_loop_bound(&sigma, 1, 1.5, ctx).unwrap());
        assert_eq!(weighted_bound(&sigma, 3, 0.5, 1.0).unwrap(), 0.0);
        assert!((weighted_bound(&sigma, 1, 0.5, 1.0).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn worst_case_gamma_examples() {
        let (_, _, _, red) = reduced_pair(2);
        let cfg = SimulationConfig::default();
        let b_r = b_reduced(&red);
        let g = gamma_t(&red, Horizon::Finite(2.0), GammaMethod::WorstCase, &cfg).unwrap();
        assert!((g.value - (2.0 * b_r).exp()).abs() < 1e-12);
        assert!(gamma_t(&red, Horizon::Infinite, GammaMethod::WorstCase, &cfg).is_err());

        let zero_b = StochasticSystem::with_unit_noise(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let model = ReducedModel {
            system: zero_b,
            sigma_r: vec![1.0],
            v: DMatrix::identity(1, 1),
            w: DMatrix::identity(1, 1),
            r: 1,
        };
        assert_eq!(gamma_t(&model, Horizon::Finite(3.0), GammaMethod::WorstCase, &cfg).unwrap().value, 1.0);
        assert!((b_reduced(&model)).abs() < 1e-300);
    }

    #[test]
    fn io_map_quadratic_form_matches_forward_moments() {
        let sys = small_system();
        let map = ReducedIoMap::new(&sys, 1.0, 0.05).unwrap();
        let u: Vec<DVector<f64>> = (0..20).map(|j| DVector::from_element(1, (j as f64 * 0.7).cos())).collect();
        let v: Vec<DVector<f64>> = (0..20).map(|j| DVector::from_element(1, (j as f64 * 0.3).sin() + 0.2)).collect();
        let h = map.h();
        let mut m = DVector::zeros(3);
        let mut x = DVector::zeros(6);
        let c = linalg::svec(&(sys.c().transpose() * sys.c()));
        let mut forward = 0.0;
        let mut prev = 0.0;
        for uj in &u {
            map.stepper.step(sys.b(), &mut m, &mut x, uj);
            let e = c.dot(&x);
            forward += 0.5 * h * (prev + e);
            prev = e;
        }
        let via_form = map.energy(&u);
        assert!((forward - via_form).abs() < 1e-12 * forward.abs().max(1.0));
        let gu = map.apply(&u);
        let quad: f64 = u.iter().zip(&gu).map(|(a, b)| a.dot(b)).sum();
        assert!((quad - via_form).abs() < 1e-12 * via_form.abs().max(1.0));
        let gv = map.apply(&v);
        let uv: f64 = u.iter().zip(&gv).map(|(a, b)| a.dot(b)).sum();
        let vu: f64 = v.iter().zip(&gu).map(|(a, b)| a.dot(b)).sum();
        assert!((uv - vu).abs() < 1e-12 * uv.abs().max(1.0));
    }

    #[test]
    fn operator_norm_of_deterministic_scalar_is_hinf_norm() {
        // ẋ = −x + u, y = x: the L² gain is 1, approached for long horizons.
        let sys = StochasticSystem::scalar(-1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let model = ReducedModel { system: sys, sigma_r: vec![1.0], v: DMatrix::identity(1, 1), w: DMatrix::identity(1, 1), r: 1 };
        let cfg = SimulationConfig { t_end: 200.0, dt: 0.05, ..Default::default() };
        let g = gamma_t(&model, Horizon::Infinite, GammaMethod::OperatorNorm, &cfg).unwrap();
        assert!(g.value < 1.0 + 1e-6 && g.value > 0.99, "γ = {}", g.value);
        assert_eq!(g.step, Some(0.05));
    }

    #[test]
    fn operator_norm_below_worst_case() {
        let (_, _, _, red) = reduced_pair(2);
        let cfg = SimulationConfig { dt: 0.01, ..Default::default() };
        let t = 3.0;
        let op = gamma_t(&red, Horizon::Finite(t), GammaMethod::OperatorNorm, &cfg).unwrap();
        let wc = gamma_t(&red, Horizon::Finite(t), GammaMethod::WorstCase, &cfg).unwrap();
        assert!(op.value <= wc.value);
        assert!(op.value > 0.0);
    }

    #[test]
    fn report_constants_recompute() {
        let (sys, pair, bal, red) = reduced_pair(2);
        let rep = error_bound_report(&sys, &pair.p, &pair.q, &bal.sigma, &red, Horizon::Finite(1.0), None).unwrap();
        assert!(rep.tail_coefficient <= rep.plain_tail);
        assert!(rep.hat_sigma.iter().all(|&h| h < 1.0));
        let b = linalg::lambda_max(&(sys.b().transpose() * &pair.q * sys.b()));
        let c = linalg::lambda_max(&(sys.c() * &pair.p * sys.c().transpose()));
        assert!((rep.beta - b.max(c)).abs() < 1e-12 * rep.beta.max(1.0));
        assert!((rep.b - b).abs() < 1e-12 * b.max(1.0));
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json.get("T").is_some() && json.get("gamma_t").is_some());
    }

    #[test]
    fn energy_estimates_hold_on_small_system() {
        let (sys, pair, _, _) = reduced_pair(3);
        let cfg = SimulationConfig { t_end: 200.0, dt: 0.01, ..Default::default() };
        let input = InputSignal::broadcast(1, |t| (5.0 * t).cos() / (t + 1.0));
        for i in [0, 2] {
            let rep = energy_estimate_check(&sys, &pair.p, &pair.q, i, 5.0, &cfg, &input).unwrap();
            assert!(rep.reachability.holds, "{rep:?}");
            assert!(rep.weighted_output.holds, "{rep:?}");
            assert!(rep.feedback.holds && rep.feedback.equality, "{rep:?}");
            assert!(rep.feedback.decay <= 1e-10);
        }
    }

    #[test]
    fn zero_input_reachability_estimate_is_trivial() {
        let (sys, pair, _, _) = reduced_pair(3);
        let cfg = SimulationConfig { t_end: 50.0, dt: 0.01, ..Default::default() };
        let rep = energy_estimate_check(&sys, &pair.p, &pair.q, 1, 1.0, &cfg, &InputSignal::broadcast(1, |_| 0.0)).unwrap();
        assert_eq!(rep.reachability.lhs, 0.0);
        assert_eq!(rep.reachability.j_t, 0.0);
        assert!(rep.reachability.holds);
    }

    #[test]
    fn weighted_output_energy_scalar_closed_form() {
        // dx = a x dt + n₁ x dW, y = x, x₀ = 1: E y² = e^{(2a+n₁²)t}.
        let (a, n1) = (-1.0, 0.5);
        let sys = StochasticSystem::scalar(a, n1, 1.0, 1.0, 1.0).unwrap();
        let pair = compute_gramians(&sys, &SolverConfig::default(), &ReachabilityStrategy::SubgradientFeasibility).unwrap();
        let t = 4.0;
        let cfg = SimulationConfig { t_end: 100.0, dt: 1e-3, ..Default::default() };
        let rep = energy_estimate_check(&sys, &pair.p, &pair.q, 0, t, &cfg, &InputSignal::broadcast(1, |_| 1.0)).unwrap();
        let q = pair.q[(0, 0)];
        let b = q;
        let rate = 2.0 * a + n1 * n1 - b;
        let exact = ((rate * t).exp() - 1.0) / rate;
        assert!((rep.weighted_output.lhs - exact).abs() < 1e-6, "{} vs {exact}", rep.weighted_output.lhs);
        assert!(rep.weighted_output.holds);
        assert!((rep.feedback.j_inf - q).abs() < 5e-3 * q);
    }

    #[test]
    fn certificates_pass_and_full_order_matches() {
        let (sys, pair, bal, _) = reduced_pair(3);
        for r in 1..=3 {
            let red = balancing::truncate(&bal, r).unwrap();
            let cert = preservation_certificates(&bal, &red).unwrap();
            assert!(cert.passed, "r = {r}: {cert:?}");
        }
        let red = balancing::truncate(&bal, 3).unwrap();
        let cert = preservation_certificates(&bal, &red).unwrap();
        let full = sys.with_a(sys.a() - sys.b() * sys.b().transpose() * &pair.q).unwrap();
        let direct = operators::mean_square_stability(&full).unwrap();
        assert!((cert.reduced_closed_loop.abscissa - direct.abscissa).abs() < 1e-8);
    }

    #[test]
    fn deterministic_reduced_closed_loop_is_hurwitz() {
        let sys = StochasticSystem::with_unit_noise(
            DMatrix::from_row_slice(3, 3, &[0.2, 1.0, 0.0, 0.0, -1.0, 0.5, 0.3, 0.0, -2.0]),
            DMatrix::zeros(3, 3),
            DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]),
        )
        .unwrap();
        let pair = compute_gramians(&sys, &SolverConfig::default(), &ReachabilityStrategy::SubgradientFeasibility).unwrap();
        let bal = balancing::balance(&sys, &pair.p, &pair.q).unwrap();
        let red = balancing::truncate(&bal, 1).unwrap();
        let sig = red.sigma_matrix();
        let acl = red.system.a() - red.system.b() * red.system.b().transpose() * sig;
        let eig = linalg::eigenvalues(&acl).unwrap();
        assert!(eig.iter().all(|z| z.re < 0.0));
    }

    proptest! {
        #[test]
        fn tail_monotone_and_hat_ordering(mut sigma in proptest::collection::vec(1e-6f64..1e3, 1..12)) {
            sigma.sort_by(|a, b| b.total_cmp(a));
            let n = sigma.len();
            let mut prev = f64::INFINITY;
            for r in 0..=n {
                let t = balancing::tail_coefficient(&sigma, r);
                prop_assert!(t <= plain_tail(&sigma, r) + 1e-15);
                prop_assert!(t <= prev + 1e-15);
                prev = t;
            }
            prop_assert_eq!(balancing::tail_coefficient(&sigma, n), 0.0);
            for j in 0..n {
                for k in 0..n {
                    if sigma[j] > sigma[k] {
                        prop_assert!(balancing::hat(sigma[j]) > balancing::hat(sigma[k]));
                    }
                }
            }
        }

        #[test]
        fn feedback_bound_is_finite_form(s in 1e-6f64..1.0, u1 in 0.0f64..10.0, split in 0.0f64..1.0) {
            let sigma = [2.0, s];
            let n2 = u1 * u1;
            let finite = apriori_bound(&sigma, 1, BoundContext::Finite { j_t: split * n2, terminal: (1.0 - split) * n2 }).unwrap();
            prop_assert!((finite - feedback_bound(&sigma, 1, u1).unwrap()).abs() <= 1e-12 * finite.max(1e-300));
        }
    }
}

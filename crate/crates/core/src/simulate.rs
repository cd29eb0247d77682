//! Drift-implicit Euler–Maruyama sampling, second-moment propagation by the
//! Lyapunov-type moment ODE, error systems and cost functionals.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::balancing::ReducedModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::operators;
use crate::system::StochasticSystem;

/// Paths simulated together as the columns of one state matrix.
const CHUNK: usize = 256;

/// Relative PSD tolerance for recorded second moments.
pub const PSD_TOL: f64 = 1e-8;

/// Deterministic input `t ↦ u(t) ∈ ℝᵐ`.
#[derive(Clone)]
pub struct InputSignal {
    m: usize,
    f: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InputSignal(m = {})", self.m)
    }
}

impl InputSignal {
    pub fn new(m: usize, f: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { m, f: Arc::new(f) }
    }

    /// The same scalar signal on every input channel.
    pub fn broadcast(m: usize, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(m, move |t| DVector::from_element(m, f(t)))
    }

    /// Piecewise-linear interpolation of samples, held constant outside.
    pub fn from_samples(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::input("input samples need matching non-empty time and value lists"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::input("input sample times must be strictly increasing"));
        }
        let m = values[0].len();
        if values.iter().any(|v| v.len() != m) {
            return Err(Error::input("input samples have inconsistent dimensions"));
        }
        Ok(Self::new(m, move |t| {
            let k = times.partition_point(|&s| s <= t);
            if k == 0 {
                return values[0].clone();
            }
            if k == times.len() {
                return values[k - 1].clone();
            }
            let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
            &values[k - 1] * (1.0 - w) + &values[k] * w
        }))
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }
}

#[derive(Debug, Clone)]
pub enum ControlSpec {
    Zero,
    OpenLoop(InputSignal),
    /// `u = F x + u¹(t)`.
    Feedback { gain: DMatrix<f64>, offset: Option<InputSignal> },
}

impl ControlSpec {
    fn validate(&self, sys: &StochasticSystem) -> Result<()> {
        let m = sys.inputs();
        let check = |s: &InputSignal| {
            if s.dim() != m {
                return Err(Error::input(format!("input signal has {} channels, system has {m}", s.dim())));
            }
            Ok(())
        };
        match self {
            ControlSpec::Zero => Ok(()),
            ControlSpec::OpenLoop(s) => check(s),
            ControlSpec::Feedback { gain, offset } => {
                if gain.shape() != (m, sys.n()) {
                    return Err(Error::input(format!(
                        "feedback gain must be {m}x{}, got {}x{}",
                        sys.n(),
                        gain.nrows(),
                        gain.ncols()
                    )));
                }
                offset.as_ref().map_or(Ok(()), check)
            }
        }
    }

    fn gain(&self) -> Option<&DMatrix<f64>> {
        match self {
            ControlSpec::Feedback { gain, .. } => Some(gain),
            _ => None,
        }
    }

    fn signal(&self) -> Option<&InputSignal> {
        match self {
            ControlSpec::Zero => None,
            ControlSpec::OpenLoop(s) => Some(s),
            ControlSpec::Feedback { offset, .. } => offset.as_ref(),
        }
    }

    /// Deterministic part `u¹(t)` (zero when absent).
    pub fn offset(&self, t: f64, m: usize) -> DVector<f64> {
        self.signal().map_or_else(|| DVector::zeros(m), |s| s.at(t))
    }

    /// `A + BF` for feedback, `A` otherwise.
    pub fn closed_drift(&self, sys: &StochasticSystem) -> DMatrix<f64> {
        match self.gain() {
            Some(f) => sys.a() + sys.b() * f,
            None => sys.a().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Zero,
    Fixed(DVector<f64>),
    /// Standard normal vector scaled to unit norm, drawn from the config seed.
    RandomUnit,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub x0: InitialState,
    /// Second moments (and sample paths) are stored every `record_every` steps.
    pub record_every: usize,
    /// Number of leading paths whose outputs are kept.
    pub keep_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            dt: 1e-2,
            n_paths: 1000,
            seed: 0,
            x0: InitialState::Zero,
            record_every: 10,
            keep_paths: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::input(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) || !self.t_end.is_finite() {
            return Err(Error::input(format!("T = {} must be finite and at least dt = {}", self.t_end, self.dt)));
        }
        if self.record_every == 0 {
            return Err(Error::input("record_every must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps `M = round(T/dt)`; the effective step is `T/M`.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    pub fn step_size(&self) -> f64 {
        self.t_end / self.steps() as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let m = self.steps();
        let h = self.step_size();
        (0..=m).map(|k| if k == m { self.t_end } else { k as f64 * h }).collect()
    }

    pub fn initial_state(&self, n: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            InitialState::Zero => Ok(DVector::zeros(n)),
            InitialState::Fixed(x) => {
                if x.len() != n {
                    return Err(Error::input(format!("initial state has length {}, expected {n}", x.len())));
                }
                Ok(x.clone())
            }
            InitialState::RandomUnit => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(u64::MAX);
                let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                Ok(&v / v.norm())
            }
        }
    }

    fn recorded(&self, k: usize) -> bool {
        k % self.record_every == 0 || k == self.steps()
    }
}

/// One step of the moment dynamics
/// `ṁ = A_cl m + B u`, `Ẋ = A_cl X + X A_clᵀ + Σ k_ij N_i X N_jᵀ + B u mᵀ + m uᵀ Bᵀ`
/// in the form `X = m mᵀ + C` with `Ċ = A_cl C + C A_clᵀ + Π_N*(C + m mᵀ)`.
/// Strang splitting: exact drift half-steps `E = e^{hA_cl/2}` around a
/// source stage with second-order positive Taylor expansion of `e^{hΠ_N*}`.
/// Every stage maps PSD matrices to PSD matrices.
#[derive(Debug, Clone)]
pub struct MomentStepper {
    h: f64,
    half: DMatrix<f64>,
    sys: StochasticSystem,
}

impl MomentStepper {
    /// `sys` carries the closed-loop drift already.
    pub fn new(sys: &StochasticSystem, h: f64) -> Result<Self> {
        let half = (sys.a() * (0.5 * h)).exp();
        if half.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepSize(format!("drift exponential overflows at h = {h}")));
        }
        Ok(Self { h, half, sys: sys.clone() })
    }

    fn drift(&self, m: &DVector<f64>, c: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.half * m, &self.half * c * self.half.transpose())
    }

    /// Advances `(m, C)` by one step with midpoint input `u`.
    pub fn step(&self, m: &mut DVector<f64>, c: &mut DMatrix<f64>, u: &DVector<f64>) {
        let h = self.h;
        let (ma, ca) = self.drift(m, c);
        let bu = self.sys.b() * u * h;
        let mid = &ma + &bu * 0.5;
        let y = &ca + &mid * mid.transpose();
        let p1 = operators::noise_term(&self.sys, &y, true);
        let p2 = operators::noise_term(&self.sys, &p1, true);
        let cb = ca + p1 * h + p2 * (0.5 * h * h);
        let (mn, cn) = self.drift(&(ma + bu), &cb);
        *m = mn;
        *c = linalg::symmetrize(&cn);
    }
}

/// `E[xxᵀ] = m mᵀ + C`.
pub fn second_moment(m: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    c + m * m.transpose()
}

/// Mean and second moment on the simulation grid.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub t: Vec<f64>,
    /// `E‖y(t_k)‖² = tr(C X Cᵀ)` at every grid point.
    pub output_energy: Vec<f64>,
    /// `E‖u(t_k)‖²` at every grid point.
    pub input_energy: Vec<f64>,
    /// `tr X(t_k)` at every grid point.
    pub state_energy: Vec<f64>,
    pub recorded_t: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub second: Vec<DMatrix<f64>>,
    pub dt: f64,
    /// Smallest `λ_min(X)/λ_max(X)` over the recorded steps.
    pub min_eig_ratio: f64,
}

impl MomentTrajectory {
    pub fn final_second(&self) -> &DMatrix<f64> {
        self.second.last().expect("trajectory records the final step")
    }
}

pub(crate) fn psd_ratio(x: &DMatrix<f64>) -> f64 {
    let e = linalg::SymEig::new(x);
    let top = e.max().abs().max(e.min().abs());
    if top == 0.0 {
        0.0
    } else {
        e.min() / top
    }
}

/// Second-moment propagation on the simulation grid; grid inputs are
/// averaged over each step.
pub fn propagate_moments(sys: &StochasticSystem, control: &ControlSpec, cfg: &SimulationConfig) -> Result<MomentTrajectory> {
    cfg.validate()?;
    control.validate(sys)?;
    let n = sys.n();
    let mdim = sys.inputs();
    let closed = sys.with_a(control.closed_drift(sys))?;
    let h = cfg.step_size();
    let stepper = MomentStepper::new(&closed, h)?;
    let t = cfg.grid();
    let mut m = cfg.initial_state(n)?;
    let mut cov = DMatrix::zeros(n, n);

    let ctc = sys.c().transpose() * sys.c();
    let gain = control.gain();
    let ftf = gain.map(|f| f.transpose() * f);

    let samples: Vec<DVector<f64>> = t.iter().map(|&s| control.offset(s, mdim)).collect();
    let mut traj = MomentTrajectory {
        t: t.clone(),
        output_energy: Vec::with_capacity(t.len()),
        input_energy: Vec::with_capacity(t.len()),
        state_energy: Vec::with_capacity(t.len()),
        recorded_t: Vec::new(),
        mean: Vec::new(),
        second: Vec::new(),
        dt: h,
        min_eig_ratio: 0.0,
    };
    let mut min_ratio = f64::INFINITY;
    for k in 0..t.len() {
        if k > 0 {
            let u = (&samples[k - 1] + &samples[k]) * 0.5;
            stepper.step(&mut m, &mut cov, &u);
            if cov.iter().chain(m.iter()).any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("moment propagation diverged at t = {}", t[k])));
            }
        }
        let x = second_moment(&m, &cov);
        traj.output_energy.push(ctc.dot(&x));
        traj.state_energy.push(x.trace());
        let u1 = &samples[k];
        let input = match (gain, &ftf) {
            (Some(f), Some(ftf)) => ftf.dot(&x) + 2.0 * u1.dot(&(f * &m)) + u1.norm_squared(),
            _ => u1.norm_squared(),
        };
        traj.input_energy.push(input);
        if cfg.recorded(k) {
            let ratio = psd_ratio(&x);
            if ratio < -PSD_TOL {
                return Err(Error::StepSize(format!(
                    "second moment lost positive semidefiniteness at t = {} (λ_min/λ_max = {ratio:.3e}); reduce dt",
                    t[k]
                )));
            }
            min_ratio = min_ratio.min(ratio);
            traj.recorded_t.push(t[k]);
            traj.mean.push(m.clone());
            traj.second.push(x);
        }
    }
    traj.min_eig_ratio = min_ratio;
    Ok(traj)
}

/// Output samples of one path at the recorded steps.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub index: usize,
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
}

/// Monte Carlo statistics on the simulation grid.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub t: Vec<f64>,
    pub n_paths: usize,
    pub mean_output_energy: Vec<f64>,
    pub se_output_energy: Vec<f64>,
    pub mean_input_energy: Vec<f64>,
    pub se_input_energy: Vec<f64>,
    /// Per-path trapezoidal `∫(‖u‖² + ‖y‖²)dt`.
    pub path_cost: Vec<f64>,
    pub kept: Vec<SamplePath>,
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

impl PathBatch {
    /// Monte Carlo estimate of `J_T` with its standard error.
    pub fn cost_estimate(&self) -> (f64, f64) {
        let s: f64 = self.path_cost.iter().sum();
        let s2: f64 = self.path_cost.iter().map(|v| v * v).sum();
        mean_se(s, s2, self.path_cost.len())
    }
}

struct ChunkResult {
    y_sum: Vec<f64>,
    y_sq: Vec<f64>,
    u_sum: Vec<f64>,
    u_sq: Vec<f64>,
    cost: Vec<f64>,
    kept: Vec<SamplePath>,
}

/// `L` with `L Lᵀ = K`, negative eigenvalues clipped to zero.
fn covariance_factor(k: &DMatrix<f64>) -> DMatrix<f64> {
    let e = linalg::SymEig::new(k);
    let mut l = e.vectors.clone();
    for (j, &lam) in e.values.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Drift-implicit Euler–Maruyama:
/// `(I − h·A_cl) x_{k+1} = x_k + h·B·u¹(t_k) + Σ_i N_i x_k ΔW_{i,k}`.
/// Path `j` draws from its own ChaCha8 stream `(seed, j)`.
pub fn integrate_sde(sys: &StochasticSystem, control: &ControlSpec, cfg: &SimulationConfig) -> Result<PathBatch> {
    cfg.validate()?;
    control.validate(sys)?;
    if cfg.n_paths == 0 {
        return Err(Error::input("n_paths must be at least 1"));
    }
    let n = sys.n();
    let mdim = sys.inputs();
    let h = cfg.step_size();
    let acl = control.closed_drift(sys);
    let implicit = DMatrix::<f64>::identity(n, n) - &acl * h;
    let solve = linalg::inverse(&implicit).map_err(|_| Error::StepSize(format!("I − dt·A singular at dt = {h}")))?;
    if solve.iter().any(|v| !v.is_finite()) || solve.norm() > 1e14 {
        return Err(Error::StepSize(format!("I − dt·A is numerically singular at dt = {h}")));
    }
    let l = covariance_factor(sys.covariance()) * h.sqrt();
    let t = cfg.grid();
    let x0 = cfg.initial_state(n)?;
    let drive: Vec<DVector<f64>> = t.iter().map(|&s| sys.b() * control.offset(s, mdim)).collect();
    let offsets: Vec<DVector<f64>> = t.iter().map(|&s| control.offset(s, mdim)).collect();
    let gain = control.gain();
    let c = sys.c();
    let q = sys.channels();
    let steps = t.len();

    let chunks: Vec<(usize, usize)> =
        (0..cfg.n_paths).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(cfg.n_paths))).collect();
    let results: Vec<ChunkResult> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let width = end - start;
            let mut rngs: Vec<ChaCha8Rng> = (start..end)
                .map(|j| {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                    r.set_stream(j as u64);
                    r
                })
                .collect();
            let mut x = DMatrix::from_fn(n, width, |i, _| x0[i]);
            let mut res = ChunkResult {
                y_sum: vec![0.0; steps],
                y_sq: vec![0.0; steps],
                u_sum: vec![0.0; steps],
                u_sq: vec![0.0; steps],
                cost: vec![0.0; width],
                kept: (start..end.min(cfg.keep_paths.max(start)))
                    .map(|index| SamplePath { index, t: Vec::new(), y: Vec::new() })
                    .collect(),
            };
            let mut prev = vec![0.0; width];
            let mut dw = DMatrix::<f64>::zeros(q, width);
            let mut z = DVector::<f64>::zeros(q);
            for k in 0..steps {
                let y = c * &x;
                let u = gain.map(|f| {
                    let mut u = f * &x;
                    for mut col in u.column_iter_mut() {
                        col += &offsets[k];
                    }
                    u
                });
                for j in 0..width {
                    let ye = y.column(j).norm_squared();
                    let ue = match &u {
                        Some(u) => u.column(j).norm_squared(),
                        None => offsets[k].norm_squared(),
                    };
                    res.y_sum[k] += ye;
                    res.y_sq[k] += ye * ye;
                    res.u_sum[k] += ue;
                    res.u_sq[k] += ue * ue;
                    let e = ye + ue;
                    if k > 0 {
                        res.cost[j] += 0.5 * (t[k] - t[k - 1]) * (prev[j] + e);
                    }
                    prev[j] = e;
                }
                if cfg.recorded(k) {
                    for kp in res.kept.iter_mut() {
                        kp.t.push(t[k]);
                        kp.y.push(y.column(kp.index - start).into_owned());
                    }
                }
                if k + 1 == steps {
                    break;
                }
                for (j, rng) in rngs.iter_mut().enumerate() {
                    for zi in z.iter_mut() {
                        *zi = rng.sample(StandardNormal);
                    }
                    dw.set_column(j, &(&l * &z));
                }
                let mut rhs = x.clone();
                for mut col in rhs.column_iter_mut() {
                    col.axpy(h, &drive[k], 1.0);
                }
                for (i, ni) in sys.noise().iter().enumerate() {
                    let mut scaled = x.clone();
                    for (j, mut col) in scaled.column_iter_mut().enumerate() {
                        col.scale_mut(dw[(i, j)]);
                    }
                    rhs.gemm(1.0, ni, &scaled, 1.0);
                }
                x = &solve * rhs;
            }
            res
        })
        .collect();

    let mut y_sum = vec![0.0; steps];
    let mut y_sq = vec![0.0; steps];
    let mut u_sum = vec![0.0; steps];
    let mut u_sq = vec![0.0; steps];
    let mut path_cost = Vec::with_capacity(cfg.n_paths);
    let mut kept = Vec::new();
    for r in results {
        for k in 0..steps {
            y_sum[k] += r.y_sum[k];
            y_sq[k] += r.y_sq[k];
            u_sum[k] += r.u_sum[k];
            u_sq[k] += r.u_sq[k];
        }
        path_cost.extend(r.cost);
        kept.extend(r.kept);
    }
    let (mut my, mut sy, mut mu, mut su) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for k in 0..steps {
        let (a, b) = mean_se(y_sum[k], y_sq[k], cfg.n_paths);
        my.push(a);
        sy.push(b);
        let (a, b) = mean_se(u_sum[k], u_sq[k], cfg.n_paths);
        mu.push(a);
        su.push(b);
    }
    Ok(PathBatch {
        t,
        n_paths: cfg.n_paths,
        mean_output_energy: my,
        se_output_energy: sy,
        mean_input_energy: mu,
        se_input_energy: su,
        path_cost,
        kept,
    })
}

#[derive(Debug, Clone)]
pub enum ErrorSystemMode {
    OpenLoop,
    /// Drift blocks `A − BBᵀQ` and `A_r − B_rB_rᵀΣ_r`.
    ClosedLoop { q: DMatrix<f64> },
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(n + r, n + r);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (r, r)).copy_from(b);
    out
}

fn check_pair(full: &StochasticSystem, reduced: &ReducedModel) -> Result<()> {
    let red = &reduced.system;
    if red.inputs() != full.inputs() || red.outputs() != full.outputs() || red.channels() != full.channels() {
        return Err(Error::input("reduced model dimensions do not match the full system"));
    }
    if red.covariance() != full.covariance() {
        return Err(Error::input("reduced model noise covariance differs from the full system"));
    }
    Ok(())
}

/// States `(x, x_r)`, input `[B; B_r]`, output `[C, −C_r]` (so `y − y_r`).
pub fn build_error_system(full: &StochasticSystem, reduced: &ReducedModel, mode: &ErrorSystemMode) -> Result<StochasticSystem> {
    check_pair(full, reduced)?;
    let red = &reduced.system;
    let (a, ar) = match mode {
        ErrorSystemMode::OpenLoop => (full.a().clone(), red.a().clone()),
        ErrorSystemMode::ClosedLoop { q } => {
            if q.shape() != (full.n(), full.n()) {
                return Err(Error::input("Q does not match the full system"));
            }
            let sig = reduced.sigma_matrix();
            (
                full.a() - full.b() * (full.b().transpose() * q),
                red.a() - red.b() * (red.b().transpose() * sig),
            )
        }
    };
    let noise = full.noise().iter().zip(red.noise()).map(|(n1, n2)| block_diag(n1, n2)).collect();
    let (n, r) = (full.n(), reduced.r);
    let mut b = DMatrix::zeros(n + r, full.inputs());
    b.rows_mut(0, n).copy_from(full.b());
    b.rows_mut(n, r).copy_from(red.b());
    let mut c = DMatrix::zeros(full.outputs(), n + r);
    c.columns_mut(0, n).copy_from(full.c());
    c.columns_mut(n, r).copy_from(&(-red.c()));
    StochasticSystem::new(block_diag(&a, &ar), noise, b, c, full.covariance().clone())
}

/// `[[−BᵀQ, B_rᵀΣ_r], [C, −C_r]]`: stacked `(u − u_r, y − y_r)` of the
/// closed-loop error system with feedbacks `−BᵀQx` and `−B_rᵀΣ_r x_r`.
pub fn feedback_pair_output(full: &StochasticSystem, reduced: &ReducedModel, q: &DMatrix<f64>) -> DMatrix<f64> {
    let red = &reduced.system;
    let (n, r, m, p) = (full.n(), reduced.r, full.inputs(), full.outputs());
    let mut out = DMatrix::zeros(m + p, n + r);
    out.view_mut((0, 0), (m, n)).copy_from(&(-(full.b().transpose() * q)));
    out.view_mut((0, n), (m, r)).copy_from(&(red.b().transpose() * reduced.sigma_matrix()));
    out.view_mut((m, 0), (p, n)).copy_from(full.c());
    out.view_mut((m, n), (p, r)).copy_from(&(-red.c()));
    out
}

/// Reduced controller `u = −B_rᵀΣ_r W_r x` applied to the full system.
pub fn reduced_feedback_gain(reduced: &ReducedModel) -> DMatrix<f64> {
    -(reduced.system.b().transpose() * reduced.sigma_matrix() * &reduced.w)
}

/// `(A − B B_rᵀΣ_r W_r, N_i, B, C)`.
pub fn reduced_feedback_on_full(full: &StochasticSystem, reduced: &ReducedModel) -> Result<StochasticSystem> {
    check_pair(full, reduced)?;
    if reduced.w.ncols() != full.n() {
        return Err(Error::input("reduced model projection does not match the full system"));
    }
    full.with_a(full.a() + full.b() * reduced_feedback_gain(reduced))
}

/// Trapezoidal rule on a (possibly non-uniform) grid.
pub fn trapezoid(t: &[f64], values: &[f64]) -> f64 {
    weighted_trapezoid(t, values, 0.0)
}

/// Trapezoidal rule for `∫ e^{−βt} v(t) dt`.
pub fn weighted_trapezoid(t: &[f64], values: &[f64], beta: f64) -> f64 {
    t.windows(2)
        .zip(values.windows(2))
        .map(|(s, v)| 0.5 * (s[1] - s[0]) * ((-beta * s[0]).exp() * v[0] + (-beta * s[1]).exp() * v[1]))
        .sum()
}

/// `J_T = ∫₀ᵀ E(‖u‖² + ‖y‖²) dt` from moment data.
pub fn cost_functional(traj: &MomentTrajectory) -> f64 {
    let e: Vec<f64> = traj.output_energy.iter().zip(&traj.input_energy).map(|(y, u)| y + u).collect();
    trapezoid(&traj.t, &e)
}

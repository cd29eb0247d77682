//! Square-root balancing of the Gramian pair and truncation.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::solvers::{compute_gramians, GramianPair, ReachabilityStrategy, SolverConfig};
use crate::system::StochasticSystem;

/// Default relative gap tolerance `σ_r − σ_{r+1} > gap_tol·σ₁`.
pub const GAP_TOL: f64 = 1e-10;

/// Singular values below `SIGMA_FLOOR·σ₁` are rejected.
pub const SIGMA_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct BalancedRealization {
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    /// `σ₁ ≥ … ≥ σ_n > 0`.
    pub sigma: Vec<f64>,
    /// `(S A S⁻¹, S N_i S⁻¹, S B, C S⁻¹)`.
    pub system: StochasticSystem,
}

#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub system: StochasticSystem,
    pub sigma_r: Vec<f64>,
    /// First `r` columns of `S⁻¹`.
    pub v: DMatrix<f64>,
    /// First `r` rows of `S`.
    pub w: DMatrix<f64>,
    pub r: usize,
}

impl ReducedModel {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.sigma_r.clone()))
    }

    /// `x ≈ V_r x_r`.
    pub fn lift(&self, xr: &DVector<f64>) -> DVector<f64> {
        &self.v * xr
    }

    /// `x_r = W_r x`.
    pub fn restrict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x
    }
}

fn spd_check(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let e = linalg::SymEig::new(m);
    if !(e.min() > 1e-12 * e.max()) || !(e.max() > 0.0) {
        return Err(Error::precondition(format!(
            "{name} is not positive definite (λ_min = {:.3e}, λ_max = {:.3e})",
            e.min(),
            e.max()
        )));
    }
    Ok(())
}

/// Balances `sys` with respect to `(P, Q)`: `L_P = chol(P)`,
/// `L_PᵀQL_P = UΣ²Uᵀ`, `S = Σ^{1/2}UᵀL_P⁻¹`, `S⁻¹ = L_PUΣ^{−1/2}`.
pub fn balance(sys: &StochasticSystem, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<BalancedRealization> {
    let n = sys.n();
    if p.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::input("Gramian dimensions do not match the system"));
    }
    spd_check(p, "P")?;
    spd_check(q, "Q")?;
    let l = Cholesky::new(linalg::symmetrize(p))
        .ok_or_else(|| Error::precondition("P is not positive definite"))?
        .l();
    let m = l.transpose() * q * &l;
    let e = linalg::SymEig::new(&m);
    let sigma: Vec<f64> = e.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    let s1 = sigma[0];
    if let Some(k) = sigma.iter().position(|&s| !(s > SIGMA_FLOOR * s1)) {
        return Err(Error::precondition(format!(
            "σ_{} = {:.3e} is below {SIGMA_FLOOR:e}·σ₁; the observability assumption fails",
            k + 1,
            sigma[k]
        )));
    }
    let half = DVector::from_iterator(n, sigma.iter().map(|s| s.sqrt()));
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::numerical("Cholesky factor is singular"))?;
    let mut s = e.vectors.transpose() * l_inv;
    let mut s_inv = &l * &e.vectors;
    for k in 0..n {
        s.row_mut(k).scale_mut(half[k]);
        s_inv.column_mut(k).unscale_mut(half[k]);
    }
    let system = sys.transform(&s, &s_inv);
    Ok(BalancedRealization { s, s_inv, sigma, system })
}

fn gap_ok(sigma: &[f64], r: usize, gap_tol: f64) -> bool {
    r >= sigma.len() || sigma[r - 1] - sigma[r] > gap_tol * sigma[0]
}

fn nearest_admissible(sigma: &[f64], r: usize, gap_tol: f64) -> usize {
    let n = sigma.len();
    (1..=n)
        .filter(|&k| gap_ok(sigma, k, gap_tol))
        .min_by_key(|&k| (k as isize - r as isize).unsigned_abs() * 2 + usize::from(k < r))
        .unwrap_or(n)
}

/// Truncates to order `r` with the default gap tolerance.
pub fn truncate(bal: &BalancedRealization, r: usize) -> Result<ReducedModel> {
    truncate_with(bal, r, GAP_TOL)
}

pub fn truncate_with(bal: &BalancedRealization, r: usize, gap_tol: f64) -> Result<ReducedModel> {
    let n = bal.sigma.len();
    if r == 0 || r > n {
        return Err(Error::OrderSelection {
            reason: format!("order {r} outside 1..={n}"),
            suggestion: r.clamp(1, n),
        });
    }
    if !gap_ok(&bal.sigma, r, gap_tol) {
        return Err(Error::OrderSelection {
            reason: format!(
                "σ_{r} − σ_{} = {:.3e} does not exceed {gap_tol:e}·σ₁",
                r + 1,
                bal.sigma[r - 1] - bal.sigma[r]
            ),
            suggestion: nearest_admissible(&bal.sigma, r, gap_tol),
        });
    }
    let full = &bal.system;
    let sub = |m: &DMatrix<f64>| m.view((0, 0), (r, r)).clone_owned();
    let system = StochasticSystem::new(
        sub(full.a()),
        full.noise().iter().map(sub).collect(),
        full.b().rows(0, r).clone_owned(),
        full.c().columns(0, r).clone_owned(),
        full.covariance().clone(),
    )?;
    Ok(ReducedModel {
        system,
        sigma_r: bal.sigma[..r].to_vec(),
        v: bal.s_inv.columns(0, r).clone_owned(),
        w: bal.s.rows(0, r).clone_owned(),
        r,
    })
}

/// Relative threshold below which a Krylov direction counts as dependent.
pub const KRYLOV_TOL: f64 = 1e-10;

/// Compression of `sys` onto its observable subspace `O`, the smallest
/// subspace containing `range Cᵀ` and invariant under `Aᵀ` and every `N_iᵀ`.
///
/// `O⊥` is invariant under `A` and `N_i` and lies in `ker C`, so with
/// `x = V z + U w` the coordinates `z = Vᵀx` evolve autonomously and carry the
/// whole output. When the `w` block is mean-square stable, `Q = V Q_o Vᵀ`.
#[derive(Debug, Clone)]
pub struct ObservableRestriction {
    /// Orthonormal basis `V` of `O` (n×n_o).
    pub basis: DMatrix<f64>,
    /// Orthonormal basis `U` of `O⊥`.
    pub complement: DMatrix<f64>,
    /// `(VᵀAV, VᵀN_iV, VᵀB, CV)`.
    pub system: StochasticSystem,
    /// `max ‖UᵀM V‖/‖M‖` over `M ∈ {Aᵀ, N_iᵀ}` plus `‖CU‖/‖C‖`.
    pub invariance_residual: f64,
    /// Spectral abscissa of the unobservable block `(UᵀAU, UᵀN_iU)`.
    pub unobservable_abscissa: Option<f64>,
}

impl ObservableRestriction {
    pub fn is_identity(&self) -> bool {
        self.complement.ncols() == 0
    }

    /// Expresses a reduced model of the restricted system in original
    /// coordinates: `V_r ← V V_r`, `W_r ← W_r Vᵀ`.
    pub fn embed(&self, red: &ReducedModel) -> ReducedModel {
        ReducedModel {
            system: red.system.clone(),
            sigma_r: red.sigma_r.clone(),
            v: &self.basis * &red.v,
            w: &red.w * self.basis.transpose(),
            r: red.r,
        }
    }

    /// Lifts a Gramian of the restricted system: `V X Vᵀ`.
    pub fn lift_gramian(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.basis * x * self.basis.transpose()))
    }
}

fn orthogonalize(basis: &[DVector<f64>], v: &mut DVector<f64>) {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(v);
            v.axpy(-c, b, 1.0);
        }
    }
}

/// Computes the observable subspace by block Krylov expansion and compresses
/// the system onto it. Fails with a precondition error when the unobservable
/// block is not mean-square stable.
pub fn observable_restriction(sys: &StochasticSystem, tol: f64) -> Result<ObservableRestriction> {
    let n = sys.n();
    let mut gens: Vec<DMatrix<f64>> = vec![sys.a().transpose()];
    gens.extend(sys.noise().iter().map(|m| m.transpose()));
    let scales: Vec<f64> = gens.iter().map(|m| m.norm().max(f64::MIN_POSITIVE)).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let push = |basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>, scale: f64| -> bool {
        orthogonalize(basis, &mut v);
        let nv = v.norm();
        if basis.len() < n && nv > tol * scale {
            basis.push(v / nv);
            true
        } else {
            false
        }
    };
    let ct = sys.c().transpose();
    let c_scale = sys.c().norm().max(f64::MIN_POSITIVE);
    for j in 0..ct.ncols() {
        push(&mut basis, ct.column(j).clone_owned(), c_scale.max(ct.column(j).norm()));
    }
    let mut head = 0;
    while head < basis.len() && basis.len() < n {
        let v = basis[head].clone();
        for (g, &sc) in gens.iter().zip(&scales) {
            push(&mut basis, g * &v, sc);
        }
        head += 1;
    }
    let k = basis.len();
    if k == n {
        return Ok(ObservableRestriction {
            basis: DMatrix::identity(n, n),
            complement: DMatrix::zeros(n, 0),
            system: sys.clone(),
            invariance_residual: 0.0,
            unobservable_abscissa: None,
        });
    }
    let v = if k == 0 { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&basis) };
    let proj = DMatrix::<f64>::identity(n, n) - &v * v.transpose();
    let complement = linalg::SymEig::new(&proj).vectors.columns(0, n - k).clone_owned();
    let mut invariance_residual = 0.0f64;
    if k > 0 {
        for (g, &sc) in gens.iter().zip(&scales) {
            invariance_residual = invariance_residual.max((complement.transpose() * g * &v).norm() / sc);
        }
    }
    invariance_residual = invariance_residual.max((sys.c() * &complement).norm() / c_scale);
    let block = sys.transform(&complement.transpose(), &complement);
    let cert = crate::operators::mean_square_stability(&block)?;
    if !cert.stable {
        return Err(Error::precondition(format!(
            "unobservable block is not mean-square stable (abscissa {:.3e}); the system is not detectable",
            cert.abscissa
        )));
    }
    let unobservable_abscissa = Some(cert.abscissa);
    let system = sys.transform(&v.transpose(), &v);
    Ok(ObservableRestriction { basis: v, complement, system, invariance_residual, unobservable_abscissa })
}

/// Largest accepted `invariance_residual` of an observable restriction.
pub const INVARIANCE_TOL: f64 = 1e-8;

/// Gramians and balanced realization of the observable part of a system.
#[derive(Debug, Clone)]
pub struct BalancingSetup {
    pub restriction: ObservableRestriction,
    /// Gramians of `restriction.system`.
    pub gramians: GramianPair,
    pub balanced: BalancedRealization,
}

impl BalancingSetup {
    /// Truncation to order `r`, expressed in the original coordinates.
    pub fn reduce(&self, r: usize) -> Result<ReducedModel> {
        Ok(self.restriction.embed(&truncate(&self.balanced, r)?))
    }

    pub fn q_full(&self) -> DMatrix<f64> {
        self.restriction.lift_gramian(&self.gramians.q)
    }
}

/// Restricts `sys` to its observable subspace (a no-op for observable
/// systems), computes the Gramian pair there and balances it.
pub fn prepare_balancing(
    sys: &StochasticSystem,
    cfg: &SolverConfig,
    strategy: &ReachabilityStrategy,
) -> Result<BalancingSetup> {
    let restriction = observable_restriction(sys, KRYLOV_TOL)?;
    if restriction.invariance_residual > INVARIANCE_TOL {
        return Err(Error::numerical(format!(
            "observable subspace is not invariant to tolerance ({:.3e})",
            restriction.invariance_residual
        )));
    }
    let gramians = compute_gramians(&restriction.system, cfg, strategy)?;
    let balanced = balance(&restriction.system, &gramians.p, &gramians.q)?;
    Ok(BalancingSetup { restriction, gramians, balanced })
}

/// `σ/√(1+σ²)`.
pub fn hat(sigma: f64) -> f64 {
    sigma / (1.0 + sigma * sigma).sqrt()
}

/// `2·Σ_{k>r} σ_k/√(1+σ_k²)`.
pub fn tail_coefficient(sigma: &[f64], r: usize) -> f64 {
    2.0 * sigma.iter().skip(r).map(|&s| hat(s)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderChoice {
    pub r: usize,
    /// Set when no order below `n` satisfies both conditions.
    pub warning: bool,
}

/// Smallest `r` whose tail coefficient is at most `rel_tol`, moved up until
/// the gap condition holds.
pub fn choose_order(sigma: &[f64], rel_tol: f64) -> Result<OrderChoice> {
    let n = sigma.len();
    if n == 0 {
        return Err(Error::input("empty singular value list"));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) || sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::input("singular values must be positive and non-increasing"));
    }
    let mut r = (1..=n).find(|&r| tail_coefficient(sigma, r) <= rel_tol).unwrap_or(n);
    while r < n && !gap_ok(sigma, r, GAP_TOL) {
        r += 1;
    }
    Ok(OrderChoice { r, warning: r == n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn any_system(n: usize, seed: u64) -> StochasticSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r, c| DMatrix::<f64>::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5);
        StochasticSystem::with_unit_noise(g(n, n), g(n, n), g(n, 2), g(1, n)).unwrap()
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn check_invariants(bal: &BalancedRealization, p: &DMatrix<f64>, q: &DMatrix<f64>) {
        let n = p.nrows();
        let s1 = bal.sigma[0];
        let d = DMatrix::from_diagonal(&DVector::from_vec(bal.sigma.clone()));
        assert!((&bal.s * &bal.s_inv - DMatrix::<f64>::identity(n, n)).norm() <= 1e-10 * (n as f64).sqrt());
        assert!((&bal.s * p * bal.s.transpose() - &d).norm() <= 1e-8 * s1);
        assert!((bal.s_inv.transpose() * q * &bal.s_inv - &d).norm() <= 1e-8 * s1);
    }

    #[test]
    fn diagonal_hand_example() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let bal = balance(&any_system(2, 1), &p, &p).unwrap();
        assert!((bal.sigma[0] - 4.0).abs() < 1e-14 && (bal.sigma[1] - 1.0).abs() < 1e-14);
        assert!((&bal.s - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn identity_pair_gives_orthogonal_transform() {
        let i = DMatrix::<f64>::identity(3, 3);
        let bal = balance(&any_system(3, 2), &i, &i).unwrap();
        assert!(bal.sigma.iter().all(|s| (s - 1.0).abs() < 1e-14));
        assert!((&bal.s * bal.s.transpose() - &i).norm() < 1e-13);
    }

    #[test]
    fn random_pairs_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let p = random_spd(6, &mut rng);
            let q = random_spd(6, &mut rng);
            let bal = balance(&any_system(6, 4), &p, &q).unwrap();
            check_invariants(&bal, &p, &q);
            assert!(bal.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn singular_q_is_rejected() {
        let p = DMatrix::<f64>::identity(2, 2);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(balance(&any_system(2, 5), &p, &q), Err(Error::Precondition(_))));
    }

    #[test]
    fn balancing_is_a_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = any_system(5, 7);
        let bal = balance(&sys, &random_spd(5, &mut rng), &random_spd(5, &mut rng)).unwrap();
        let mut e1: Vec<f64> = linalg::eigenvalues(sys.a()).unwrap().iter().map(|z| z.re).collect();
        let mut e2: Vec<f64> = linalg::eigenvalues(bal.system.a()).unwrap().iter().map(|z| z.re).collect();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_reads_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = any_system(4, 9);
        let bal = balance(&sys, &random_spd(4, &mut rng), &random_spd(4, &mut rng)).unwrap();
        let red = truncate(&bal, 2).unwrap();
        assert_eq!(red.system.a(), &bal.system.a().view((0, 0), (2, 2)).clone_owned());
        assert_eq!(red.system.b(), &bal.system.b().rows(0, 2).clone_owned());
        assert!((&red.w * &red.v - DMatrix::<f64>::identity(2, 2)).norm() < 1e-10);
        let pg = &red.w * sys.a() * &red.v;
        assert!((pg - red.system.a()).norm() < 1e-10 * sys.a().norm());
        let full = truncate(&bal, 4).unwrap();
        assert_eq!(full.system, bal.system);
    }

    #[test]
    fn gap_violation_reports_suggestion() {
        let i = DMatrix::<f64>::identity(3, 3);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 2.0, 2.0]));
        let bal = balance(&any_system(3, 10), &p, &i).unwrap();
        match truncate(&bal, 2) {
            Err(Error::OrderSelection { suggestion, .. }) => assert_eq!(suggestion, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(truncate(&bal, 1).is_ok());
    }

    #[test]
    fn choose_order_examples() {
        assert_eq!(choose_order(&[10.0, 1.0, 1e-6], 1e-4).unwrap(), OrderChoice { r: 2, warning: false });
        let sigma = [10.0, 1.0, 1e-6];
        let all = tail_coefficient(&sigma, 0);
        assert_eq!(choose_order(&sigma, all).unwrap().r, 1);
        // Tails: r=1 → 3.58, r=2 → 1.79; r=2 sits on the tie and moves to 3.
        let tied = [5.0, 2.0, 2.0];
        let choice = choose_order(&tied, 2.0).unwrap();
        assert_eq!(choice, OrderChoice { r: 3, warning: true });
    }

    #[test]
    fn tail_bounds_are_ordered() {
        let sigma = [3.0, 1.0, 0.5, 0.1];
        for r in 0..=4 {
            let t = tail_coefficient(&sigma, r);
            let plain = 2.0 * sigma[r..].iter().sum::<f64>();
            assert!(t <= plain);
            if r < 4 {
                assert!(tail_coefficient(&sigma, r + 1) <= t);
            }
        }
        assert_eq!(tail_coefficient(&sigma, 4), 0.0);
    }

    fn partly_unobservable(a33: f64) -> StochasticSystem {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, a33]);
        let n1 = DMatrix::from_row_slice(3, 3, &[0.1, 0.2, 0.0, 0.0, 0.1, 0.0, 0.3, 0.0, 0.2]);
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 1.0]);
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        StochasticSystem::with_unit_noise(a, n1, b, c).unwrap()
    }

    #[test]
    fn observable_restriction_drops_invariant_kernel() {
        let sys = partly_unobservable(-2.0);
        let res = observable_restriction(&sys, KRYLOV_TOL).unwrap();
        assert_eq!(res.basis.ncols(), 2);
        assert!(res.invariance_residual < 1e-14);
        assert!(res.unobservable_abscissa.unwrap() < 0.0);
        let cfg = SolverConfig::default();
        let q = crate::solvers::solve_observability_gramian(&sys, &cfg).unwrap().q;
        let q_o = crate::solvers::solve_observability_gramian(&res.system, &cfg).unwrap().q;
        assert!((res.lift_gramian(&q_o) - &q).norm() < 1e-9 * q.norm());
        assert!(balance(&sys, &DMatrix::identity(3, 3), &q).is_err());
        let setup = prepare_balancing(&sys, &cfg, &ReachabilityStrategy::SubgradientFeasibility).unwrap();
        let red = setup.reduce(1).unwrap();
        assert_eq!(red.w.shape(), (1, 3));
        assert!((&red.w * &red.v - DMatrix::<f64>::identity(1, 1)).norm() < 1e-10);
        let a_r = &red.w * sys.a() * &red.v;
        assert!((a_r - red.system.a()).norm() < 1e-10);
    }

    #[test]
    fn unstable_unobservable_block_is_rejected() {
        assert!(matches!(observable_restriction(&partly_unobservable(0.5), KRYLOV_TOL), Err(Error::Precondition(_))));
    }

    #[test]
    fn observable_system_is_left_unchanged() {
        let sys = any_system(4, 9);
        let res = observable_restriction(&sys, KRYLOV_TOL).unwrap();
        assert!(res.is_identity());
        assert_eq!(res.system, sys);
    }
}

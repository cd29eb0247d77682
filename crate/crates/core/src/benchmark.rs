//! Spectral Galerkin model of a controlled 2D heat equation on `[0, π]²` with
//! Neumann boundary conditions and multiplicative noise.
//!
//! Basis `h_ij = cos(i·)cos(j·)/‖·‖`, control on the indicator of
//! `[π/4, 3π/4]²`, output the mean temperature on the complement, noise
//! weight `g(ζ) = exp(−|ζ₁ − π/2| − ζ₂)`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::system::StochasticSystem;

#[derive(Debug, Clone, Serialize)]
pub struct HeatBenchmarkConfig {
    pub n: usize,
    pub alpha: f64,
    pub nu: f64,
    pub quad_points: usize,
}

impl Default for HeatBenchmarkConfig {
    fn default() -> Self {
        Self { n: 36, alpha: 0.2, nu: 2.0, quad_points: 64 }
    }
}

impl HeatBenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::input("benchmark order must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::input("alpha must be positive"));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::input("nu must be non-negative"));
        }
        if self.quad_points < 16 {
            return Err(Error::input("quad_points must be at least 16"));
        }
        Ok(())
    }
}

/// First `n` index pairs ordered by `i² + j²`, ties by `(i, j)`.
pub fn modes(n: usize) -> Vec<(usize, usize)> {
    let mut side = 1;
    while side * side < 4 * n.max(1) {
        side += 1;
    }
    let mut all: Vec<(usize, usize)> = (0..=side).flat_map(|i| (0..=side).map(move |j| (i, j))).collect();
    all.sort_by_key(|&(i, j)| (i * i + j * j, i, j));
    all.truncate(n);
    all
}

/// `‖cos(i·)cos(j·)‖²` on `[0, π]²`.
pub fn norm_sq(i: usize, j: usize) -> f64 {
    let f = |k: usize| if k == 0 { PI } else { FRAC_PI_2 };
    f(i) * f(j)
}

/// `∫_{π/4}^{3π/4} cos(k z) dz`.
fn inner_cos_integral(k: usize) -> f64 {
    if k == 0 {
        FRAC_PI_2
    } else {
        let k = k as f64;
        ((3.0 * FRAC_PI_4 * k).sin() - (FRAC_PI_4 * k).sin()) / k
    }
}

/// `∫_0^π cos(k z) dz`.
fn full_cos_integral(k: usize) -> f64 {
    if k == 0 {
        PI
    } else {
        0.0
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for k in 0..m.div_ceil(2) {
        let mut z = (PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for l in 2..=m {
                let l = l as f64;
                let p2 = ((2.0 * l - 1.0) * z * p1 - (l - 1.0) * p0) / l;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 1 { z } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (z * pm - pm1) / (z * z - 1.0);
            let dz = pm / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[k] = -z;
        x[m - 1 - k] = z;
        w[k] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[m - 1 - k] = w[k];
    }
    (x, w)
}

/// Rule on `[a, b]`.
fn rule(a: f64, b: f64, m: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(m);
    let h = 0.5 * (b - a);
    x.iter().zip(&w).map(|(&xi, &wi)| (a + h * (xi + 1.0), h * wi)).collect()
}

fn integrate<F: Fn(f64) -> f64>(nodes: &[(f64, f64)], f: F) -> f64 {
    nodes.iter().map(|&(z, w)| w * f(z)).sum()
}

/// Noise, Gram and control-functional data from tensor quadrature.
struct Quadrature {
    /// Nodes on `[0, π/2] ∪ [π/2, π]` (split at the kink of `|z − π/2|`).
    split: Vec<(f64, f64)>,
    /// Nodes on `[π/4, 3π/4]`.
    inner: Vec<(f64, f64)>,
}

impl Quadrature {
    fn new(points: usize) -> Self {
        let mut split = rule(0.0, FRAC_PI_2, points);
        split.extend(rule(FRAC_PI_2, PI, points));
        Self { split, inner: rule(FRAC_PI_4, 3.0 * FRAC_PI_4, points) }
    }

    fn g1(&self, p: usize, q: usize) -> f64 {
        integrate(&self.split, |z| (-(z - FRAC_PI_2).abs()).exp() * (p as f64 * z).cos() * (q as f64 * z).cos())
    }

    fn g2(&self, p: usize, q: usize) -> f64 {
        integrate(&self.split, |z| (-z).exp() * (p as f64 * z).cos() * (q as f64 * z).cos())
    }

    fn cos_product(&self, p: usize, q: usize) -> f64 {
        integrate(&self.split, |z| (p as f64 * z).cos() * (q as f64 * z).cos())
    }

    fn inner_cos(&self, k: usize) -> f64 {
        integrate(&self.inner, |z| (k as f64 * z).cos())
    }

    fn noise(&self, modes: &[(usize, usize)], nu: f64) -> DMatrix<f64> {
        let n = modes.len();
        DMatrix::from_fn(n, n, |a, b| {
            let (i1, j1) = modes[a];
            let (i2, j2) = modes[b];
            let scale = (norm_sq(i1, j1) * norm_sq(i2, j2)).sqrt();
            nu * self.g1(i1, i2) * self.g2(j1, j2) / scale
        })
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

const SELF_CHECK: f64 = 1e-10;

/// Builds `(A, N₁, B, C)` with `K = [1]`, self-checking the quadrature.
pub fn build_heat_system(cfg: &HeatBenchmarkConfig) -> Result<StochasticSystem> {
    cfg.validate()?;
    let modes = modes(cfg.n);
    let n = modes.len();
    let a = DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            let (i, j) = modes[r];
            -cfg.alpha * (i * i + j * j) as f64
        } else {
            0.0
        }
    });
    let b = DMatrix::from_fn(n, 1, |k, _| {
        let (i, j) = modes[k];
        inner_cos_integral(i) * inner_cos_integral(j) / norm_sq(i, j).sqrt()
    });
    let pref = 4.0 / (3.0 * PI * PI);
    let c = DMatrix::from_fn(1, n, |_, k| {
        let (i, j) = modes[k];
        let full = full_cos_integral(i) * full_cos_integral(j) / norm_sq(i, j).sqrt();
        pref * (full - b[k])
    });

    let quad = Quadrature::new(cfg.quad_points);
    let fine = Quadrature::new(2 * cfg.quad_points);
    let n1 = quad.noise(&modes, cfg.nu);
    let n1_fine = fine.noise(&modes, cfg.nu);
    let drift = max_abs(&(&n1 - &n1_fine));
    if drift > SELF_CHECK * max_abs(&n1).max(f64::MIN_POSITIVE) {
        return Err(Error::Accuracy(format!("noise coupling quadrature not converged (change {drift:.3e})")));
    }
    if max_abs(&(&n1 - n1.transpose())) > 1e-12 * max_abs(&n1).max(f64::MIN_POSITIVE) {
        return Err(Error::Accuracy("noise coupling is not symmetric".into()));
    }
    let gram = DMatrix::from_fn(n, n, |r, s| {
        let (i1, j1) = modes[r];
        let (i2, j2) = modes[s];
        quad.cos_product(i1, i2) * quad.cos_product(j1, j2) / (norm_sq(i1, j1) * norm_sq(i2, j2)).sqrt()
    });
    let ortho = max_abs(&(gram - DMatrix::<f64>::identity(n, n)));
    if ortho > SELF_CHECK {
        return Err(Error::Accuracy(format!("basis Gram matrix deviates from I by {ortho:.3e}")));
    }
    for (k, &(i, j)) in modes.iter().enumerate() {
        let bq = quad.inner_cos(i) * quad.inner_cos(j) / norm_sq(i, j).sqrt();
        if (bq - b[k]).abs() > SELF_CHECK * max_abs(&b) {
            return Err(Error::Accuracy(format!("control functional mismatch at mode ({i}, {j})")));
        }
        let fq = quad.cos_product(i, 0) * quad.cos_product(j, 0) / norm_sq(i, j).sqrt();
        let cq = pref * (fq - bq);
        if (cq - c[k]).abs() > SELF_CHECK * max_abs(&c).max(f64::MIN_POSITIVE) {
            return Err(Error::Accuracy(format!("output functional mismatch at mode ({i}, {j})")));
        }
    }
    StochasticSystem::with_unit_noise(a, n1, b, c)
}

/// `u(t) = cos(5t)/(t+1)`.
pub fn reference_input(t: f64) -> f64 {
    (5.0 * t).cos() / (t + 1.0)
}

pub fn sample_reference_input(grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&t| reference_input(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `∫_0^π e^{−z} cos(pz) cos(qz) dz` by the product-to-sum identity.
    fn g2_closed(p: usize, q: usize) -> f64 {
        let term = |w: f64| (1.0 - (-PI).exp() * (w * PI).cos()) / (1.0 + w * w);
        0.5 * (term(p as f64 - q as f64) + term((p + q) as f64))
    }

    /// `∫_0^π e^{−|z−π/2|} cos(pz) cos(qz) dz` via `∫_0^{π/2} e^{-s}cos(w(π/2 ± s))`.
    fn g1_closed(p: usize, q: usize) -> f64 {
        // ∫_0^{L} e^{−s} cos(w s + φ) ds for L = π/2.
        let piece = |w: f64, phi: f64| {
            let l = FRAC_PI_2;
            let f = |s: f64| (-s).exp() * (w * (w * s + phi).sin() - (w * s + phi).cos()) / (1.0 + w * w);
            f(l) - f(0.0)
        };
        let half = |w: f64| {
            let phi = w * FRAC_PI_2;
            // z = π/2 + s and z = π/2 − s.
            piece(w, phi) + piece(-w, phi)
        };
        0.5 * (half(p as f64 - q as f64) + half((p + q) as f64))
    }

    #[test]
    fn mode_ordering_and_multiplicities() {
        let m = modes(10);
        assert_eq!(&m[..6], &[(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (2, 0)]);
        let cfg = HeatBenchmarkConfig { n: 36, ..Default::default() };
        let sys = build_heat_system(&cfg).unwrap();
        let d: Vec<f64> = sys.a().diagonal().iter().copied().collect();
        assert_eq!(&d[..4], &[0.0, -0.2, -0.2, -0.4]);
        let count = |s: usize| modes(36).iter().filter(|&&(i, j)| i * i + j * j == s).count();
        assert_eq!(count(1), 2);
        assert_eq!(count(25), 4);
        assert_eq!(count(0), 1);
    }

    #[test]
    fn first_mode_integrals() {
        let sys = build_heat_system(&HeatBenchmarkConfig { n: 5, ..Default::default() }).unwrap();
        assert!((sys.b()[0] - FRAC_PI_4).abs() < 1e-15);
        assert!((sys.c()[0] - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let m14: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((m14 - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn noise_entries_match_closed_forms() {
        let q = Quadrature::new(64);
        for p in 0..7 {
            for r in 0..7 {
                assert!((q.g2(p, r) - g2_closed(p, r)).abs() < 1e-13, "g2 {p} {r}");
                assert!((q.g1(p, r) - g1_closed(p, r)).abs() < 1e-13, "g1 {p} {r}");
            }
        }
    }

    #[test]
    fn noise_is_symmetric() {
        let sys = build_heat_system(&HeatBenchmarkConfig::default()).unwrap();
        let n1 = &sys.noise()[0];
        assert!(max_abs(&(n1 - n1.transpose())) <= 1e-12 * max_abs(n1));
    }

    #[test]
    fn reference_input_values() {
        assert_eq!(reference_input(0.0), 1.0);
        assert!((reference_input(PI / 5.0) + 1.0 / (1.0 + PI / 5.0)).abs() < 1e-15);
        // ∫_T^∞ u² ≤ ∫_T^∞ (t+1)^{-2} ≤ 1/T, checked on a truncated grid.
        let t0 = 4.0;
        let (x, w) = gauss_legendre(64);
        let tail: f64 = (0..400)
            .map(|k| {
                let (a, b) = (t0 + k as f64 * 0.25, t0 + (k + 1) as f64 * 0.25);
                x.iter().zip(&w).map(|(xi, wi)| 0.125 * wi * reference_input(a + 0.5 * (b - a) * (xi + 1.0)).powi(2)).sum::<f64>()
            })
            .sum();
        assert!(tail <= 1.0 / t0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(build_heat_system(&HeatBenchmarkConfig { n: 0, ..Default::default() }).is_err());
        assert!(build_heat_system(&HeatBenchmarkConfig { alpha: 0.0, ..Default::default() }).is_err());
        assert!(build_heat_system(&HeatBenchmarkConfig { quad_points: 8, ..Default::default() }).is_err());
    }
}

//! Poincaré constants, Rayleigh–Ritz lower bounds, converse weighted
//! Poincaré witnesses and Poincaré-stability records.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::clt::{ExperimentRecord, RecordKind};
use crate::error::{precondition, Error, Result};
use crate::expr::Expression;
use crate::galerkin::{basis_rule, galerkin_solve, scalar_stiffness, PolyBasis, Reference};
use crate::measures::{moments, MeasureSpec};
use crate::quadrature::{measure_rule_stretched, truncate_support, IntegrationConfig};

/// Relative change under grid doubling accepted as converged.
pub const CONVERGENCE_GAP: f64 = 1e-4;
const START_NODES: usize = 4097;
const MAX_NODES: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMethod {
    FiniteDifference,
    RayleighRitz,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub cp_estimate: f64,
    pub lambda1: f64,
    pub method: SpectralMethod,
    /// Grid nodes (finite differences) or polynomial degree (Rayleigh–Ritz).
    pub size: usize,
    pub convergence_gap: f64,
}

/// Symmetric tridiagonal matrix `D^{-1/2} S D^{-1/2}` of the weighted
/// Dirichlet form on a uniform grid.
struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Tridiagonal {
    /// Number of eigenvalues strictly below `x` (Sturm count via LDLᵀ pivots).
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.diag.len() {
            let q_prev = if q == 0.0 { f64::EPSILON * (self.off[i - 1].abs() + 1e-300) } else { q };
            q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / q_prev;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `k`-th smallest eigenvalue (0-based) by bisection.
    fn eigenvalue(&self, k: usize) -> f64 {
        let n = self.diag.len();
        let mut hi = 0.0f64;
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            hi = hi.max(self.diag[i] + r);
        }
        let mut lo = 0.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.count_below(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Second eigenvalue of `∫f'² dν` against `∫f² dν` on an `m`-node grid.
///
/// Stiffness uses the density at interval midpoints and mass the density at
/// nodes with trapezoid weights; every ratio is formed in log space so that
/// far tails do not underflow.
fn lambda1_on_grid(spec: &MeasureSpec, lo: f64, hi: f64, m: usize) -> Result<f64> {
    let h = (hi - lo) / (m - 1) as f64;
    let node = |i: usize| if i + 1 == m { hi } else { lo + i as f64 * h };
    let mut lp: Vec<f64> = (0..m).map(|i| spec.log_density(&[node(i)])).collect();
    // closed ends of affine images can round to just outside the support
    for (i, inward) in [(0, 1e-9 * h), (m - 1, -1e-9 * h)] {
        if !lp[i].is_finite() {
            lp[i] = spec.log_density(&[node(i) + inward]);
        }
    }
    let lmid: Vec<f64> = (0..m - 1).map(|i| spec.log_density(&[lo + (i as f64 + 0.5) * h])).collect();
    let lw: Vec<f64> = (0..m).map(|i| if i == 0 || i + 1 == m { (0.5 * h).ln() } else { h.ln() }).collect();
    for (i, v) in lmid.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::KernelUndefined(format!(
                "density vanishes inside the support near x = {}",
                lo + (i as f64 + 0.5) * h
            )));
        }
    }
    if lp.iter().any(|v| !v.is_finite()) {
        return Err(Error::KernelUndefined("density vanishes at a grid node".into()));
    }
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m - 1];
    for i in 0..m - 1 {
        // a = p_mid / h coupling nodes i and i+1
        let la = lmid[i] - h.ln();
        diag[i] += (la - lp[i] - lw[i]).exp();
        diag[i + 1] += (la - lp[i + 1] - lw[i + 1]).exp();
        off[i] = -(la - 0.5 * (lp[i] + lw[i] + lp[i + 1] + lw[i + 1])).exp();
    }
    let t = Tridiagonal { diag, off };
    let l1 = t.eigenvalue(1);
    if !(l1 > 0.0 && l1.is_finite()) {
        return Err(Error::Eigen(format!("second eigenvalue {l1} on {m} nodes")));
    }
    Ok(l1)
}

/// Poincaré constant of a one-dimensional measure from the finite-difference
/// spectral gap, refined by grid doubling until the relative change is
/// below [`CONVERGENCE_GAP`].
pub fn poincare_constant_1d(spec: &MeasureSpec, m: usize) -> Result<SpectralReport> {
    if spec.dim() != 1 {
        return Err(precondition("finite-difference Poincaré constants are one-dimensional"));
    }
    // the gap of exponential-type tails is the bottom of an essential
    // spectrum, so the truncated problem converges only like 1/R²
    let mass_tol = if spec.heavy_tailed() { 1e-12 } else { 1e-300 };
    let (mut lo, mut hi) = truncate_support(spec, mass_tol)?[0];
    let interior: Vec<f64> = spec.kinks()[0].iter().copied().filter(|&k| k > lo && k < hi).collect();
    let mut m = m.max(START_NODES);
    if interior.len() == 1 {
        let c = interior[0];
        let half = (c - lo).max(hi - c);
        lo = c - half;
        hi = c + half;
    }
    if m % 2 == 0 {
        m += 1;
    }
    let mut prev = lambda1_on_grid(spec, lo, hi, m)?;
    loop {
        let next_m = 2 * m - 1;
        if next_m > MAX_NODES {
            log::warn!("Poincaré estimate for {} not converged at {m} nodes", spec.name());
            return Ok(SpectralReport {
                cp_estimate: 1.0 / prev,
                lambda1: prev,
                method: SpectralMethod::FiniteDifference,
                size: m,
                convergence_gap: f64::NAN,
            });
        }
        let cur = lambda1_on_grid(spec, lo, hi, next_m)?;
        let gap = ((cur - prev) / cur).abs();
        m = next_m;
        if gap < CONVERGENCE_GAP {
            return Ok(SpectralReport {
                cp_estimate: 1.0 / cur,
                lambda1: cur,
                method: SpectralMethod::FiniteDifference,
                size: m,
                convergence_gap: gap,
            });
        }
        prev = cur;
    }
}

/// `max Var_ν(f) / ∫|∇f|² dν` over the span of `basis`; never exceeds Cp.
pub fn rayleigh_variational_bound(spec: &MeasureSpec, basis: &PolyBasis, cfg: &IntegrationConfig) -> Result<f64> {
    // the basis is ν-orthonormal and mean-zero, so the variance form is the identity
    let a = scalar_stiffness(spec, basis, cfg)?;
    let eig = SymmetricEigen::new(a);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::IllConditioned { cond: f64::INFINITY, hint: "stiffness form is singular on the span".into() });
    }
    Ok(1.0 / min)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConverseWeightReport {
    /// `∫|x|² ω⁻¹ dν`.
    pub bound: f64,
    /// `max inf_c ∫(f − c)² ω dν / ∫|∇f|² dν` over the span; values above 1
    /// refute the weighted inequality.
    pub witness_ratio: f64,
}

/// Relative change of `∫|x|²ω⁻¹ dν` between the default and a doubled box
/// above which the integral is declared divergent.
const DIVERGENCE_TOL: f64 = 1e-4;

pub fn converse_weight_bound(
    spec: &MeasureSpec,
    weight: &Expression,
    basis: &PolyBasis,
    cfg: &IntegrationConfig,
) -> Result<ConverseWeightReport> {
    if weight.dim() != spec.dim() {
        return Err(Error::SizeMismatch("weight and measure dimensions differ".into()));
    }
    let inv = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / weight.eval(x);
    let near = measure_rule_stretched(spec, cfg, 1.0)?.integrate(inv);
    let far = measure_rule_stretched(spec, cfg, 2.0)?.integrate(inv);
    if !near.is_finite() || !far.is_finite() || (far - near).abs() > DIVERGENCE_TOL * far.abs().max(1e-300) {
        return Err(Error::DivergentMoment(format!(
            "∫|x|²/ω dν does not settle under box doubling ({near:e} vs {far:e})"
        )));
    }
    let k = basis.len();
    let rule = basis_rule(spec, basis, cfg)?;
    let len = k * k + k + 1;
    let sums = rule.integrate_vec(len, |x, out| {
        let w = weight.eval(x);
        let (v, _) = basis.eval(x);
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = w * v[a] * v[b];
            }
            out[k * k + a] = w * v[a];
        }
        out[k * k + k] = w;
    });
    let omega = sums[k * k + k];
    let mut form = DMatrix::from_fn(k, k, |a, b| sums[a * k + b] - sums[k * k + a] * sums[k * k + b] / omega);
    form = (&form + form.transpose()) * 0.5;
    let a = scalar_stiffness(spec, basis, cfg)?;
    let chol = Cholesky::new(a).ok_or_else(|| Error::IllConditioned {
        cond: f64::INFINITY,
        hint: "stiffness form is singular on the span".into(),
    })?;
    let l = chol.l();
    let li = l.solve_lower_triangular(&DMatrix::identity(k, k)).ok_or_else(|| Error::SolveFailed("triangular inverse".into()))?;
    let reduced = &li * form * li.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let witness = SymmetricEigen::new(reduced).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConverseWeightReport { bound: far, witness_ratio: witness })
}

/// `max (∫x·f dν)² / ∫‖∇f‖² dν` over vector fields in the span, which is
/// the Galerkin energy `bᵀA⁻¹b`.
pub fn condition_c_estimate(spec: &MeasureSpec, degree: u32, cfg: &IntegrationConfig) -> Result<f64> {
    Ok(galerkin_solve(spec, degree, &Reference::Gaussian, cfg)?.energy)
}

/// Tolerance on `∫|x|² dν = d` for stability records.
pub const NORMALIZATION_TOL: f64 = 1e-6;
/// Relative slack of stability records.
pub const STABILITY_TOL: f64 = 1e-6;

fn check_normalized(spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<(usize, f64)> {
    let mom = moments(spec, cfg)?;
    let dim = spec.dim();
    if let Some(m) = mom.mean.iter().find(|m| m.abs() > NORMALIZATION_TOL) {
        return Err(Error::NotCentered(*m));
    }
    let second_moment = mom.second_moment;
    if (second_moment - dim as f64).abs() > NORMALIZATION_TOL * dim as f64 {
        return Err(Error::Normalization(format!("∫|x|² dν = {second_moment} but the dimension is {dim}")));
    }
    Ok((dim, second_moment))
}

/// `Cp ≥ 1 + W₂(ν, γ)²/d`.
pub fn stability_check_poincare(spec: &MeasureSpec, cp: f64, w2_to_gamma: f64, cfg: &IntegrationConfig) -> Result<ExperimentRecord> {
    let (dim, _) = check_normalized(spec, cfg)?;
    Ok(ExperimentRecord::new(
        "poincare-stability",
        RecordKind::Lower,
        1,
        cp,
        1.0 + w2_to_gamma * w2_to_gamma / dim as f64,
        STABILITY_TOL,
    ))
}

/// `(1/d)∫|x|²ω⁻¹ dν ≥ 1 + W₂(ν, γ)²/d`.
pub fn stability_check_weighted(
    spec: &MeasureSpec,
    weighted_integral: f64,
    w2_to_gamma: f64,
    cfg: &IntegrationConfig,
) -> Result<ExperimentRecord> {
    let (dim, _) = check_normalized(spec, cfg)?;
    Ok(ExperimentRecord::new(
        "weighted-stability",
        RecordKind::Lower,
        1,
        weighted_integral / dim as f64,
        1.0 + w2_to_gamma * w2_to_gamma / dim as f64,
        STABILITY_TOL,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::build_basis;
    use crate::measures::catalog;
    use std::f64::consts::PI;

    fn cfg() -> IntegrationConfig {
        IntegrationConfig::default()
    }

    #[test]
    fn catalog_constants() {
        let s3 = 3f64.sqrt();
        for (spec, cp, tol) in [
            (catalog("gaussian", &[1.0]).unwrap(), 1.0, 1e-3),
            (catalog("uniform", &[-s3, s3]).unwrap(), 12.0 / (PI * PI), 1e-3),
            (catalog("laplace", &[0.5f64.sqrt()]).unwrap(), 2.0, 1e-2),
        ] {
            let r = poincare_constant_1d(&spec, 0).unwrap();
            assert!((r.cp_estimate - cp).abs() < tol, "{}: {}", spec.name(), r.cp_estimate);
            assert!(r.convergence_gap < CONVERGENCE_GAP);
        }
    }

    #[test]
    fn translation_and_scaling() {
        let base = catalog("gaussian-mixture", &[0.5, -0.8, 0.5, 0.5, 0.8, 0.5]).unwrap();
        let cp = poincare_constant_1d(&base, 0).unwrap().cp_estimate;
        let shifted = poincare_constant_1d(&base.translate(&[0.7]).unwrap(), 0).unwrap().cp_estimate;
        assert!(((shifted - cp) / cp).abs() < 1e-3);
        for a in [0.5, 2.0] {
            let scaled = poincare_constant_1d(&base.scale(a).unwrap(), 0).unwrap().cp_estimate;
            assert!(((scaled - a * a * cp) / (a * a * cp)).abs() < 1e-3, "a={a}");
        }
    }

    #[test]
    fn rayleigh_bounds() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let b = build_basis(&g, 1, &cfg()).unwrap();
        assert!((rayleigh_variational_bound(&g, &b, &cfg()).unwrap() - 1.0).abs() < 1e-10);

        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        let fd = poincare_constant_1d(&u, 0).unwrap().cp_estimate;
        let mut last = 0.0;
        for n in 1..=6 {
            let b = build_basis(&u, n, &cfg()).unwrap();
            let r = rayleigh_variational_bound(&u, &b, &cfg()).unwrap();
            assert!(r >= last - 1e-10);
            assert!(r <= fd + 1e-3);
            if n == 4 {
                assert!(r > 1.19 && r <= 12.0 / (PI * PI), "{r}");
            }
            last = r;
        }

        // linear span: largest covariance eigenvalue
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g2 = MeasureSpec::gaussian(vec![0.0, 0.0], cov.clone()).unwrap();
        let b = build_basis(&g2, 1, &cfg()).unwrap();
        let top = SymmetricEigen::new(cov).eigenvalues.max();
        assert!((rayleigh_variational_bound(&g2, &b, &cfg()).unwrap() - top).abs() < 1e-8);
    }

    #[test]
    fn converse_weights() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let b = build_basis(&g, 3, &cfg()).unwrap();
        let one = Expression::parse("1", 1).unwrap();
        let r = converse_weight_bound(&g, &one, &b, &cfg()).unwrap();
        assert!(r.witness_ratio <= 1.0 + 1e-9);
        assert!((r.bound - 1.0).abs() < 1e-8);
        let two = Expression::parse("2", 1).unwrap();
        let r = converse_weight_bound(&g, &two, &b, &cfg()).unwrap();
        assert!(r.witness_ratio > 1.0);

        let s = catalog("subexponential", &[0.5, 1.0]).unwrap();
        let bs = build_basis(&s, 1, &cfg()).unwrap();
        let fine = Expression::parse("1/(1 + abs(x1))", 1).unwrap();
        assert!(converse_weight_bound(&s, &fine, &bs, &cfg()).unwrap().bound.is_finite());
        let bad = Expression::parse("exp(-abs(x1))", 1).unwrap();
        assert!(matches!(converse_weight_bound(&s, &bad, &bs, &cfg()), Err(Error::DivergentMoment(_))));
    }

    #[test]
    fn condition_constant() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        assert!((condition_c_estimate(&g, 2, &cfg()).unwrap() - 1.0).abs() < 1e-10);
        let annuli = catalog("uniform-annuli", &[0.5, 1.0, 1.5, 2.0]).unwrap();
        for n in 1..=4 {
            assert!(condition_c_estimate(&annuli, n, &cfg()).unwrap().is_finite());
        }
        let shifted = catalog("laplace", &[1.0]).unwrap().translate(&[0.3]).unwrap();
        assert!(matches!(condition_c_estimate(&shifted, 2, &cfg()), Err(Error::NotCentered(_))));
    }

    #[test]
    fn stability_records() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let r = stability_check_poincare(&g, 1.0, 0.0, &cfg()).unwrap();
        assert!(r.pass);
        let wide = catalog("gaussian", &[2.0]).unwrap();
        assert!(matches!(stability_check_poincare(&wide, 2.0, 0.0, &cfg()), Err(Error::Normalization(_))));
    }
}

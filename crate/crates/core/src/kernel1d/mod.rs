//! Exact one-dimensional Stein kernels `τ(x) = p(x)⁻¹ ∫ₓ^∞ y p(y) dy`,
//! exact 1D discrepancies, and the weak-form residual oracle.

mod grid;
mod residual;

use std::sync::Arc;

use serde::Serialize;

use crate::clt::NeighborRegression;
use crate::error::{Error, Result};
use crate::galerkin::GalerkinSolution;
use crate::measures::MeasureSpec;
use crate::quadrature::{cum4_intervals, Grid1D, IntegrationConfig};

pub use grid::{GridDensity1D, DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
pub(crate) use residual::residual_on_rule;
pub use residual::{weak_residual, weak_residual_report, ResidualReport, Rhs, TestBank, TestFunction};

/// Relative density level below which τ is extrapolated instead of divided out.
pub const DENSITY_MASK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSource {
    ClosedForm,
    Galerkin,
    Propagated,
    Constant,
}

#[derive(Clone)]
enum KernelRepr {
    Grid { grid: Grid1D, values: Vec<f64> },
    Constant(Vec<f64>),
    Galerkin(Arc<GalerkinSolution>),
    Neighbors(Arc<NeighborRegression>),
}

/// Matrix-valued map `x ↦ τ(x)`, evaluated as a row-major d×d array.
#[derive(Clone)]
pub struct KernelField {
    dim: usize,
    source: KernelSource,
    repr: KernelRepr,
}

impl std::fmt::Debug for KernelField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelField").field("dim", &self.dim).field("source", &self.source).finish()
    }
}

impl KernelField {
    pub fn constant(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::SizeMismatch(format!("{} entries for a {dim}x{dim} kernel", matrix.len())));
        }
        Ok(Self { dim, source: KernelSource::Constant, repr: KernelRepr::Constant(matrix) })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Self { dim, source: KernelSource::Constant, repr: KernelRepr::Constant(m) }
    }

    /// Scalar kernel tabulated on a grid, linearly interpolated between nodes.
    pub fn tabulated(grid: Grid1D, values: Vec<f64>, source: KernelSource) -> Result<Self> {
        if values.len() != grid.m {
            return Err(Error::GridMismatch(format!("{} values on a {}-node grid", values.len(), grid.m)));
        }
        Ok(Self { dim: 1, source, repr: KernelRepr::Grid { grid, values } })
    }

    pub(crate) fn from_galerkin(sol: Arc<GalerkinSolution>) -> Self {
        Self { dim: sol.basis.dim, source: KernelSource::Galerkin, repr: KernelRepr::Galerkin(sol) }
    }

    pub(crate) fn from_neighbors(reg: Arc<NeighborRegression>) -> Self {
        Self { dim: reg.dim(), source: KernelSource::Propagated, repr: KernelRepr::Neighbors(reg) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> KernelSource {
        self.source
    }

    /// Grid and node values for tabulated scalar kernels.
    pub fn grid_values(&self) -> Option<(&Grid1D, &[f64])> {
        match &self.repr {
            KernelRepr::Grid { grid, values } => Some((grid, values)),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            KernelRepr::Grid { grid, values } => out[0] = interp_linear(grid, values, x[0]),
            KernelRepr::Constant(m) => out.copy_from_slice(m),
            KernelRepr::Galerkin(sol) => sol.jacobian_into(x, out),
            KernelRepr::Neighbors(reg) => reg.predict_into(x, out),
        }
    }
}

/// Linear interpolation on a uniform grid, clamped to the end values.
pub(crate) fn interp_linear(grid: &Grid1D, values: &[f64], x: f64) -> f64 {
    let h = grid.spacing();
    let t = (x - grid.lo) / h;
    if !(t > 0.0) {
        return values[0];
    }
    let i = t.floor() as usize;
    if i + 1 >= grid.m {
        return values[grid.m - 1];
    }
    let f = t - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

/// Squared Stein discrepancy of a kernel and its ingredients.
#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyReport {
    /// `∫‖τ − Id‖²_HS dν`.
    pub s_squared: f64,
    /// `∫‖τ‖²_HS dν`.
    pub second_moment_tau: f64,
    pub bound_value: Option<f64>,
    pub bound_name: String,
    pub residual_max: f64,
    /// Galerkin only: residual against the basis span.
    pub in_span_residual: Option<f64>,
}

impl DiscrepancyReport {
    /// Attaches `(Cp − 2)∫|x|² + d`, which is `d(Cp − 1)` for isotropic measures.
    pub fn with_poincare_bound(mut self, cp: f64, second_moment: f64, dim: usize) -> Self {
        self.bound_value = Some((cp - 2.0) * second_moment + dim as f64);
        self.bound_name = "(Cp-2)E|x|^2+d".into();
        self
    }

    pub fn bound_holds(&self, rel_tol: f64) -> Option<bool> {
        self.bound_value.map(|b| self.s_squared <= b + rel_tol * b.abs().max(1e-12))
    }
}

/// Closed-form kernel tabulated on the density grid.
///
/// The tail integral `∫ₓ^∞ y p(y) dy` is accumulated with compensated sums
/// from the right for `x ≥ 0` and as minus the left accumulation for `x < 0`,
/// so both ends keep their small values to full relative precision.
pub fn closed_form_kernel(p: &GridDensity1D) -> Result<KernelField> {
    if !p.is_normalized() {
        return Err(Error::Normalization("closed-form kernel needs a normalized density".into()));
    }
    let mean = p.mean();
    if mean.abs() > 1e-6 {
        return Err(Error::NotCentered(mean.abs()));
    }
    let grid = *p.grid();
    let m = grid.m;
    let h = grid.spacing();
    let values = p.values();
    let pmax = values.iter().cloned().fold(0.0, f64::max);
    let floor = DENSITY_MASK * pmax;
    let first = values.iter().position(|&v| v > floor).ok_or_else(|| Error::KernelUndefined("density is zero".into()))?;
    let last = values.iter().rposition(|&v| v > floor).unwrap();
    if let Some(k) = (first..=last).find(|&i| values[i] <= 0.0) {
        return Err(Error::KernelUndefined(format!(
            "density vanishes at interior node x = {} (disconnected support)",
            grid.node(k)
        )));
    }

    let xs = grid.nodes();
    let yp: Vec<f64> = xs.iter().zip(values).map(|(x, v)| x * v).collect();
    let pieces = cum4_intervals(&yp, h, p.breaks());
    let right = compensated_suffix(&pieces);
    let left = compensated_prefix(&pieces);

    let mut tau = vec![f64::NAN; m];
    for i in 0..m {
        if values[i] > floor {
            let tail = if xs[i] >= 0.0 { right[i] } else { -left[i] };
            tau[i] = (tail / values[i]).max(0.0);
        }
    }
    fill_masked(&mut tau, &xs);
    KernelField::tabulated(grid, tau, KernelSource::ClosedForm)
}

/// `out[i] = Σ_{j ≥ i} pieces[j]`, with `out[m-1] = 0`.
fn compensated_suffix(pieces: &[f64]) -> Vec<f64> {
    let m = pieces.len() + 1;
    let mut out = vec![0.0; m];
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for j in (0..pieces.len()).rev() {
        let y = pieces[j] - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
        out[j] = s;
    }
    out
}

/// `out[i] = Σ_{j < i} pieces[j]`, with `out[0] = 0`.
fn compensated_prefix(pieces: &[f64]) -> Vec<f64> {
    let m = pieces.len() + 1;
    let mut out = vec![0.0; m];
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for j in 0..pieces.len() {
        let y = pieces[j] - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
        out[j + 1] = s;
    }
    out
}

/// Replaces NaN entries by linear interpolation between, or extrapolation
/// from, the nearest two defined nodes; results are clamped at zero.
fn fill_masked(tau: &mut [f64], xs: &[f64]) {
    let defined: Vec<usize> = (0..tau.len()).filter(|&i| tau[i].is_finite()).collect();
    if defined.is_empty() {
        return;
    }
    let line = |a: usize, b: usize, x: f64, t: &[f64]| -> f64 {
        if a == b {
            return t[a];
        }
        t[a] + (t[b] - t[a]) * (x - xs[a]) / (xs[b] - xs[a])
    };
    let (f0, f1) = (defined[0], *defined.get(1).unwrap_or(&defined[0]));
    let (l1, l0) = (*defined.iter().rev().nth(1).unwrap_or(&defined[0]), *defined.last().unwrap());
    let snapshot = tau.to_vec();
    for i in 0..tau.len() {
        if tau[i].is_finite() {
            continue;
        }
        let v = if i < f0 {
            line(f0, f1, xs[i], &snapshot)
        } else if i > l0 {
            line(l1, l0, xs[i], &snapshot)
        } else {
            let k = defined.partition_point(|&j| j < i);
            line(defined[k - 1], defined[k], xs[i], &snapshot)
        };
        tau[i] = v.max(0.0);
    }
}

/// Exact discrepancy `∫(τ − 1)² p` of a tabulated kernel on the density grid.
pub fn discrepancy_1d(tau: &KernelField, p: &GridDensity1D) -> Result<DiscrepancyReport> {
    let (grid, values) = tau
        .grid_values()
        .ok_or_else(|| Error::GridMismatch("kernel is not tabulated on a grid".into()))?;
    if !grid.same_as(p.grid()) {
        return Err(Error::GridMismatch(format!(
            "kernel grid [{}, {}]x{} differs from density grid [{}, {}]x{}",
            grid.lo,
            grid.hi,
            grid.m,
            p.grid().lo,
            p.grid().hi,
            p.grid().m
        )));
    }
    let s2 = p.integrate_nodes(|i, _| (values[i] - 1.0).powi(2));
    let t2 = p.integrate_nodes(|i, _| values[i] * values[i]);
    let spec = MeasureSpec::tabulated(p.clone());
    let residual = weak_residual(tau, &spec, &TestBank::standard(1), &IntegrationConfig::default())?;
    Ok(DiscrepancyReport {
        s_squared: s2,
        second_moment_tau: t2,
        bound_value: None,
        bound_name: String::new(),
        residual_max: residual,
        in_span_residual: None,
    })
}

/// `∫τ dν − ∫x² dν`; zero for every Stein kernel.
pub fn moment_identity_gap(tau: &KernelField, p: &GridDensity1D) -> Result<f64> {
    let (grid, values) = tau
        .grid_values()
        .ok_or_else(|| Error::GridMismatch("kernel is not tabulated on a grid".into()))?;
    if !grid.same_as(p.grid()) {
        return Err(Error::GridMismatch("kernel and density grids differ".into()));
    }
    let t = p.integrate_nodes(|i, _| values[i]);
    Ok(t - p.second_moment())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::catalog;

    fn grid_of(name: &str, params: &[f64]) -> GridDensity1D {
        let spec = catalog(name, params).unwrap();
        GridDensity1D::from_spec(&spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap()
    }

    fn max_dev_on_core(tau: &KernelField, p: &GridDensity1D, exact: impl Fn(f64) -> f64) -> f64 {
        let (g, v) = tau.grid_values().unwrap();
        let pmax = p.values().iter().cloned().fold(0.0, f64::max);
        (0..g.m)
            .filter(|&i| p.values()[i] > 1e-6 * pmax)
            .map(|i| (v[i] - exact(g.node(i))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gaussian_kernel_is_one() {
        let p = grid_of("gaussian", &[1.0]);
        let tau = closed_form_kernel(&p).unwrap();
        assert!(max_dev_on_core(&tau, &p, |_| 1.0) < 1e-8);
        let rep = discrepancy_1d(&tau, &p).unwrap();
        assert!(rep.s_squared < 1e-8, "{}", rep.s_squared);
    }

    #[test]
    fn closed_forms() {
        let s3 = 3f64.sqrt();
        let u = grid_of("uniform", &[-s3, s3]);
        let tu = closed_form_kernel(&u).unwrap();
        assert!(max_dev_on_core(&tu, &u, |x| (3.0 - x * x) / 2.0) < 1e-8);
        assert!((tu.eval(&[0.0])[0] - 1.5).abs() < 1e-8);

        let e = grid_of("centered-exponential", &[1.0]);
        let te = closed_form_kernel(&e).unwrap();
        assert!(max_dev_on_core(&te, &e, |x| x + 1.0) < 1e-6);

        let l = grid_of("laplace", &[0.5f64.sqrt()]);
        let tl = closed_form_kernel(&l).unwrap();
        assert!(max_dev_on_core(&tl, &l, |x| x.abs() / 2f64.sqrt() + 0.5) < 1e-6);
    }

    #[test]
    fn discrepancy_values() {
        let s3 = 3f64.sqrt();
        for (name, params, expect) in [
            ("gaussian", vec![0.25], (0.25f64 - 1.0).powi(2)),
            ("gaussian", vec![4.0], 9.0),
            ("uniform", vec![-s3, s3], 0.2),
            ("centered-exponential", vec![1.0], 1.0),
            ("laplace", vec![0.5f64.sqrt()], 0.25),
        ] {
            let p = grid_of(name, &params);
            let tau = closed_form_kernel(&p).unwrap();
            let rep = discrepancy_1d(&tau, &p).unwrap();
            assert!((rep.s_squared - expect).abs() < 1e-6 * expect.max(1.0), "{name}: {}", rep.s_squared);
            assert!(moment_identity_gap(&tau, &p).unwrap().abs() < 1e-8, "{name}");
        }
    }

    #[test]
    fn only_the_gaussian_has_zero_discrepancy() {
        let s3 = 3f64.sqrt();
        for (name, params) in [
            ("gaussian", vec![2.0]),
            ("uniform", vec![-s3, s3]),
            ("laplace", vec![0.5f64.sqrt()]),
            ("centered-exponential", vec![1.0]),
            ("gaussian-mixture", vec![0.5, -0.5, 0.75, 0.5, 0.5, 0.75]),
        ] {
            let p = grid_of(name, &params);
            let s2 = discrepancy_1d(&closed_form_kernel(&p).unwrap(), &p).unwrap().s_squared;
            assert!(s2 > 1e-6, "{name}: {s2}");
        }
    }

    #[test]
    fn even_densities_give_even_kernels() {
        for (name, params) in [("laplace", vec![0.8]), ("uniform", vec![-1.0, 1.0]), ("gaussian", vec![3.0])] {
            let p = grid_of(name, &params);
            let tau = closed_form_kernel(&p).unwrap();
            let (g, v) = tau.grid_values().unwrap();
            let pmax = p.values().iter().cloned().fold(0.0, f64::max);
            for i in 0..g.m {
                if p.values()[i] > 1e-8 * pmax {
                    assert!((v[i] - v[g.m - 1 - i]).abs() < 1e-8, "{name} at {}", g.node(i));
                }
            }
        }
    }

    #[test]
    fn scaling_law() {
        let s3 = 3f64.sqrt();
        for (name, params) in [
            ("uniform", vec![-s3, s3]),
            ("laplace", vec![0.5f64.sqrt()]),
            ("gaussian-mixture", vec![0.5, -0.6, 0.64, 0.5, 0.6, 0.64]),
        ] {
            let spec = catalog(name, &params).unwrap();
            let base = GridDensity1D::from_spec(&spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap();
            let tau = closed_form_kernel(&base).unwrap();
            for a in [0.5, 2.0] {
                let scaled = spec.scale(a).unwrap();
                let p = GridDensity1D::from_spec(&scaled, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap();
                let ta = closed_form_kernel(&p).unwrap();
                let (g, v) = ta.grid_values().unwrap();
                let pmax = p.values().iter().cloned().fold(0.0, f64::max);
                for i in (0..g.m).step_by(7) {
                    let x = g.node(i);
                    if p.values()[i] > 1e-6 * pmax && (x / a).abs() < 0.999 * base.grid().hi.abs().min(base.grid().lo.abs()) {
                        let expect = a * a * tau.eval(&[x / a])[0];
                        assert!((v[i] - expect).abs() < 1e-6, "{name} a={a} x={x}: {} vs {expect}", v[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_preconditions() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let shifted = e.translate(&[0.1]).unwrap();
        let p = GridDensity1D::from_spec(&shifted, 4097, 1e-14).unwrap();
        assert!(matches!(closed_form_kernel(&p), Err(Error::NotCentered(_))));

        let g = Grid1D::new(-2.0, 2.0, 401).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|&x| if x.abs() < 0.5 { 0.0 } else { 1.0 }).collect();
        let split = GridDensity1D::from_values(g, vals, vec![]).unwrap();
        assert!(matches!(closed_form_kernel(&split), Err(Error::KernelUndefined(_))));

        let other = grid_of("gaussian", &[1.0]);
        let tau = closed_form_kernel(&grid_of("laplace", &[0.5f64.sqrt()])).unwrap();
        assert!(matches!(discrepancy_1d(&tau, &other), Err(Error::GridMismatch(_))));
    }
}

use std::fmt::Write as _;

use crate::error::{precondition, Error, Result};
use crate::measures::{Family, MeasureSpec};
use crate::quadrature::{cum4_intervals, cum4_weights, ordered_sum, truncate_support, Grid1D};

use super::KernelField;

pub const DEFAULT_GRID_NODES: usize = (1 << 14) + 1;
/// Tail mass dropped when truncating supports for kernel grids.
pub const DEFAULT_GRID_MASS_TOL: f64 = 1e-16;

/// A one-dimensional density tabulated on a uniform grid.
///
/// `breaks` are node indices where the density has a kink; the fourth-order
/// cumulative rule restarts there.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity1D {
    grid: Grid1D,
    values: Vec<f64>,
    cdf: Vec<f64>,
    survival: Vec<f64>,
    weights: Vec<f64>,
    breaks: Vec<usize>,
    normalized: bool,
}

impl GridDensity1D {
    /// Tabulates a one-dimensional measure on its truncated support.
    ///
    /// A single interior kink is placed on the middle node of a symmetric
    /// interval; other interior kinks become breaks when they hit a node.
    pub fn from_spec(spec: &MeasureSpec, m: usize, mass_tol: f64) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(precondition(format!("grid densities are one-dimensional, got d = {}", spec.dim())));
        }
        if let Family::Tabulated(g) = &spec.family {
            return Ok(g.clone());
        }
        let (mut lo, mut hi) = truncate_support(spec, mass_tol)?[0];
        let interior: Vec<f64> = spec.kinks()[0].iter().copied().filter(|&k| k > lo && k < hi).collect();
        let mut m = m.max(5);
        if interior.len() == 1 {
            let c = interior[0];
            let half = (c - lo).max(hi - c);
            lo = c - half;
            hi = c + half;
            if m % 2 == 0 {
                m += 1;
            }
        }
        let grid = Grid1D::new(lo, hi, m)?;
        let breaks: Vec<usize> = interior.iter().filter_map(|&k| grid.node_index(k)).filter(|&i| i > 0 && i + 1 < m).collect();
        let mut values: Vec<f64> = grid.nodes().iter().map(|&x| spec.density(&[x])).collect();
        // closed ends of affine images can round to just outside the support
        let h = grid.spacing();
        for (i, inward) in [(0, 1e-9 * h), (m - 1, -1e-9 * h)] {
            if values[i] == 0.0 {
                values[i] = spec.density(&[grid.node(i) + inward]);
            }
        }
        Self::from_values(grid, values, breaks)
    }

    /// Normalizes nonnegative node values into a density.
    pub fn from_values(grid: Grid1D, values: Vec<f64>, mut breaks: Vec<usize>) -> Result<Self> {
        if values.len() != grid.m {
            return Err(Error::GridMismatch(format!("{} values on a {}-node grid", values.len(), grid.m)));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Normalization(format!("density value {v} is not a nonnegative number")));
        }
        breaks.sort_unstable();
        breaks.dedup();
        breaks.retain(|&b| b > 0 && b + 1 < grid.m);
        let h = grid.spacing();
        let pieces = cum4_intervals(&values, h, &breaks);
        let mass = ordered_sum(&pieces);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Normalization(format!("total mass {mass}")));
        }
        let values: Vec<f64> = values.iter().map(|v| v / mass).collect();
        let pieces: Vec<f64> = pieces.iter().map(|v| v / mass).collect();
        let m = grid.m;
        let mut cdf = vec![0.0; m];
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for j in 0..m - 1 {
            let y = pieces[j] - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
            cdf[j + 1] = s;
        }
        let mut survival = vec![0.0; m];
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for j in (0..m - 1).rev() {
            let y = pieces[j] - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
            survival[j] = s;
        }
        let weights = cum4_weights(m, h, &breaks);
        Ok(Self { grid, values, cdf, survival, weights, breaks, normalized: true })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// `1 − cdf`, accumulated from the right.
    pub fn survival(&self) -> &[f64] {
        &self.survival
    }

    /// Quadrature weights for functions sampled at the nodes.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn breaks(&self) -> &[usize] {
        &self.breaks
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `∫ f(x) p(x) dx` for `f` given per node.
    pub fn integrate_nodes(&self, f: impl Fn(usize, f64) -> f64) -> f64 {
        let terms: Vec<f64> = (0..self.grid.m)
            .map(|i| self.weights[i] * self.values[i] * f(i, self.grid.node(i)))
            .collect();
        ordered_sum(&terms)
    }

    pub fn mean(&self) -> f64 {
        self.integrate_nodes(|_, x| x)
    }

    pub fn second_moment(&self) -> f64 {
        self.integrate_nodes(|_, x| x * x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate_nodes(|_, x| (x - m) * (x - m))
    }

    /// Linear interpolation, zero outside the grid.
    pub fn interp(&self, x: f64) -> f64 {
        if !(x >= self.grid.lo && x <= self.grid.hi) {
            return 0.0;
        }
        super::interp_linear(&self.grid, &self.values, x)
    }

    /// The same density translated to mean zero.
    pub fn recentered(&self) -> Result<Self> {
        let mu = self.mean();
        let grid = Grid1D::new(self.grid.lo - mu, self.grid.hi - mu, self.grid.m)?;
        Ok(Self { grid, ..self.clone() })
    }

    /// Generalized inverse of the CDF using cubic Hermite interpolation of
    /// the cumulative values. Upper quantiles are inverted from the survival
    /// array so that far-right tails keep their relative precision.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.5 {
            self.quantile_lower(u)
        } else {
            self.quantile_upper(1.0 - u)
        }
    }

    /// `x` with `cdf(x) = u`.
    pub fn quantile_lower(&self, u: f64) -> f64 {
        let m = self.grid.m;
        if !(u > 0.0) {
            return self.grid.lo;
        }
        if u >= self.cdf[m - 1] {
            return self.grid.hi;
        }
        let j = self.cdf.partition_point(|&c| c <= u).saturating_sub(1).min(m - 2);
        let h = self.grid.spacing();
        let t = hermite_invert(self.cdf[j], self.cdf[j + 1], self.values[j], self.values[j + 1], h, u);
        self.grid.node(j) + t * h
    }

    /// `x` with `survival(x) = s`.
    pub fn quantile_upper(&self, s: f64) -> f64 {
        let m = self.grid.m;
        if !(s > 0.0) {
            return self.grid.hi;
        }
        if s >= self.survival[0] {
            return self.grid.lo;
        }
        // survival is nonincreasing: first index with survival < s, minus one
        let j = self.survival.partition_point(|&v| v >= s).saturating_sub(1).min(m - 2);
        let h = self.grid.spacing();
        let t = hermite_invert(-self.survival[j], -self.survival[j + 1], self.values[j], self.values[j + 1], h, -s);
        self.grid.node(j) + t * h
    }

    /// CSV with columns `x,p,cdf,tau`; `tau` is empty without a kernel.
    pub fn to_csv(&self, tau: Option<&KernelField>) -> String {
        let mut out = String::from("x,p,cdf,tau\n");
        for i in 0..self.grid.m {
            let x = self.grid.node(i);
            let t = tau.map(|k| k.eval(&[x])[0].to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", x, self.values[i], self.cdf[i], t);
        }
        out
    }
}

/// Solves `H(t) = target` on `[0, 1]` for the cubic Hermite interpolant with
/// end values `f0, f1` and end slopes `d0, d1` (per unit `x`, spacing `h`).
fn hermite_invert(f0: f64, f1: f64, d0: f64, d1: f64, h: f64, target: f64) -> f64 {
    let eval = |t: f64| {
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let v = h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1;
        let dv = (6.0 * t2 - 6.0 * t) * f0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * d0
            + (-6.0 * t2 + 6.0 * t) * f1
            + (3.0 * t2 - 2.0 * t) * h * d1;
        (v, dv)
    };
    let span = f1 - f0;
    if !(span > 0.0) {
        return 0.5;
    }
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut t = ((target - f0) / span).clamp(0.0, 1.0);
    for _ in 0..100 {
        let (v, dv) = eval(t);
        let r = v - target;
        if r.abs() <= 1e-15 * span.max(target.abs()) {
            break;
        }
        if r > 0.0 {
            b = t;
        } else {
            a = t;
        }
        let next = t - r / dv;
        t = if dv > 0.0 && next > a && next < b { next } else { 0.5 * (a + b) };
        if b - a < 1e-16 {
            break;
        }
    }
    t
}

//! Deterministic integration against measures: Gauss–Legendre panels,
//! truncation boxes, uniform-grid rules and seeded Monte Carlo.

use std::f64::consts::PI;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::expr::Expression;
use crate::measures::{annuli_area, log_sphere_area, ExpressionParams, Family, MeasureSpec};

/// Nodes per parallel work unit. Sums are formed per chunk and then reduced
/// in chunk order, so results do not depend on thread scheduling.
pub(crate) const CHUNK: usize = 4096;

/// Hard cap on tensor nodes.
pub const MAX_NODES: usize = 1 << 20;

/// Uniform grid on `[lo, hi]` with `m` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || m < 2 {
            return Err(precondition(format!("grid needs finite lo < hi and m >= 2, got [{lo}, {hi}], m={m}")));
        }
        Ok(Self { lo, hi, m })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.m {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.node(i)).collect()
    }

    /// Index of the node nearest to `x`, if `x` lies on a node to 1e-9 spacings.
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let t = (x - self.lo) / self.spacing();
        let i = t.round();
        ((t - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.m).then_some(i as usize)
    }

    pub fn same_as(&self, other: &Grid1D) -> bool {
        self.m == other.m && self.lo == other.lo && self.hi == other.hi
    }
}

/// Weighted nodes on an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

impl QuadratureRule {
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// three-term recurrence.
fn gauss_legendre_unit(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            if n == 1 {
                dp = 1.0;
            }
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss–Legendre rule of the given order on `[lo, hi]`.
pub fn legendre_rule(order: usize, lo: f64, hi: f64) -> Result<QuadratureRule> {
    if order == 0 {
        return Err(precondition("legendre rule order must be at least 1"));
    }
    if !(lo < hi) {
        return Err(precondition(format!("legendre rule needs lo < hi, got [{lo}, {hi}]")));
    }
    let (x, w) = gauss_legendre_unit(order);
    let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    Ok(QuadratureRule {
        nodes: x.iter().map(|t| c + r * t).collect(),
        weights: w.iter().map(|v| r * v).collect(),
        exactness_degree: 2 * order - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationMode {
    #[default]
    Tensor,
    #[serde(rename = "mc", alias = "monte-carlo")]
    MonteCarlo,
}

/// Integration settings shared by every numeric module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    pub mode: IntegrationMode,
    /// Gauss–Legendre points per panel; defaults depend on dimension.
    pub points: Option<usize>,
    /// Panels per axis; defaults depend on dimension.
    pub panels: Option<usize>,
    pub mc_samples: usize,
    pub seed: u64,
    pub mass_tol: f64,
    pub tolerance: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            mode: IntegrationMode::Tensor,
            points: None,
            panels: None,
            mc_samples: 200_000,
            seed: 0,
            mass_tol: 1e-10,
            tolerance: 1e-8,
        }
    }
}

impl IntegrationConfig {
    fn axis_params(&self, dim: usize) -> (usize, usize) {
        let (p, k) = match dim {
            1 => (64, 32),
            2 => (24, 16),
            _ => (12, 8),
        };
        (self.points.unwrap_or(p), self.panels.unwrap_or(k))
    }
}

/// Value with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Nodes in ℝ^d with probability weights summing to one.
#[derive(Debug, Clone)]
pub struct MeasureRule {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    raw_mass: f64,
}

impl MeasureRule {
    /// Builds a rule from unnormalized weights, normalizing them.
    pub fn from_raw(dim: usize, nodes: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != dim * weights.len() {
            return Err(Error::SizeMismatch("rule nodes and weights disagree".into()));
        }
        let mass = ordered_sum(&weights);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Normalization(format!("rule carries mass {mass}")));
        }
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(Self { dim, nodes, weights, raw_mass: mass })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Total density mass before normalization.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        let d = self.dim;
        let partial: Vec<f64> = self
            .weights
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, ws)| {
                let base = c * CHUNK;
                let mut acc = 0.0;
                for (k, &w) in ws.iter().enumerate() {
                    if w != 0.0 {
                        let i = base + k;
                        acc += w * f(&self.nodes[i * d..(i + 1) * d]);
                    }
                }
                acc
            })
            .collect();
        ordered_sum(&partial)
    }

    /// Integrates a vector-valued function written into `out` (zeroed before each call).
    pub fn integrate_vec(&self, len: usize, f: impl Fn(&[f64], &mut [f64]) + Sync) -> Vec<f64> {
        let d = self.dim;
        let partial: Vec<Vec<f64>> = self
            .weights
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, ws)| {
                let base = c * CHUNK;
                let mut acc = vec![0.0; len];
                let mut buf = vec![0.0; len];
                for (k, &w) in ws.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let i = base + k;
                    buf.iter_mut().for_each(|v| *v = 0.0);
                    f(&self.nodes[i * d..(i + 1) * d], &mut buf);
                    for (a, b) in acc.iter_mut().zip(&buf) {
                        *a += w * b;
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; len];
        for p in &partial {
            for (a, b) in out.iter_mut().zip(p) {
                *a += b;
            }
        }
        out
    }
}

/// Compensated sum in index order.
pub(crate) fn ordered_sum(v: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for &x in v {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// `z` with `P(|Z| > z) = q` for a standard normal `Z`.
pub(crate) fn gaussian_two_sided_z(q: f64) -> f64 {
    let target = q.max(1e-320).ln();
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let tail = statrs::function::erf::erfc(mid / std::f64::consts::SQRT_2);
        let lt = if tail > 0.0 { tail.ln() } else { f64::NEG_INFINITY };
        if lt > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Axis-aligned box carrying at least `1 - mass_tol` of the mass.
pub fn truncate_support(spec: &MeasureSpec, mass_tol: f64) -> Result<Vec<(f64, f64)>> {
    if !(mass_tol > 0.0 && mass_tol < 1.0) {
        return Err(precondition(format!("mass_tol must lie in (0, 1), got {mass_tol}")));
    }
    let d = spec.dim();
    let ln_tol = mass_tol.ln();
    Ok(match &spec.family {
        Family::Gaussian(g) => {
            let z = gaussian_two_sided_z(mass_tol / d as f64);
            (0..d)
                .map(|i| {
                    let s = g.cov[(i, i)].sqrt();
                    (g.mean[i] - z * s, g.mean[i] + z * s)
                })
                .collect()
        }
        Family::Uniform { a, b } => vec![(*a, *b)],
        Family::Laplace { b } => {
            let r = -b * ln_tol;
            vec![(-r, r)]
        }
        Family::CenteredExponential { lambda } => vec![(-1.0 / lambda, (-1.0 - ln_tol) / lambda)],
        Family::GeneralizedCauchy { beta, log_norm } => {
            let k = 2.0 * beta - d as f64;
            let ln_r = (log_sphere_area(d) - log_norm - ln_tol - k.ln()) / k;
            let r = ln_r.exp().max(1.0);
            vec![(-r, r); d]
        }
        Family::Subexponential { p, .. } => {
            let a = d as f64 / p;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while statrs::function::gamma::gamma_ur(a, hi) > mass_tol {
                hi *= 2.0;
                if hi > 1e6 {
                    return Err(Error::TruncationSweep(60));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if statrs::function::gamma::gamma_ur(a, mid) > mass_tol {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let r = hi.powf(1.0 / p);
            vec![(-r, r); d]
        }
        Family::Product(comps) => {
            let share = mass_tol / comps.len() as f64;
            let mut out = Vec::with_capacity(d);
            for c in comps {
                out.extend(truncate_support(c, share)?);
            }
            out
        }
        Family::GaussianMixture { means, variances, .. } => {
            let z = gaussian_two_sided_z(mass_tol);
            let lo = means.iter().zip(variances).map(|(m, v)| m - z * v.sqrt()).fold(f64::INFINITY, f64::min);
            let hi = means.iter().zip(variances).map(|(m, v)| m + z * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
            vec![(lo, hi)]
        }
        Family::UniformAnnuli { radii } => vec![(-radii[3], radii[3]); 2],
        Family::Expression(e) => e.lower.iter().cloned().zip(e.upper.iter().cloned()).collect(),
        Family::Affine(a) => {
            let base = truncate_support(&a.base, mass_tol)?;
            crate::measures::affine_image_box(a, &base)
        }
        Family::Tabulated(g) => vec![(g.grid().lo, g.grid().hi)],
    })
}

/// Widens the sides of `bx` that are unbounded in the support by `stretch`.
fn stretch_box(spec: &MeasureSpec, bx: &[(f64, f64)], stretch: f64) -> Vec<(f64, f64)> {
    if stretch == 1.0 {
        return bx.to_vec();
    }
    bx.iter()
        .zip(&spec.support().bounds)
        .map(|(&(lo, hi), &(slo, shi))| {
            let (open_lo, open_hi) = (!slo.is_finite(), !shi.is_finite());
            let c = match (open_lo, open_hi) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => hi,
                (false, true) => lo,
                _ => return (lo, hi),
            };
            let nlo = if open_lo { c - (c - lo) * stretch } else { lo };
            let nhi = if open_hi { c + (hi - c) * stretch } else { hi };
            (nlo, nhi)
        })
        .collect()
}

/// Panels inserted on each side of a kink in graded rules.
const GEOMETRIC_LEVELS: i32 = 8;

/// Composite Gauss–Legendre on `[lo, hi]` split at `kinks`. Graded panels
/// follow `x = sinh(u)` so that polynomial tails are resolved.

fn axis_rule(lo: f64, hi: f64, kinks: &[f64], points: usize, panels: usize, graded: bool) -> (Vec<f64>, Vec<f64>) {
    let mut edges: Vec<f64> = if graded {
        let (ulo, uhi) = (lo.asinh(), hi.asinh());
        (0..=panels).map(|j| (ulo + (uhi - ulo) * j as f64 / panels as f64).sinh()).collect()
    } else {
        (0..=panels).map(|j| lo + (hi - lo) * j as f64 / panels as f64).collect()
    };
    edges[0] = lo;
    edges[panels] = hi;
    let span = hi - lo;
    for &k in kinks {
        if k > lo + 1e-12 * span && k < hi - 1e-12 * span && !edges.iter().any(|&e| (e - k).abs() <= 1e-12 * span) {
            edges.push(k);
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if graded {
        // geometric refinement toward interior kinks, where heavy-tailed
        // densities may have unbounded derivatives
        let mut extra = Vec::new();
        for &k in kinks {
            let Some(i) = edges.iter().position(|&e| (e - k).abs() <= 1e-12 * span) else { continue };
            for (nb, sign) in [(i.checked_sub(1), -1.0), (Some(i + 1).filter(|&j| j < edges.len()), 1.0)] {
                if let Some(j) = nb {
                    let gap = (edges[j] - k).abs();
                    extra.extend((1..=GEOMETRIC_LEVELS).map(|l| k + sign * gap * 0.5f64.powi(l)));
                }
            }
        }
        edges.extend(extra);
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let (t, w) = gauss_legendre_unit(points);
    let mut nodes = Vec::with_capacity((edges.len() - 1) * points);
    let mut weights = Vec::with_capacity(nodes.capacity());
    for e in edges.windows(2) {
        let (c, r) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
        for (ti, wi) in t.iter().zip(&w) {
            nodes.push(c + r * ti);
            weights.push(r * wi);
        }
    }
    (nodes, weights)
}

/// Tensor product of per-axis rules; returns flat nodes and product weights.
fn tensor(axes: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = axes.len();
    let total: usize = axes.iter().map(|a| a.0.len()).product();
    if total > MAX_NODES * 4 {
        return Err(Error::QuadratureTolerance { error: f64::NAN, tolerance: f64::NAN, nodes: total });
    }
    let mut nodes = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut w = 1.0;
        for (a, &i) in axes.iter().zip(&idx) {
            nodes.push(a.0[i]);
            w *= a.1[i];
        }
        weights.push(w);
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].0.len() {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok((nodes, weights))
}

fn eval_density_weights(spec: &MeasureSpec, nodes: &[f64], weights: &mut [f64]) {
    let d = spec.dim();
    weights.par_iter_mut().enumerate().for_each(|(i, w)| {
        if *w != 0.0 {
            *w *= spec.density(&nodes[i * d..(i + 1) * d]);
        }
    });
}

/// Unnormalized rule: nodes and `quadrature weight × density`.
fn raw_rule(
    spec: &MeasureSpec,
    ap: (usize, usize),
    mass_tol: f64,
    stretch: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim();
    let (points, panels) = ap;
    match &spec.family {
        Family::Gaussian(g) => {
            let z = gaussian_two_sided_z(mass_tol / d as f64) * stretch;
            let (t, mut w) = axis_rule(-z, z, &[], points, panels, false);
            for (wi, ti) in w.iter_mut().zip(&t) {
                *wi *= (-0.5 * ti * ti).exp() / (2.0 * PI).sqrt();
            }
            let axes = vec![(t, w); d];
            let (zs, weights) = tensor(&axes)?;
            let mut nodes = Vec::with_capacity(zs.len());
            for zr in zs.chunks_exact(d) {
                let x = &g.chol * DVector::from_column_slice(zr) + &g.mean;
                nodes.extend_from_slice(x.as_slice());
            }
            Ok((nodes, weights))
        }
        Family::Product(comps) => {
            let parts = comps
                .iter()
                .map(|c| raw_rule(c, ap, mass_tol / comps.len() as f64, stretch))
                .collect::<Result<Vec<_>>>()?;
            let dims: Vec<usize> = comps.iter().map(|c| c.dim()).collect();
            let counts: Vec<usize> = parts.iter().map(|p| p.1.len()).collect();
            let total: usize = counts.iter().product();
            if total > MAX_NODES * 4 {
                return Err(Error::QuadratureTolerance { error: f64::NAN, tolerance: f64::NAN, nodes: total });
            }
            let mut nodes = Vec::with_capacity(total * d);
            let mut weights = Vec::with_capacity(total);
            let mut idx = vec![0usize; parts.len()];
            for _ in 0..total {
                let mut w = 1.0;
                for (k, p) in parts.iter().enumerate() {
                    let i = idx[k];
                    nodes.extend_from_slice(&p.0[i * dims[k]..(i + 1) * dims[k]]);
                    w *= p.1[i];
                }
                weights.push(w);
                for k in (0..parts.len()).rev() {
                    idx[k] += 1;
                    if idx[k] < counts[k] {
                        break;
                    }
                    idx[k] = 0;
                }
            }
            Ok((nodes, weights))
        }
        Family::Affine(a) => {
            let (base_nodes, weights) = raw_rule(&a.base, ap, mass_tol, stretch)?;
            let nodes = base_nodes.chunks_exact(d).flat_map(|x| a.push(x)).collect();
            Ok((nodes, weights))
        }
        Family::Tabulated(g) => {
            let w: Vec<f64> = g.weights().iter().zip(g.values()).map(|(w, p)| w * p).collect();
            Ok((g.grid().nodes(), w))
        }
        Family::UniformAnnuli { radii } => {
            let angles = 8 * points.max(8);
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            let area = annuli_area(radii);
            for (r0, r1) in [(radii[0], radii[1]), (radii[2], radii[3])] {
                let (rs, rw) = axis_rule(r0, r1, &[], points, (panels / 4).max(2), false);
                for (r, w) in rs.iter().zip(&rw) {
                    for k in 0..angles {
                        let th = 2.0 * PI * k as f64 / angles as f64;
                        nodes.push(r * th.cos());
                        nodes.push(r * th.sin());
                        weights.push(w * r * 2.0 * PI / angles as f64 / area);
                    }
                }
            }
            Ok((nodes, weights))
        }
        _ => {
            let bx = stretch_box(spec, &truncate_support(spec, mass_tol)?, stretch);
            let kinks = spec.kinks();
            let graded = spec.heavy_tailed();
            let axis_panels = if graded { 2 * panels } else { panels };
            let axes: Vec<_> = bx
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| axis_rule(lo, hi, &kinks[i], points, axis_panels, graded))
                .collect();
            let (nodes, mut weights) = tensor(&axes)?;
            eval_density_weights(spec, &nodes, &mut weights);
            Ok((nodes, weights))
        }
    }
}

/// True when tensor quadrature is a poor fit and sampling is used instead.
pub fn prefers_monte_carlo(spec: &MeasureSpec) -> bool {
    spec.dim() >= 3 && spec.heavy_tailed()
}

/// Seeded Monte Carlo rule with equal weights.
pub fn monte_carlo_rule(spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<MeasureRule> {
    let pts = spec.sample(cfg.mc_samples, cfg.seed)?;
    let n = pts.len();
    MeasureRule::from_raw(spec.dim(), pts.data, vec![1.0; n])
}

fn rule_with(spec: &MeasureSpec, cfg: &IntegrationConfig, stretch: f64, refine: usize) -> Result<MeasureRule> {
    if cfg.mode == IntegrationMode::MonteCarlo || spec.dim() > 3 || prefers_monte_carlo(spec) {
        return monte_carlo_rule(spec, cfg);
    }
    let (points, panels) = cfg.axis_params(spec.dim());
    let (nodes, weights) = raw_rule(spec, (points, panels * refine), cfg.mass_tol, stretch)?;
    MeasureRule::from_raw(spec.dim(), nodes, weights)
}

/// Default probability rule for `spec`.
pub fn measure_rule(spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<MeasureRule> {
    rule_with(spec, cfg, 1.0, 1)
}

/// Rule whose unbounded sides are widened by `stretch`.
pub fn measure_rule_stretched(spec: &MeasureSpec, cfg: &IntegrationConfig, stretch: f64) -> Result<MeasureRule> {
    rule_with(spec, cfg, stretch, 1)
}

/// Rule widened until `∫|x|^order` is stable to 1e-12, for integrands with
/// polynomial growth of that order.
pub fn measure_rule_for_order(spec: &MeasureSpec, cfg: &IntegrationConfig, order: u32) -> Result<MeasureRule> {
    let mut rule = measure_rule(spec, cfg)?;
    if cfg.mode == IntegrationMode::MonteCarlo || rule_is_compact(spec) || prefers_monte_carlo(spec) || spec.dim() > 3 {
        return Ok(rule);
    }
    let k = order as f64;
    let moment = |r: &MeasureRule| r.integrate(|x| x.iter().map(|v| v * v).sum::<f64>().powf(0.5 * k));
    let mut prev = moment(&rule);
    let mut last_change = f64::INFINITY;
    let mut stretch = 1.0;
    for _ in 0..40 {
        stretch *= 1.25;
        let next_rule = rule_with(spec, cfg, stretch, 1)?;
        let next = moment(&next_rule);
        let change = (next - prev).abs();
        if change <= 1e-12 * next.abs() {
            return Ok(next_rule);
        }
        // Widening at fixed panel count eventually costs more resolution
        // than it gains in tail mass; stop once the change stops shrinking.
        if change >= last_change {
            log::debug!("{}: box widening stalled at stretch {}", spec.name(), stretch / 1.25);
            return Ok(rule);
        }
        rule = next_rule;
        last_change = change;
        prev = next;
    }
    log::warn!("{}: moment of order {order} did not stabilize under box widening", spec.name());
    Ok(rule)
}

fn rule_is_compact(spec: &MeasureSpec) -> bool {
    spec.support().bounds.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite())
}

/// `∫ f dν` with an error estimate; fails when the estimate exceeds
/// `cfg.tolerance` after refinement up to [`MAX_NODES`].
pub fn integrate(f: impl Fn(&[f64]) -> f64 + Sync, spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<Estimate> {
    if cfg.mode == IntegrationMode::MonteCarlo || spec.dim() > 3 || prefers_monte_carlo(spec) {
        let rule = monte_carlo_rule(spec, cfg)?;
        let mean = rule.integrate(&f);
        let var = rule.integrate(|x| (f(x) - mean).powi(2));
        let n = rule.len() as f64;
        return Ok(Estimate { value: mean, error: (var / (n - 1.0).max(1.0)).sqrt() });
    }
    let d = spec.dim();
    let mut refine = 1;
    let mut coarse = rule_with(spec, cfg, 1.0, refine)?.integrate(&f);
    loop {
        let fine_rule = rule_with(spec, cfg, 1.0, 2 * refine)?;
        let fine = fine_rule.integrate(&f);
        let error = (fine - coarse).abs();
        if error <= cfg.tolerance * fine.abs().max(1.0) && fine.is_finite() {
            return Ok(Estimate { value: fine, error });
        }
        if fine_rule.len() << d > MAX_NODES || !fine.is_finite() {
            return Err(Error::QuadratureTolerance { error, tolerance: cfg.tolerance, nodes: fine_rule.len() });
        }
        coarse = fine;
        refine *= 2;
    }
}

/// Normalization sweep for expression densities: unbounded sides are doubled
/// until the mass changes by less than 1e-10.
pub(crate) fn normalize_expression(
    expr: &Expression,
    bounds: &[(f64, f64)],
    kinks: &[Vec<f64>],
) -> Result<ExpressionParams> {
    let d = bounds.len();
    if d > 3 {
        return Err(precondition("expression measures are limited to d <= 3"));
    }
    let cfg = IntegrationConfig::default();
    let (points, panels) = cfg.axis_params(d);
    let open_lo: Vec<bool> = bounds.iter().map(|b| !b.0.is_finite()).collect();
    let open_hi: Vec<bool> = bounds.iter().map(|b| !b.1.is_finite()).collect();
    let make_box = |r: f64| -> Vec<(f64, f64)> {
        bounds
            .iter()
            .map(|&(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
                (true, true) => (lo, hi),
                (true, false) => (lo, lo + r),
                (false, true) => (hi - r, hi),
                (false, false) => (-r, r),
            })
            .collect()
    };
    let mass = |bx: &[(f64, f64)], shift: Option<f64>| -> Result<(f64, f64)> {
        let axes: Vec<_> = bx
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| axis_rule(lo, hi, &kinks[i], points, 2 * panels, true))
            .collect();
        let (nodes, weights) = tensor(&axes)?;
        let logs: Vec<f64> = nodes.par_chunks(d).map(|x| expr.eval(x)).collect();
        let shift = shift.unwrap_or_else(|| logs.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max));
        if !shift.is_finite() {
            return Err(Error::Normalization("expression density is not finite anywhere on the box".into()));
        }
        let terms: Vec<f64> = weights.iter().zip(&logs).map(|(w, l)| w * (l - shift).exp()).collect();
        Ok((ordered_sum(&terms), shift))
    };
    let any_open = open_lo.iter().chain(&open_hi).any(|&b| b);
    let mut r = 4.0;
    let (mut z, shift) = mass(&make_box(r), None)?;
    if any_open {
        let mut converged = false;
        for _ in 0..60 {
            r *= 2.0;
            let (next, _) = mass(&make_box(r), Some(shift))?;
            let change = (next - z).abs() / next.abs().max(1e-300);
            z = next;
            if change < 1e-10 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::TruncationSweep(60));
        }
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Normalization(format!("expression density has mass {z}")));
    }
    let bx = make_box(r);
    Ok(ExpressionParams {
        expr: expr.clone(),
        lower: bx.iter().map(|b| b.0).collect(),
        upper: bx.iter().map(|b| b.1).collect(),
        log_norm: shift + z.ln(),
        kinks: kinks.to_vec(),
    })
}

/// Segment boundaries for piecewise rules: `0`, the interior breaks, `m - 1`.
fn segments(m: usize, breaks: &[usize]) -> Vec<usize> {
    let mut b: Vec<usize> = breaks.iter().cloned().filter(|&i| i > 0 && i + 1 < m).collect();
    b.sort_unstable();
    b.dedup();
    let mut out = vec![0];
    out.extend(b);
    out.push(m - 1);
    out
}

/// Per-interval integrals of tabulated values by a fourth-order rule that is
/// restarted at every break (kink) node.
pub fn cum4_intervals(f: &[f64], h: f64, breaks: &[usize]) -> Vec<f64> {
    let m = f.len();
    let mut out = vec![0.0; m.saturating_sub(1)];
    if m < 2 {
        return out;
    }
    let c = h / 24.0;
    for seg in segments(m, breaks).windows(2) {
        let (s, e) = (seg[0], seg[1]);
        if e - s < 3 {
            for j in s..e {
                out[j] = 0.5 * h * (f[j] + f[j + 1]);
            }
            continue;
        }
        out[s] = c * (9.0 * f[s] + 19.0 * f[s + 1] - 5.0 * f[s + 2] + f[s + 3]);
        out[e - 1] = c * (9.0 * f[e] + 19.0 * f[e - 1] - 5.0 * f[e - 2] + f[e - 3]);
        for j in s + 1..e - 1 {
            out[j] = c * (-f[j - 1] + 13.0 * f[j] + 13.0 * f[j + 1] - f[j + 2]);
        }
    }
    out
}

/// Node weights of the rule in [`cum4_intervals`].
pub fn cum4_weights(m: usize, h: f64, breaks: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; m];
    if m < 2 {
        return w;
    }
    let c = h / 24.0;
    for seg in segments(m, breaks).windows(2) {
        let (s, e) = (seg[0], seg[1]);
        if e - s < 3 {
            for j in s..e {
                w[j] += 0.5 * h;
                w[j + 1] += 0.5 * h;
            }
            continue;
        }
        for (k, a) in [9.0, 19.0, -5.0, 1.0].iter().enumerate() {
            w[s + k] += c * a;
            w[e - k] += c * a;
        }
        for j in s + 1..e - 1 {
            w[j - 1] -= c;
            w[j] += 13.0 * c;
            w[j + 1] += 13.0 * c;
            w[j + 2] -= c;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::catalog;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn legendre_examples() {
        let r = legendre_rule(1, -1.0, 1.0).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![2.0]);
        let r5 = legendre_rule(5, -1.0, 1.0).unwrap();
        assert_eq!(r5.exactness_degree, 9);
        assert!((r5.apply(|x| x.powi(8)) - 2.0 / 9.0).abs() < 1e-12);
        assert!((r5.apply(|x| x.powi(10)) - 2.0 / 11.0).abs() > 1e-6);
        assert!(legendre_rule(0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn legendre_weights_sum_to_length(order in 1usize..80, lo in -5.0f64..5.0, len in 0.1f64..10.0) {
            let r = legendre_rule(order, lo, lo + len).unwrap();
            let s: f64 = r.weights.iter().sum();
            prop_assert!((s - len).abs() < 1e-12 * len.max(1.0));
            prop_assert!(r.weights.iter().all(|&w| w > 0.0));
            prop_assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
        }

        #[test]
        fn legendre_exact_to_degree(order in 1usize..30, k in 0usize..60) {
            prop_assume!(k <= 2 * order - 1);
            let r = legendre_rule(order, -1.0, 1.0).unwrap();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            prop_assert!((r.apply(|x| x.powi(k as i32)) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_examples() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let b = truncate_support(&g, 1e-10).unwrap();
        assert!((b[0].1 - 6.5).abs() < 0.05 && (b[0].0 + b[0].1).abs() < 1e-12);
        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        assert_eq!(truncate_support(&u, 1e-3).unwrap(), vec![(-s3, s3)]);
        let c = catalog("generalized-cauchy", &[4.0, 1.0]).unwrap();
        let b = truncate_support(&c, 1e-10).unwrap();
        assert!(b[0].1 > 10.0);
        // Mass outside the box by an independent closed form: for β = 4 the
        // tail ∫_R^∞ (1+x²)^{-4} dx follows from the antiderivative in atan.
        let r = b[0].1;
        let t = r.atan();
        let anti = |t: f64| 5.0 * t / 16.0 + 15.0 * (2.0 * t).sin() / 64.0 + 3.0 * (4.0 * t).sin() / 64.0 + (6.0 * t).sin() / 192.0;
        let z = 2.0 * anti(std::f64::consts::FRAC_PI_2);
        let outside = 2.0 * (anti(std::f64::consts::FRAC_PI_2) - anti(t)) / z;
        assert!(outside <= 1e-10, "outside mass {outside}");
    }

    #[test]
    fn integrate_examples() {
        let cfg = IntegrationConfig::default();
        let g = catalog("gaussian", &[1.0]).unwrap();
        let one = integrate(|_| 1.0, &g, &cfg).unwrap();
        assert!((one.value - 1.0).abs() < 1e-10 && one.error < 1e-10);
        let rule = measure_rule(&g, &cfg).unwrap();
        assert!((rule.raw_mass() - 1.0).abs() < 1e-9);
        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        assert_relative_eq!(integrate(|x| x[0] * x[0], &u, &cfg).unwrap().value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(integrate(|x| x[0].powi(4), &u, &cfg).unwrap().value, 1.8, epsilon = 1e-12);
    }

    #[test]
    fn catalog_masses_are_normalized() {
        let cfg = IntegrationConfig::default();
        let specs = [
            catalog("gaussian", &[2.0, 2.0]).unwrap(),
            catalog("laplace", &[0.7]).unwrap(),
            catalog("centered-exponential", &[2.0]).unwrap(),
            catalog("subexponential", &[0.5, 1.0]).unwrap(),
            catalog("subexponential", &[1.5, 2.0]).unwrap(),
            catalog("gaussian-mixture", &[0.2, -2.0, 0.3, 0.8, 1.0, 1.5]).unwrap(),
            catalog("uniform-annuli", &[0.5, 1.0, 1.5, 2.0]).unwrap(),
        ];
        for s in &specs {
            let r = measure_rule(s, &cfg).unwrap();
            assert!((r.raw_mass() - 1.0).abs() < 1e-8, "{}: {}", s.name(), r.raw_mass());
        }
    }

    #[test]
    fn panel_refinement_improves_smooth_integrals() {
        // ∫_{-3}^{3} exp(-a x²) dx against erf closed forms.
        for a in [0.5, 1.0, 3.0] {
            let exact = (PI / a).sqrt() * statrs::function::erf::erf(3.0 * a.sqrt());
            let mut prev = f64::INFINITY;
            for panels in [1, 2, 4, 8] {
                let (x, w) = axis_rule(-3.0, 3.0, &[], 6, panels, false);
                let v: f64 = x.iter().zip(&w).map(|(x, w)| w * (-a * x * x).exp()).sum();
                let err = (v - exact).abs();
                assert!(err <= prev || err < 1e-14, "a={a} panels={panels}: {err} vs {prev}");
                prev = err;
            }
        }
    }

    #[test]
    fn monte_carlo_error_scaling() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let freqs = [0.3, 0.7, 1.1, 1.5, 1.9, 2.3, 0.5, 0.9, 1.3, 1.7];
        for (k, &a) in freqs.iter().enumerate() {
            let f = move |x: &[f64]| (a * x[0]).sin() + 0.5 * x[0] * x[0];
            let mut cfg = IntegrationConfig { mode: IntegrationMode::MonteCarlo, seed: 100 + k as u64, ..Default::default() };
            cfg.mc_samples = 50_000;
            let e1 = integrate(f, &g, &cfg).unwrap().error;
            cfg.mc_samples = 100_000;
            let e2 = integrate(f, &g, &cfg).unwrap().error;
            let ratio = e2 / e1;
            assert!((0.6..=0.8).contains(&ratio), "integrand {k}: ratio {ratio}");
        }
    }

    #[test]
    fn cum4_is_fourth_order() {
        let errs: Vec<f64> = [101usize, 201]
            .iter()
            .map(|&m| {
                let g = Grid1D::new(0.0, 2.0, m).unwrap();
                let f: Vec<f64> = g.nodes().iter().map(|x| x.exp()).collect();
                let w = cum4_weights(m, g.spacing(), &[]);
                let v: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
                let iv: f64 = cum4_intervals(&f, g.spacing(), &[]).iter().sum();
                assert!((v - iv).abs() < 1e-13);
                (v - (2f64.exp() - 1.0)).abs()
            })
            .collect();
        assert!(errs[0] / errs[1] > 12.0, "{errs:?}");
    }

    #[test]
    fn cum4_breaks_restart_the_rule() {
        // |x| on [-1, 1] with the kink at the middle node is integrated exactly.
        let g = Grid1D::new(-1.0, 1.0, 41).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| x.abs()).collect();
        let w = cum4_weights(41, g.spacing(), &[20]);
        let v: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((v - 1.0).abs() < 1e-14);
    }
}

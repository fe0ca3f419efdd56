//! Probability measures on ℝ^d: catalog, density and potential evaluation,
//! moments and standardization.

mod catalog;
mod sampling;

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{precondition, Error, Result};
use crate::expr::Expression;
use crate::kernel1d::GridDensity1D;
use crate::quadrature::{self, IntegrationConfig, IntegrationMode};

pub use catalog::{catalog, CATALOG_NAMES};
pub use sampling::PointSet;

/// Shape of the region carrying the mass of a measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SupportKind {
    Interval,
    Box,
    HalfLine,
    Whole,
    Annuli { radii: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportRegion {
    pub kind: SupportKind,
    /// Per-axis `(lower, upper)` endpoints; infinite where unbounded.
    pub bounds: Vec<(f64, f64)>,
}

impl SupportRegion {
    fn new(kind: SupportKind, bounds: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(precondition(format!("support axis {i}: lower {lo} must be below upper {hi}")));
            }
        }
        Ok(Self { kind, bounds })
    }

    fn whole(dim: usize) -> Self {
        Self { kind: SupportKind::Whole, bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); dim] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if let SupportKind::Annuli { radii } = self.kind {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            return (r >= radii[0] && r <= radii[1]) || (r >= radii[2] && r <= radii[3]);
        }
        self.bounds.iter().zip(x).all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }
}

/// How samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    InverseCdf,
    Rejection,
    Direct,
    ProductOf1d,
    Unavailable,
}

#[derive(Debug, Clone)]
pub(crate) struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    pub chol: DMatrix<f64>,
    pub chol_inv: DMatrix<f64>,
    pub log_norm: f64,
}

impl GaussianParams {
    pub(crate) fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::SizeMismatch(format!("covariance is {}x{}, mean has length {d}", cov.nrows(), cov.ncols())));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let min_eig = sym.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > 1e-14 * sym.norm().max(1e-300)) {
            return Err(Error::SingularCovariance(min_eig));
        }
        let chol = sym.clone().cholesky().ok_or(Error::SingularCovariance(min_eig))?.l();
        let chol_inv = chol
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SolveFailed("cholesky factor not invertible".into()))?;
        let logdet: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = 0.5 * d as f64 * (2.0 * PI).ln() + 0.5 * logdet;
        Ok(Self { mean, cov: sym, chol, chol_inv, log_norm })
    }

    fn whiten(&self, x: &[f64]) -> DVector<f64> {
        let v = DVector::from_column_slice(x) - &self.mean;
        &self.chol_inv * v
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AffineParams {
    pub base: Box<MeasureSpec>,
    pub shift: DVector<f64>,
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl AffineParams {
    pub(crate) fn pull_back(&self, y: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(y) - &self.shift;
        (&self.inverse * v).as_slice().to_vec()
    }

    pub(crate) fn push(&self, x: &[f64]) -> Vec<f64> {
        let v = &self.matrix * DVector::from_column_slice(x) + &self.shift;
        v.as_slice().to_vec()
    }

    /// Returns `Some(a)` when the linear part is `a` times an orthogonal matrix.
    pub(crate) fn scalar_isometry_factor(&self) -> Option<f64> {
        let d = self.matrix.nrows();
        let g = self.matrix.transpose() * &self.matrix;
        let a2 = g.trace() / d as f64;
        let dev = (&g - DMatrix::identity(d, d) * a2).amax();
        (dev <= 1e-12 * a2).then(|| a2.sqrt())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ExpressionParams {
    pub expr: Expression,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub log_norm: f64,
    pub kinks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) enum Family {
    Gaussian(GaussianParams),
    Uniform { a: f64, b: f64 },
    Laplace { b: f64 },
    CenteredExponential { lambda: f64 },
    GeneralizedCauchy { beta: f64, log_norm: f64 },
    Subexponential { p: f64, log_norm: f64 },
    Product(Vec<MeasureSpec>),
    GaussianMixture { weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64> },
    UniformAnnuli { radii: [f64; 4] },
    Expression(ExpressionParams),
    Affine(AffineParams),
    Tabulated(GridDensity1D),
}

/// A probability measure with enough structure to integrate against,
/// sample from, and differentiate the log-density of.
#[derive(Clone)]
pub struct MeasureSpec {
    name: String,
    dim: usize,
    pub(crate) family: Family,
    support: SupportRegion,
    normalized: bool,
    known_poincare: Option<f64>,
    weight: Option<Expression>,
    sampler: SamplerKind,
    moment_budget: f64,
}

impl fmt::Debug for MeasureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("support", &self.support)
            .field("known_poincare", &self.known_poincare)
            .field("sampler", &self.sampler)
            .field("moment_budget", &self.moment_budget)
            .finish()
    }
}

/// Moments of a measure computed by quadrature or Monte Carlo.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    /// Row-major d×d covariance.
    pub covariance: Vec<f64>,
    pub second_moment: f64,
    /// `E[X_i^3]` per coordinate; `None` when third moments diverge.
    pub third_marginal: Option<Vec<f64>>,
    pub fourth_moment: Option<f64>,
    pub error_estimate: f64,
    pub method: String,
}

impl MomentReport {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }

    pub fn is_isotropic(&self, tol: f64) -> bool {
        let d = self.mean.len();
        let dev = (self.covariance_matrix() - DMatrix::identity(d, d)).amax();
        self.mean.iter().all(|m| m.abs() <= tol) && dev <= tol
    }
}

fn log_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Log of the surface area of the unit sphere in ℝ^d.
pub(crate) fn log_sphere_area(d: usize) -> f64 {
    (2.0f64).ln() + 0.5 * d as f64 * PI.ln() - log_gamma(0.5 * d as f64)
}

impl MeasureSpec {
    pub(crate) fn build(
        name: impl Into<String>,
        dim: usize,
        family: Family,
        support: SupportRegion,
        known_poincare: Option<f64>,
        sampler: SamplerKind,
        moment_budget: f64,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            family,
            support,
            normalized: true,
            known_poincare,
            weight: None,
            sampler,
            moment_budget,
        }
    }

    /// Gaussian with the given mean and covariance.
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(precondition("dimension must be positive"));
        }
        let params = GaussianParams::new(DVector::from_vec(mean), cov)?;
        let cp = params.cov.clone().symmetric_eigen().eigenvalues.max();
        let name = if d == 1 {
            format!("gaussian({})", fmt_num(params.cov[(0, 0)]))
        } else {
            format!("gaussian(d={d})")
        };
        Ok(Self::build(
            name,
            d,
            Family::Gaussian(params),
            SupportRegion::whole(d),
            Some(cp),
            SamplerKind::Direct,
            f64::INFINITY,
        ))
    }

    /// Isotropic centered Gaussian `N(0, σ² I_d)`.
    pub fn isotropic_gaussian(variance: f64, dim: usize) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::ParameterOutOfRange {
                measure: "gaussian".into(),
                reason: format!("variance must be positive, got {variance}"),
            });
        }
        let mut spec = Self::gaussian(vec![0.0; dim], DMatrix::identity(dim, dim) * variance)?;
        spec.name = if dim == 1 {
            format!("gaussian({})", fmt_num(variance))
        } else {
            format!("gaussian({}, d={dim})", fmt_num(variance))
        };
        Ok(spec)
    }

    /// Generalized Cauchy `Z⁻¹(1+|x|²)^{−β}` checking only integrability
    /// (`β > d/2`); the catalog entry enforces the stronger moment range.
    pub fn generalized_cauchy_unchecked(beta: f64, dim: usize) -> Result<Self> {
        if dim == 0 || !(beta > 0.5 * dim as f64) {
            return Err(Error::ParameterOutOfRange {
                measure: "generalized-cauchy".into(),
                reason: format!("density is not integrable for beta={beta}, d={dim}"),
            });
        }
        let d = dim as f64;
        let log_norm = 0.5 * d * PI.ln() + log_gamma(beta - 0.5 * d) - log_gamma(beta);
        Ok(Self::build(
            format!("generalized-cauchy({}, d={dim})", fmt_num(beta)),
            dim,
            Family::GeneralizedCauchy { beta, log_norm },
            SupportRegion::whole(dim),
            None,
            SamplerKind::Direct,
            2.0 * beta - d,
        ))
    }

    /// Product measure of the given factors, coordinates concatenated.
    pub fn product(components: Vec<MeasureSpec>) -> Result<Self> {
        if components.is_empty() {
            return Err(precondition("product needs at least one component"));
        }
        let dim = components.iter().map(|c| c.dim).sum();
        let bounds = components.iter().flat_map(|c| c.support.bounds.clone()).collect();
        let cp = components.iter().map(|c| c.known_poincare).collect::<Option<Vec<_>>>();
        let cp = cp.map(|v| v.into_iter().fold(0.0, f64::max));
        let budget = components.iter().map(|c| c.moment_budget).fold(f64::INFINITY, f64::min);
        let sampler = if components.iter().all(|c| c.sampler != SamplerKind::Unavailable) {
            SamplerKind::ProductOf1d
        } else {
            SamplerKind::Unavailable
        };
        let name = format!(
            "product({})",
            components.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
        );
        Ok(Self::build(
            name,
            dim,
            Family::Product(components),
            SupportRegion::new(SupportKind::Box, bounds)?,
            cp,
            sampler,
            budget,
        ))
    }

    /// Custom measure from an unnormalized log-density expression over a box.
    /// Infinite sides are truncated by a doubling sweep that also fixes the
    /// normalization constant.
    pub fn from_expression(
        source: &str,
        dim: usize,
        bounds: Vec<(f64, f64)>,
        kinks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let expr = Expression::parse(source, dim)?;
        if bounds.len() != dim {
            return Err(Error::SizeMismatch(format!("{} support axes for dimension {dim}", bounds.len())));
        }
        let support = SupportRegion::new(
            if dim == 1 { SupportKind::Interval } else { SupportKind::Box },
            bounds.clone(),
        )?;
        let kinks = if kinks.is_empty() { vec![Vec::new(); dim] } else { kinks };
        if kinks.len() != dim {
            return Err(Error::SizeMismatch("kink list must have one entry per axis".into()));
        }
        let params = quadrature::normalize_expression(&expr, &bounds, &kinks)?;
        let sampler = if dim == 1 { SamplerKind::InverseCdf } else { SamplerKind::Unavailable };
        Ok(Self::build(
            format!("expression({source})"),
            dim,
            Family::Expression(params),
            support,
            None,
            sampler,
            f64::INFINITY,
        ))
    }

    /// Measure with a tabulated 1D density.
    pub fn tabulated(grid: GridDensity1D) -> Self {
        let (lo, hi) = (grid.grid().lo, grid.grid().hi);
        Self::build(
            "tabulated",
            1,
            Family::Tabulated(grid),
            SupportRegion { kind: SupportKind::Interval, bounds: vec![(lo, hi)] },
            None,
            SamplerKind::InverseCdf,
            f64::INFINITY,
        )
    }

    /// Image of the measure under `x ↦ matrix·x + shift`.
    pub fn affine(&self, shift: Vec<f64>, matrix: DMatrix<f64>) -> Result<Self> {
        let d = self.dim;
        if shift.len() != d || matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::SizeMismatch(format!("affine map must be {d}-dimensional")));
        }
        let det = matrix.determinant();
        if !(det.abs() > 1e-300) {
            return Err(Error::SingularCovariance(det));
        }
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SolveFailed("affine matrix not invertible".into()))?;
        // Gaussians stay Gaussian.
        if let Family::Gaussian(g) = &self.family {
            let mean = &matrix * &g.mean + DVector::from_vec(shift.clone());
            let cov = &matrix * &g.cov * matrix.transpose();
            let mut out = Self::gaussian(mean.as_slice().to_vec(), cov)?;
            out.weight = None;
            return Ok(out);
        }
        let params = AffineParams {
            base: Box::new(self.clone()),
            shift: DVector::from_vec(shift),
            matrix,
            inverse,
            log_det: det.abs().ln(),
        };
        let cp = match (self.known_poincare, params.scalar_isometry_factor()) {
            (Some(cp), Some(a)) => Some(cp * a * a),
            _ => None,
        };
        let bounds = affine_image_box(&params, &self.support.bounds);
        let kind = match self.support.kind {
            SupportKind::Annuli { .. } => SupportKind::Box,
            ref k => k.clone(),
        };
        let sampler = if self.sampler == SamplerKind::Unavailable {
            SamplerKind::Unavailable
        } else {
            SamplerKind::Direct
        };
        Ok(Self::build(
            format!("affine({})", self.name),
            d,
            Family::Affine(params),
            SupportRegion { kind, bounds },
            cp,
            sampler,
            self.moment_budget,
        ))
    }

    /// Image under `x ↦ a·x`.
    pub fn scale(&self, a: f64) -> Result<Self> {
        self.affine(vec![0.0; self.dim], DMatrix::identity(self.dim, self.dim) * a)
    }

    /// Image under `x ↦ x + v`.
    pub fn translate(&self, v: &[f64]) -> Result<Self> {
        self.affine(v.to_vec(), DMatrix::identity(self.dim, self.dim))
    }

    pub fn with_weight(mut self, weight: Expression) -> Result<Self> {
        if weight.dim() != self.dim {
            return Err(Error::SizeMismatch(format!(
                "weight is {}-dimensional, measure is {}-dimensional",
                weight.dim(),
                self.dim
            )));
        }
        self.weight = Some(weight);
        Ok(self)
    }

    pub fn with_known_poincare(mut self, cp: Option<f64>) -> Self {
        self.known_poincare = cp;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &SupportRegion {
        &self.support
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn known_poincare(&self) -> Option<f64> {
        self.known_poincare
    }

    pub fn weight(&self) -> Option<&Expression> {
        self.weight.as_ref()
    }

    pub fn sampler(&self) -> SamplerKind {
        self.sampler
    }

    /// Moments of order strictly below this value are finite.
    pub fn moment_budget(&self) -> f64 {
        self.moment_budget
    }

    /// Fails unless moments of order `order` are finite.
    pub fn require_moments(&self, order: f64) -> Result<()> {
        if order < self.moment_budget {
            Ok(())
        } else {
            Err(Error::MomentBudget { needed: order, budget: self.moment_budget })
        }
    }

    /// Normalized log-density; `-inf` outside the support.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.family {
            Family::Gaussian(g) => -0.5 * g.whiten(x).norm_squared() - g.log_norm,
            Family::Uniform { a, b } => {
                if x[0] >= *a && x[0] <= *b {
                    -(b - a).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::Laplace { b } => -x[0].abs() / b - (2.0 * b).ln(),
            Family::CenteredExponential { lambda } => {
                let s = x[0] + 1.0 / lambda;
                if s >= 0.0 {
                    lambda.ln() - lambda * s
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::GeneralizedCauchy { beta, log_norm } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                -beta * r2.ln_1p() - log_norm
            }
            Family::Subexponential { p, log_norm } => {
                let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                -r.powf(*p) - log_norm
            }
            Family::Product(comps) => {
                let mut off = 0;
                let mut acc = 0.0;
                for c in comps {
                    acc += c.log_density(&x[off..off + c.dim]);
                    off += c.dim;
                }
                acc
            }
            Family::GaussianMixture { weights, means, variances } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| w.ln() - 0.5 * (x[0] - m).powi(2) / v - 0.5 * (2.0 * PI * v).ln())
                    .collect();
                log_sum_exp(&terms)
            }
            Family::UniformAnnuli { radii } => {
                if self.support.contains(x) {
                    -annuli_area(radii).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::Expression(e) => {
                let inside = x
                    .iter()
                    .zip(self.support.bounds.iter())
                    .all(|(&v, &(lo, hi))| v >= lo && v <= hi);
                if inside {
                    e.expr.eval(x) - e.log_norm
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::Affine(a) => a.base.log_density(&a.pull_back(x)) - a.log_det,
            Family::Tabulated(g) => g.interp(x[0]).ln(),
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let v = self.log_density(x).exp();
        if v.is_finite() {
            v.max(0.0)
        } else {
            0.0
        }
    }

    /// Gradient of `H = −log density`, when the family provides one that is
    /// valid for integration by parts over the support.
    pub fn potential_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.family {
            Family::Gaussian(g) => {
                let z = g.whiten(x);
                Some((g.chol_inv.transpose() * z).as_slice().to_vec())
            }
            Family::Uniform { .. } | Family::UniformAnnuli { .. } | Family::Tabulated(_) => None,
            Family::Laplace { b } => Some(vec![sign(x[0]) / b]),
            Family::CenteredExponential { .. } => None,
            Family::GeneralizedCauchy { beta, .. } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                Some(x.iter().map(|v| 2.0 * beta * v / (1.0 + r2)).collect())
            }
            Family::Subexponential { p, .. } => {
                let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    return Some(vec![0.0; self.dim]);
                }
                let f = p * r.powf(p - 2.0);
                Some(x.iter().map(|v| f * v).collect())
            }
            Family::Product(comps) => {
                let mut out = Vec::with_capacity(self.dim);
                let mut off = 0;
                for c in comps {
                    out.extend(c.potential_gradient(&x[off..off + c.dim])?);
                    off += c.dim;
                }
                Some(out)
            }
            Family::GaussianMixture { weights, means, variances } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| w.ln() - 0.5 * (x[0] - m).powi(2) / v - 0.5 * (2.0 * PI * v).ln())
                    .collect();
                let lse = log_sum_exp(&terms);
                let g: f64 = terms
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((t, m), v)| (t - lse).exp() * (x[0] - m) / v)
                    .sum();
                Some(vec![g])
            }
            Family::Expression(e) => {
                let mut out = vec![0.0; self.dim];
                let mut y = x.to_vec();
                for i in 0..self.dim {
                    let h = 1e-6 * x[i].abs().max(1.0);
                    y[i] = x[i] + h;
                    let fp = e.expr.eval(&y);
                    y[i] = x[i] - h;
                    let fm = e.expr.eval(&y);
                    y[i] = x[i];
                    out[i] = -(fp - fm) / (2.0 * h);
                }
                Some(out)
            }
            Family::Affine(a) => {
                let gx = a.base.potential_gradient(&a.pull_back(x))?;
                let v = a.inverse.transpose() * DVector::from_vec(gx);
                Some(v.as_slice().to_vec())
            }
        }
    }

    /// Points per axis where the density or its derivative is discontinuous.
    pub fn kinks(&self) -> Vec<Vec<f64>> {
        match &self.family {
            Family::Uniform { a, b } => vec![vec![*a, *b]],
            Family::Laplace { .. } => vec![vec![0.0]],
            Family::CenteredExponential { lambda } => vec![vec![-1.0 / lambda]],
            // |x|^p is smooth at the origin only for even integer p
            Family::Subexponential { p, .. } if *p % 2.0 != 0.0 => vec![vec![0.0]; self.dim],
            Family::Product(comps) => comps.iter().flat_map(|c| c.kinks()).collect(),
            Family::Expression(e) => e.kinks.clone(),
            Family::Affine(a) => {
                let m = &a.matrix;
                let diagonal = (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || m[(i, j)] == 0.0));
                if diagonal {
                    a.base
                        .kinks()
                        .into_iter()
                        .enumerate()
                        .map(|(i, ks)| ks.into_iter().map(|k| m[(i, i)] * k + a.shift[i]).collect())
                        .collect()
                } else {
                    vec![Vec::new(); self.dim]
                }
            }
            _ => vec![Vec::new(); self.dim],
        }
    }

    /// True for polynomially decaying or stretched-exponential tails.
    pub fn heavy_tailed(&self) -> bool {
        match &self.family {
            Family::GeneralizedCauchy { .. } => true,
            Family::Subexponential { p, .. } => *p < 1.0,
            Family::Product(c) => c.iter().any(|s| s.heavy_tailed()),
            Family::Affine(a) => a.base.heavy_tailed(),
            Family::Expression(_) => true,
            _ => false,
        }
    }

    /// Splits a product of one-dimensional factors (including diagonal
    /// Gaussians) into its factors.
    pub fn product_factors(&self) -> Option<Vec<MeasureSpec>> {
        match &self.family {
            Family::Product(comps) if comps.iter().all(|c| c.dim == 1) => Some(comps.clone()),
            Family::Gaussian(g) => {
                let d = self.dim;
                let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || g.cov[(i, j)] == 0.0));
                if !diagonal {
                    return None;
                }
                (0..d)
                    .map(|i| {
                        Self::gaussian(vec![g.mean[i]], DMatrix::from_element(1, 1, g.cov[(i, i)]))
                    })
                    .collect::<Result<Vec<_>>>()
                    .ok()
            }
            _ if self.dim == 1 => Some(vec![self.clone()]),
            _ => None,
        }
    }

    pub(crate) fn gaussian_params(&self) -> Option<&GaussianParams> {
        match &self.family {
            Family::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    /// Draws `n` points deterministically from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointSet> {
        sampling::sample(self, n, seed)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub(crate) fn annuli_area(r: &[f64; 4]) -> f64 {
    PI * (r[1] * r[1] - r[0] * r[0] + r[3] * r[3] - r[2] * r[2])
}

pub(crate) fn fmt_num(v: f64) -> String {
    let s = format!("{v}");
    if s.len() > 10 {
        format!("{v:.6}")
    } else {
        s
    }
}

pub(crate) fn affine_image_box(a: &AffineParams, bounds: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let d = bounds.len();
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    if bounds.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
        // Unbounded axes mix into every output axis unless the map is diagonal.
        for i in 0..d {
            let mut lo = a.shift[i];
            let mut hi = a.shift[i];
            for j in 0..d {
                let c = a.matrix[(i, j)];
                if c == 0.0 {
                    continue;
                }
                let (l, h) = bounds[j];
                let (x, y) = if c > 0.0 { (c * l, c * h) } else { (c * h, c * l) };
                lo += x;
                hi += y;
            }
            out[i] = (lo, hi);
        }
        return out;
    }
    for corner in 0..(1usize << d) {
        let x: Vec<f64> = (0..d)
            .map(|j| if corner >> j & 1 == 0 { bounds[j].0 } else { bounds[j].1 })
            .collect();
        let y = a.push(&x);
        for i in 0..d {
            out[i].0 = out[i].0.min(y[i]);
            out[i].1 = out[i].1.max(y[i]);
        }
    }
    out
}

/// Mean, covariance and low-order moments of `spec`.
pub fn moments(spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<MomentReport> {
    spec.require_moments(2.0).map_err(|_| {
        Error::DivergentMoment(format!(
            "second moment of {} is infinite (moments finite below order {})",
            spec.name,
            spec.moment_budget
        ))
    })?;
    let d = spec.dim;
    let want_third = spec.moment_budget > 3.0;
    let want_fourth = spec.moment_budget > 4.0;
    let order = if want_fourth { 4 } else if want_third { 3 } else { 2 };

    let mc = cfg.mode == IntegrationMode::MonteCarlo || d > 3 || quadrature::prefers_monte_carlo(spec);
    let rule = if mc {
        quadrature::monte_carlo_rule(spec, cfg)?
    } else {
        quadrature::measure_rule_for_order(spec, cfg, order)?
    };

    // Raw moment vector: mean (d), second cross moments (d*d), third (d), fourth (1).
    let len = d + d * d + d + 1;
    let sums = rule.integrate_vec(len, |x, out| {
        for i in 0..d {
            out[i] = x[i];
            for j in 0..d {
                out[d + i * d + j] = x[i] * x[j];
            }
            if want_third {
                out[d + d * d + i] = x[i] * x[i] * x[i];
            }
        }
        if want_fourth {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            out[len - 1] = r2 * r2;
        }
    });
    let mean = sums[..d].to_vec();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = sums[d + i * d + j] - mean[i] * mean[j];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = avg;
            cov[j * d + i] = avg;
        }
    }
    let second: f64 = (0..d).map(|i| sums[d + i * d + i]).sum();

    let error_estimate = if mc {
        let var = rule.integrate(|x| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            (r2 - second).powi(2)
        });
        (var / rule.len() as f64).sqrt()
    } else {
        // Truncation sweep: a wider box must reproduce the second moment.
        let wide = quadrature::measure_rule_stretched(spec, cfg, 2.0)?;
        let wide_second = wide.integrate(|x| x.iter().map(|v| v * v).sum());
        let change = (wide_second - second).abs() / wide_second.abs().max(1e-300);
        if !(change <= 1e-4) || !wide_second.is_finite() {
            return Err(Error::DivergentMoment(format!(
                "second moment of {} changed by a relative {change:e} under truncation widening",
                spec.name
            )));
        }
        (wide_second - second).abs()
    };

    Ok(MomentReport {
        mean,
        covariance: cov,
        second_moment: second,
        third_marginal: want_third.then(|| sums[d + d * d..d + d * d + d].to_vec()),
        fourth_moment: want_fourth.then(|| sums[len - 1]),
        error_estimate,
        method: if mc { "monte-carlo".into() } else { "tensor".into() },
    })
}

/// Affine image with mean zero and identity covariance.
///
/// Returns the input unchanged when it is already standardized to 1e-9, so
/// the operation is idempotent.
pub fn standardize(spec: &MeasureSpec, cfg: &IntegrationConfig) -> Result<MeasureSpec> {
    let d = spec.dim;
    if let Some(g) = spec.gaussian_params() {
        let already = g.mean.amax() <= 1e-9 && (&g.cov - DMatrix::identity(d, d)).amax() <= 1e-9;
        if already {
            return Ok(spec.clone());
        }
        let name = format!("standardized({})", spec.name);
        let out = MeasureSpec::isotropic_gaussian(1.0, d)?.with_name(name);
        return Ok(out.with_known_poincare(Some(1.0)));
    }
    let m = moments(spec, cfg)?;
    if m.is_isotropic(1e-9) {
        return Ok(spec.clone());
    }
    let cov = m.covariance_matrix();
    let eig = cov.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * eig.eigenvalues.amax()) {
        return Err(Error::SingularCovariance(min));
    }
    // Symmetric whitening W = Σ^{-1/2}; y = W (x − μ).
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let mu = DVector::from_vec(m.mean.clone());
    let shift = -(&w * mu);
    let mut out = spec.affine(shift.as_slice().to_vec(), w)?;
    out.name = format!("standardized({})", spec.name);
    if let Some(cp) = out.known_poincare {
        if cp < 1.0 - 1e-9 {
            log::warn!("{}: isotropic measure with Poincaré constant {cp} < 1", out.name);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> IntegrationConfig {
        IntegrationConfig::default()
    }

    #[test]
    fn gaussian_catalog_constant() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        assert_eq!(g.known_poincare(), Some(1.0));
        assert_eq!(g.dim(), 1);
        assert_relative_eq!(g.density(&[0.0]), 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn uniform_moments_and_constant() {
        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        assert_relative_eq!(u.known_poincare().unwrap(), 12.0 / (PI * PI), epsilon = 1e-14);
        let m = moments(&u, &cfg()).unwrap();
        assert!(m.mean[0].abs() < 1e-12);
        assert_relative_eq!(m.covariance[0], 1.0, epsilon = 1e-10);
        assert!(m.third_marginal.unwrap()[0].abs() < 1e-8);
        assert_relative_eq!(m.fourth_moment.unwrap(), 1.8, epsilon = 1e-10);
    }

    #[test]
    fn exponential_moments() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let m = moments(&e, &cfg()).unwrap();
        assert!(m.mean[0].abs() < 1e-9);
        assert_relative_eq!(m.covariance[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(m.third_marginal.unwrap()[0], 2.0, epsilon = 1e-8);
        assert_eq!(e.known_poincare(), Some(4.0));
    }

    #[test]
    fn symmetric_entries_have_zero_skew() {
        for (name, p) in [("gaussian", vec![2.0]), ("laplace", vec![0.7]), ("uniform", vec![-1.0, 1.0])] {
            let s = catalog(name, &p).unwrap();
            let m = moments(&s, &cfg()).unwrap();
            assert!(m.third_marginal.unwrap()[0].abs() < 1e-8, "{name}");
            assert_relative_eq!(m.second_moment, m.covariance[0] + m.mean[0].powi(2), epsilon = 1e-10);
        }
    }

    #[test]
    fn cauchy_range_and_divergence() {
        assert!(catalog("generalized-cauchy", &[3.0, 1.0]).is_ok());
        assert!(matches!(
            catalog("generalized-cauchy", &[2.0, 1.0]),
            Err(Error::ParameterOutOfRange { .. })
        ));
        let c = MeasureSpec::generalized_cauchy_unchecked(1.0, 1).unwrap();
        assert!(matches!(moments(&c, &cfg()), Err(Error::DivergentMoment(_))));
        let e = MeasureSpec::from_expression(
            "-log(1 + x1^2)",
            1,
            vec![(f64::NEG_INFINITY, f64::INFINITY)],
            vec![],
        )
        .unwrap();
        assert!(matches!(moments(&e, &cfg()), Err(Error::DivergentMoment(_))));
    }

    #[test]
    fn cauchy_normalization() {
        for (beta, d) in [(3.0, 1usize), (3.5, 2)] {
            let c = catalog("generalized-cauchy", &[beta, d as f64]).unwrap();
            let rule = quadrature::measure_rule(&c, &cfg()).unwrap();
            let z = rule.raw_mass();
            assert!((z - 1.0).abs() < 1e-8, "beta={beta} d={d}: mass {z}");
        }
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(matches!(catalog("cauchy-ish", &[]), Err(Error::UnknownMeasure(_))));
        assert!(matches!(catalog("uniform-annuli", &[2.0, 1.0, 3.0, 4.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn standardize_examples() {
        let g4 = catalog("gaussian", &[4.0]).unwrap();
        let s = standardize(&g4, &cfg()).unwrap();
        assert_eq!(s.known_poincare(), Some(1.0));
        assert_relative_eq!(s.density(&[0.3]), catalog("gaussian", &[1.0]).unwrap().density(&[0.3]), epsilon = 1e-15);

        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[0.0, 2.0 * s3]).unwrap();
        let su = standardize(&u, &cfg()).unwrap();
        let b = quadrature::truncate_support(&su, 1e-10).unwrap();
        assert!((b[0].0 + s3).abs() < 1e-9 && (b[0].1 - s3).abs() < 1e-9);
        assert_relative_eq!(su.known_poincare().unwrap(), 12.0 / (PI * PI), epsilon = 1e-9);

        let corr = MeasureSpec::gaussian(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let sc = standardize(&corr, &cfg()).unwrap();
        let g = sc.gaussian_params().unwrap();
        assert!((&g.cov - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn correlated_standardization_drops_constant_for_non_gaussian() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let p = MeasureSpec::product(vec![e.clone(), e]).unwrap();
        let skew = p.affine(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).unwrap();
        assert_eq!(skew.known_poincare(), None);
        let s = standardize(&skew, &cfg()).unwrap();
        let m = moments(&s, &cfg()).unwrap();
        assert!(m.is_isotropic(1e-7), "{:?}", m.covariance);
        assert_eq!(s.known_poincare(), None);
    }

    #[test]
    fn scaling_covariance() {
        let l = catalog("laplace", &[0.5]).unwrap();
        let base = moments(&l, &cfg()).unwrap();
        for a in [0.5, 2.0] {
            let m = moments(&l.scale(a).unwrap(), &cfg()).unwrap();
            assert_relative_eq!(m.covariance[0], a * a * base.covariance[0], max_relative = 1e-9);
        }
    }

    #[test]
    fn potential_gradient_matches_log_density() {
        let specs = [
            catalog("gaussian", &[2.0]).unwrap(),
            catalog("laplace", &[0.7]).unwrap(),
            catalog("generalized-cauchy", &[3.0, 1.0]).unwrap(),
            catalog("gaussian-mixture", &[0.3, -1.0, 0.5, 0.7, 0.5, 1.2]).unwrap(),
        ];
        for s in &specs {
            for &x in &[-1.3, 0.4, 2.2] {
                let h = 1e-6;
                let fd = -(s.log_density(&[x + h]) - s.log_density(&[x - h])) / (2.0 * h);
                let g = s.potential_gradient(&[x]).unwrap()[0];
                assert!((fd - g).abs() < 1e-6, "{}: {fd} vs {g}", s.name());
            }
        }
    }
}

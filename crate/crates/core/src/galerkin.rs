//! Gradient-form Stein kernels `τ = ∇g` from a Galerkin solve of
//! `∫⟨∇g, ∇f⟩ dν = ∫ x·f dν` on ν-orthonormalized Hermite polynomials.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::kernel1d::{residual_on_rule, DiscrepancyReport, KernelField, Rhs, TestBank};
use crate::measures::{moments, MeasureSpec};
use crate::quadrature::{measure_rule_for_order, IntegrationConfig, IntegrationMode, MeasureRule, CHUNK};

/// Gram and stiffness matrices above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest dimension assembled with tensor quadrature.
pub const MAX_TENSOR_DIM: usize = 3;
/// Largest dimension assembled at all (Monte Carlo above the tensor cap).
pub const MAX_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GalerkinMode {
    GaussianReference,
    PotentialReference,
}

/// Right-hand side of the weak problem.
#[derive(Debug, Clone)]
pub enum Reference {
    /// `b = ∫ x·Φ dν`.
    Gaussian,
    /// `b = ∫ ∇V·Φ dν` with `V` the potential of the given measure, or of
    /// `ν` itself when `None`.
    Potential(Option<MeasureSpec>),
}

impl Reference {
    pub fn mode(&self) -> GalerkinMode {
        match self {
            Reference::Gaussian => GalerkinMode::GaussianReference,
            Reference::Potential(_) => GalerkinMode::PotentialReference,
        }
    }
}

/// Tensor Hermite polynomials `He_α(y)/√α!` in standardized coordinates
/// `y_i = (x_i − m_i)/s_i`, orthonormalized in `L²(ν)`.
#[derive(Debug, Clone, Serialize)]
pub struct PolyBasis {
    pub dim: usize,
    pub max_degree: u32,
    /// Multi-indices with `1 ≤ |α| ≤ N`.
    pub multi_indices: Vec<Vec<u32>>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub orthonormalized: bool,
    /// Row `k` holds the raw coefficients `[1, h_α...]` of basis function `k`.
    #[serde(serialize_with = "ser_matrix")]
    pub gram_transform: DMatrix<f64>,
    pub gram_condition: f64,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    rows.serialize(s)
}

fn multi_indices(dim: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 1..=max_degree {
        let mut cur = vec![0u32; dim];
        fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if i + 1 == cur.len() {
                cur[i] = left;
                out.push(cur.clone());
                return;
            }
            for k in (0..=left).rev() {
                cur[i] = k;
                rec(i + 1, left - k, cur, out);
            }
        }
        rec(0, total, &mut cur, &mut out);
    }
    out
}

impl PolyBasis {
    /// Number of scalar basis functions.
    pub fn len(&self) -> usize {
        self.multi_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi_indices.is_empty()
    }

    /// Raw values `[1, h_α...]` and gradients, `grads[k*d + j] = ∂_j r_k`.
    fn raw_eval(&self, x: &[f64], vals: &mut [f64], grads: &mut [f64]) {
        let d = self.dim;
        let n = self.max_degree as usize;
        let mut h = vec![0.0; d * (n + 1)];
        let mut dh = vec![0.0; d * (n + 1)];
        for i in 0..d {
            let y = (x[i] - self.center[i]) / self.scale[i];
            let row = &mut h[i * (n + 1)..(i + 1) * (n + 1)];
            // normalized recurrence: h_{k+1} = (y h_k − √k h_{k−1}) / √(k+1)
            row[0] = 1.0;
            if n >= 1 {
                row[1] = y;
            }
            for k in 1..n {
                row[k + 1] = (y * row[k] - (k as f64).sqrt() * row[k - 1]) / ((k + 1) as f64).sqrt();
            }
            for k in 1..=n {
                dh[i * (n + 1) + k] = (k as f64).sqrt() * h[i * (n + 1) + k - 1] / self.scale[i];
            }
        }
        vals[0] = 1.0;
        grads[..d].iter_mut().for_each(|g| *g = 0.0);
        for (k, alpha) in self.multi_indices.iter().enumerate() {
            let mut v = 1.0;
            for i in 0..d {
                v *= h[i * (n + 1) + alpha[i] as usize];
            }
            vals[k + 1] = v;
            for j in 0..d {
                let mut g = dh[j * (n + 1) + alpha[j] as usize];
                if g != 0.0 {
                    for i in 0..d {
                        if i != j {
                            g *= h[i * (n + 1) + alpha[i] as usize];
                        }
                    }
                }
                grads[(k + 1) * d + j] = g;
            }
        }
    }

    /// Orthonormal basis values and gradients (`grads[k*d + j]`).
    pub fn eval(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let r = self.len() + 1;
        let mut rv = vec![0.0; r];
        let mut rg = vec![0.0; r * d];
        self.raw_eval(x, &mut rv, &mut rg);
        let k = self.len();
        let mut v = vec![0.0; k];
        let mut g = vec![0.0; k * d];
        for a in 0..k {
            for b in 0..r {
                let t = self.gram_transform[(a, b)];
                if t == 0.0 {
                    continue;
                }
                v[a] += t * rv[b];
                for j in 0..d {
                    g[a * d + j] += t * rg[b * d + j];
                }
            }
        }
        (v, g)
    }
}

/// `Σ_nodes w · Rᵀ F` style sums computed per chunk with dense products and
/// reduced in chunk order.
struct Sums {
    gram: DMatrix<f64>,
    stiffness: Option<DMatrix<f64>>,
    rhs: Option<DMatrix<f64>>,
}

fn chunked_sums(
    basis: &PolyBasis,
    rule: &MeasureRule,
    with_stiffness: bool,
    field: Option<&(dyn Fn(&[f64], &mut [f64]) + Sync)>,
    field_len: usize,
) -> Sums {
    let d = basis.dim;
    let r = basis.len() + 1;
    let n = rule.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Sums> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(n);
            let len = e - s;
            let mut vals = DMatrix::<f64>::zeros(len, r);
            let mut wvals = DMatrix::<f64>::zeros(len, r);
            let mut grads = DMatrix::<f64>::zeros(len * d, r);
            let mut wgrads = DMatrix::<f64>::zeros(len * d, r);
            let mut f = DMatrix::<f64>::zeros(len, field_len);
            let mut rv = vec![0.0; r];
            let mut rg = vec![0.0; r * d];
            let mut fv = vec![0.0; field_len];
            for (row, i) in (s..e).enumerate() {
                let x = rule.node(i);
                let w = rule.weights[i];
                basis.raw_eval(x, &mut rv, &mut rg);
                for k in 0..r {
                    vals[(row, k)] = rv[k];
                    wvals[(row, k)] = w * rv[k];
                    if with_stiffness {
                        for j in 0..d {
                            grads[(row * d + j, k)] = rg[k * d + j];
                            wgrads[(row * d + j, k)] = w * rg[k * d + j];
                        }
                    }
                }
                if let Some(field) = field {
                    field(x, &mut fv);
                    for (c, v) in fv.iter().enumerate() {
                        f[(row, c)] = *v;
                    }
                }
            }
            Sums {
                gram: wvals.tr_mul(&vals),
                stiffness: with_stiffness.then(|| wgrads.tr_mul(&grads)),
                rhs: field.map(|_| wvals.tr_mul(&f)),
            }
        })
        .collect();
    let mut total = Sums {
        gram: DMatrix::zeros(r, r),
        stiffness: with_stiffness.then(|| DMatrix::zeros(r, r)),
        rhs: field.map(|_| DMatrix::zeros(r, field_len)),
    };
    for p in parts {
        total.gram += p.gram;
        if let (Some(a), Some(b)) = (total.stiffness.as_mut(), p.stiffness) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (total.rhs.as_mut(), p.rhs) {
            *a += b;
        }
    }
    total
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn assembly_rule(spec: &MeasureSpec, degree: u32, cfg: &IntegrationConfig) -> Result<MeasureRule> {
    let d = spec.dim();
    if d > MAX_DIM {
        return Err(precondition(format!("Galerkin assembly supports d <= {MAX_DIM}, got {d}")));
    }
    let mut cfg = cfg.clone();
    if d > MAX_TENSOR_DIM {
        cfg.mode = IntegrationMode::MonteCarlo;
    }
    measure_rule_for_order(spec, &cfg, (2 * degree).max(2))
}

/// Builds the ν-orthonormal polynomial basis of total degree `1..=N`.
pub fn build_basis(spec: &MeasureSpec, degree: u32, cfg: &IntegrationConfig) -> Result<PolyBasis> {
    if degree == 0 {
        return Err(precondition("Galerkin basis needs degree N >= 1"));
    }
    spec.require_moments(2.0 * degree as f64)?;
    let d = spec.dim();
    let mom = moments(spec, cfg)?;
    let center = mom.mean.clone();
    let scale: Vec<f64> = (0..d).map(|i| mom.covariance[i * d + i].sqrt()).collect();
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::SingularCovariance(scale.iter().cloned().fold(f64::INFINITY, f64::min)));
    }
    let rule = assembly_rule(spec, degree, cfg)?;
    let r = multi_indices(d, degree).len() + 1;
    let mut basis = PolyBasis {
        dim: d,
        max_degree: degree,
        multi_indices: multi_indices(d, degree),
        center,
        scale,
        orthonormalized: false,
        gram_transform: DMatrix::identity(r, r).rows(1, r - 1).into_owned(),
        gram_condition: f64::NAN,
    };
    let mut gram = chunked_sums(&basis, &rule, false, None, 0).gram;
    symmetrize(&mut gram);
    let cond = condition_number(&gram);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned {
            cond,
            hint: format!("Gram matrix of the degree-{degree} basis is numerically singular; reduce N"),
        });
    }
    let chol = Cholesky::new(gram).ok_or_else(|| Error::IllConditioned {
        cond,
        hint: format!("Gram matrix of the degree-{degree} basis is not positive definite; reduce N"),
    })?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or_else(|| Error::SolveFailed("triangular inverse of the Gram factor".into()))?;
    basis.gram_transform = l_inv.rows(1, r - 1).into_owned();
    basis.orthonormalized = true;
    basis.gram_condition = cond;
    Ok(basis)
}

/// Scalar stiffness `∫ ∇h_k·∇h_l dν` of the orthonormal basis.
pub(crate) fn scalar_stiffness(spec: &MeasureSpec, basis: &PolyBasis, cfg: &IntegrationConfig) -> Result<DMatrix<f64>> {
    let rule = assembly_rule(spec, basis.max_degree, cfg)?;
    let sums = chunked_sums(basis, &rule, true, None, 0);
    let t = &basis.gram_transform;
    let mut a = t * sums.stiffness.unwrap() * t.transpose();
    symmetrize(&mut a);
    Ok(a)
}

pub(crate) fn basis_rule(spec: &MeasureSpec, basis: &PolyBasis, cfg: &IntegrationConfig) -> Result<MeasureRule> {
    assembly_rule(spec, basis.max_degree, cfg)
}

/// Block-diagonal stiffness system `A = I_d ⊗ A_s` with right-hand side
/// stored as a `K × d` matrix (column `i` is coordinate `i`).
#[derive(Debug, Clone)]
pub struct StiffnessSystem {
    pub basis: PolyBasis,
    pub scalar_matrix: DMatrix<f64>,
    pub rhs_matrix: DMatrix<f64>,
    pub cond_estimate: f64,
    pub mode: GalerkinMode,
    /// `∫|x|² dν`.
    pub second_moment: f64,
    /// `∫ x·F dν` with `F` the right-hand side field; equals `∫ tr τ dν`
    /// whenever linear functions are in the span.
    pub linear_target: f64,
}

impl StiffnessSystem {
    /// Full `dK × dK` matrix with index `i·K + k` for `e_i h_k`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.basis.len();
        let d = self.basis.dim;
        let mut a = DMatrix::zeros(d * k, d * k);
        for i in 0..d {
            a.view_mut((i * k, i * k), (k, k)).copy_from(&self.scalar_matrix);
        }
        a
    }

    pub fn rhs(&self) -> DVector<f64> {
        let k = self.basis.len();
        let d = self.basis.dim;
        DVector::from_iterator(d * k, (0..d).flat_map(|i| (0..k).map(move |a| (i, a))).map(|(i, a)| self.rhs_matrix[(a, i)]))
    }
}

/// Tolerance on `|∫ x dν|` and `|∫ ∇V dν|`.
pub const CENTERING_TOL: f64 = 1e-6;

pub fn assemble(spec: &MeasureSpec, basis: &PolyBasis, reference: &Reference, cfg: &IntegrationConfig) -> Result<StiffnessSystem> {
    let d = spec.dim();
    if basis.dim != d {
        return Err(Error::SizeMismatch(format!("basis dimension {} vs measure dimension {d}", basis.dim)));
    }
    let potential: Option<&MeasureSpec> = match reference {
        Reference::Gaussian => None,
        Reference::Potential(Some(r)) => Some(r),
        Reference::Potential(None) => Some(spec),
    };
    if let Some(p) = potential {
        if p.dim() != d {
            return Err(Error::SizeMismatch("reference measure dimension differs".into()));
        }
        if p.potential_gradient(&vec![0.0; d]).is_none() && p.potential_gradient(&vec![0.5; d]).is_none() {
            return Err(precondition(format!("{} has no potential gradient", p.name())));
        }
    }
    let rule = assembly_rule(spec, basis.max_degree, cfg)?;
    // field columns: x (d), then for potentials ∇V (d) and |∇V|² (1)
    let field_len = if potential.is_some() { 2 * d + 1 } else { d };
    let field = |x: &[f64], out: &mut [f64]| {
        out[..d].copy_from_slice(x);
        if let Some(p) = potential {
            let g = p.potential_gradient(x).unwrap_or_else(|| vec![f64::NAN; d]);
            out[d..2 * d].copy_from_slice(&g);
            out[2 * d] = g.iter().map(|v| v * v).sum();
        }
    };
    let sums = chunked_sums(basis, &rule, true, Some(&field), field_len);
    let t = &basis.gram_transform;
    let raw_rhs = sums.rhs.unwrap();
    let mean: Vec<f64> = (0..d).map(|i| raw_rhs[(0, i)]).collect();
    let second_moment: f64 = rule.integrate(|x| x.iter().map(|v| v * v).sum());
    let (rhs_cols, linear_target) = match potential {
        None => {
            let worst = mean.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if worst > CENTERING_TOL {
                return Err(Error::NotCentered(worst));
            }
            (raw_rhs.columns(0, d).into_owned(), second_moment)
        }
        Some(_) => {
            let grad_mean = (0..d).map(|i| raw_rhs[(0, d + i)].abs()).fold(0.0, f64::max);
            if !(grad_mean <= CENTERING_TOL) {
                return Err(precondition(format!(
                    "reference potential gradient must integrate to zero under the measure, got |∫∇V dν| = {grad_mean:e}"
                )));
            }
            let energy = raw_rhs[(0, 2 * d)];
            if !energy.is_finite() {
                return Err(Error::DivergentMoment("∫|∇V|² dν is not finite".into()));
            }
            let lt = rule.integrate(|x| {
                let g = potential.unwrap().potential_gradient(x).unwrap_or_else(|| vec![f64::NAN; d]);
                x.iter().zip(&g).map(|(a, b)| a * b).sum()
            });
            (raw_rhs.columns(d, d).into_owned(), lt)
        }
    };
    let mut a = t * sums.stiffness.unwrap() * t.transpose();
    symmetrize(&mut a);
    let b = t * rhs_cols;
    let cond = condition_number(&a);
    Ok(StiffnessSystem {
        basis: basis.clone(),
        scalar_matrix: a,
        rhs_matrix: b,
        cond_estimate: cond,
        mode: reference.mode(),
        second_moment,
        linear_target,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GalerkinSolution {
    pub basis: PolyBasis,
    /// `g_i = Σ_k coeffs[i·K + k] h_k`.
    pub coeffs: Vec<f64>,
    pub energy: f64,
    pub j_value: f64,
    pub mode: GalerkinMode,
    pub regularized: bool,
    pub relative_residual: f64,
    pub cond_estimate: f64,
    pub second_moment: f64,
    pub linear_target: f64,
}

/// Relative residual above which an unregularized solve is rejected.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

pub fn solve(system: &StiffnessSystem) -> Result<GalerkinSolution> {
    let k = system.basis.len();
    let d = system.basis.dim;
    let a = &system.scalar_matrix;
    let mut regularized = false;
    let mut chol = if system.cond_estimate <= MAX_CONDITION { Cholesky::new(a.clone()) } else { None };
    if chol.is_none() {
        let ridge = 1e-12 * a.trace() / k as f64;
        let mut ar = a.clone();
        for i in 0..k {
            ar[(i, i)] += ridge;
        }
        regularized = true;
        chol = Cholesky::new(ar);
        if chol.is_none() {
            return Err(Error::SolveFailed(format!(
                "stiffness matrix not positive definite after ridge (condition estimate {:e})",
                system.cond_estimate
            )));
        }
        log::warn!("stiffness matrix regularized with ridge {ridge:e}");
    }
    let chol = chol.unwrap();
    let c = chol.solve(&system.rhs_matrix);
    let res = (a * &c - &system.rhs_matrix).norm();
    let bn = system.rhs_matrix.norm();
    let relative_residual = if bn > 0.0 { res / bn } else { res };
    if !regularized && relative_residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::SolveFailed(format!("relative residual {relative_residual:e}")));
    }
    let energy: f64 = c.iter().zip(system.rhs_matrix.iter()).map(|(x, y)| x * y).sum();
    let quad: f64 = (0..d).map(|i| {
        let ci = c.column(i);
        (ci.transpose() * a * ci)[(0, 0)]
    }).sum();
    let j_value = 0.5 * quad - energy;
    let coeffs: Vec<f64> = (0..d).flat_map(|i| (0..k).map(move |a| (i, a))).map(|(i, a)| c[(a, i)]).collect();
    Ok(GalerkinSolution {
        basis: system.basis.clone(),
        coeffs,
        energy,
        j_value,
        mode: system.mode,
        regularized,
        relative_residual,
        cond_estimate: system.cond_estimate,
        second_moment: system.second_moment,
        linear_target: system.linear_target,
    })
}

impl GalerkinSolution {
    /// `τ_ij(x) = ∂_j g_i(x)`, row-major.
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.basis.dim;
        let k = self.basis.len();
        let (_, g) = self.basis.eval(x);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for a in 0..k {
                    s += self.coeffs[i * k + a] * g[a * d + j];
                }
                out[i * d + j] = s;
            }
        }
    }

    /// `g(x)`.
    pub fn potential(&self, x: &[f64]) -> Vec<f64> {
        let d = self.basis.dim;
        let k = self.basis.len();
        let (v, _) = self.basis.eval(x);
        (0..d).map(|i| (0..k).map(|a| self.coeffs[i * k + a] * v[a]).sum()).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let t = &self.basis.gram_transform;
        let rows: Vec<Vec<f64>> = (0..t.nrows()).map(|i| t.row(i).iter().copied().collect()).collect();
        serde_json::json!({
            "dim": self.basis.dim,
            "degree": self.basis.max_degree,
            "multi_indices": self.basis.multi_indices,
            "center": self.basis.center,
            "scale": self.basis.scale,
            "gram_transform": rows,
            "coeffs": self.coeffs,
            "energy": self.energy,
            "mode": self.mode,
            "regularized_flag": self.regularized,
        })
    }

    /// Rebuilds an evaluable solution from [`GalerkinSolution::to_json`].
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Stored {
            dim: usize,
            degree: u32,
            multi_indices: Vec<Vec<u32>>,
            center: Vec<f64>,
            scale: Vec<f64>,
            gram_transform: Vec<Vec<f64>>,
            coeffs: Vec<f64>,
            energy: f64,
            mode: GalerkinMode,
            regularized_flag: bool,
        }
        let s: Stored = serde_json::from_value(v.clone())?;
        let k = s.multi_indices.len();
        let bad = |what: &str| Error::SizeMismatch(format!("stored solution: {what}"));
        if s.center.len() != s.dim || s.scale.len() != s.dim || s.multi_indices.iter().any(|a| a.len() != s.dim) {
            return Err(bad("dimension"));
        }
        if s.multi_indices.iter().any(|a| a.iter().sum::<u32>() > s.degree) {
            return Err(bad("multi-index above the degree"));
        }
        if s.gram_transform.len() != k || s.gram_transform.iter().any(|r| r.len() != k + 1) {
            return Err(bad("gram_transform shape"));
        }
        if s.coeffs.len() != k * s.dim {
            return Err(bad("coefficient count"));
        }
        let gram_transform = DMatrix::from_fn(k, k + 1, |i, j| s.gram_transform[i][j]);
        let basis = PolyBasis {
            dim: s.dim,
            max_degree: s.degree,
            multi_indices: s.multi_indices,
            center: s.center,
            scale: s.scale,
            orthonormalized: true,
            gram_transform,
            gram_condition: f64::NAN,
        };
        Ok(GalerkinSolution {
            basis,
            coeffs: s.coeffs,
            energy: s.energy,
            j_value: f64::NAN,
            mode: s.mode,
            regularized: s.regularized_flag,
            relative_residual: f64::NAN,
            cond_estimate: f64::NAN,
            second_moment: f64::NAN,
            linear_target: f64::NAN,
        })
    }
}

pub fn kernel_field(sol: &GalerkinSolution) -> KernelField {
    KernelField::from_galerkin(Arc::new(sol.clone()))
}

/// Discrepancy of the Galerkin kernel with its in-span and out-of-span
/// weak residuals.
pub fn discrepancy_estimate(
    sol: &GalerkinSolution,
    spec: &MeasureSpec,
    reference: &Reference,
    cfg: &IntegrationConfig,
) -> Result<DiscrepancyReport> {
    if sol.basis.is_empty() {
        return Err(precondition("empty Galerkin basis"));
    }
    let d = sol.basis.dim;
    let s_squared = (sol.energy - 2.0 * sol.linear_target + d as f64).max(0.0);
    let tau = kernel_field(sol);
    let rhs = match reference {
        Reference::Gaussian => Rhs::Position,
        Reference::Potential(Some(r)) => Rhs::Potential(r),
        Reference::Potential(None) => Rhs::Potential(spec),
    };
    let n = sol.basis.max_degree;
    let rule = assembly_rule(spec, n + 1, cfg)?;
    let in_span = residual_on_rule(&tau, &rule, &TestBank::polynomial(d, n), rhs)?;
    let probe_bank = TestBank::for_moment_budget(d, spec.moment_budget());
    let probe_order = (2 * probe_bank.max_degree()).max(2 * n).max(2);
    let probe_rule = if probe_order <= 2 * (n + 1) { rule } else { assembly_rule(spec, probe_order / 2, cfg)? };
    let probe = residual_on_rule(&tau, &probe_rule, &probe_bank, rhs)?;
    let mut report = DiscrepancyReport {
        s_squared,
        second_moment_tau: sol.energy,
        bound_value: None,
        bound_name: String::new(),
        residual_max: probe.max,
        in_span_residual: Some(in_span.max),
    };
    if let (Some(cp), GalerkinMode::GaussianReference) = (spec.known_poincare(), sol.mode) {
        report = report.with_poincare_bound(cp, sol.second_moment, d);
    }
    Ok(report)
}

/// Builds, assembles and solves in one call.
pub fn galerkin_solve(spec: &MeasureSpec, degree: u32, reference: &Reference, cfg: &IntegrationConfig) -> Result<GalerkinSolution> {
    let basis = build_basis(spec, degree, cfg)?;
    let system = assemble(spec, &basis, reference, cfg)?;
    solve(&system)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel1d::{closed_form_kernel, GridDensity1D, DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
    use crate::measures::catalog;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> IntegrationConfig {
        IntegrationConfig::default()
    }

    #[test]
    fn hermite_basis_is_orthonormal_under_gaussian() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let b = build_basis(&g, 3, &cfg()).unwrap();
        assert_eq!(b.len(), 3);
        let expect = DMatrix::<f64>::identity(4, 4).rows(1, 3).into_owned();
        assert!((&b.gram_transform - expect).amax() < 1e-8);
    }

    #[test]
    fn exponential_basis_orthonormal() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let b = build_basis(&e, 2, &cfg()).unwrap();
        assert_eq!(b.len(), 2);
        // independent oracle: E[X^k] for X = Exp(1) − 1 from the binomial expansion of k!
        let raw = |k: u32| -> f64 {
            (0..=k).map(|j| {
                let binom = (1..=k).product::<u32>() as f64 / ((1..=j).product::<u32>() as f64 * (1..=k - j).product::<u32>() as f64);
                binom * (1..=j).product::<u32>() as f64 * (-1f64).powi((k - j) as i32)
            }).sum()
        };
        // each orthonormal function is a polynomial c0 + c1 x + c2 x²; recover coefficients by evaluation
        let coeffs: Vec<[f64; 3]> = (0..2)
            .map(|a| {
                let f = |x: f64| b.eval(&[x]).0[a];
                let (f0, f1, fm) = (f(0.0), f(1.0), f(-1.0));
                [f0, 0.5 * (f1 - fm), 0.5 * (f1 + fm) - f0]
            })
            .collect();
        for a in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += coeffs[a][i] * coeffs[c][j] * raw((i + j) as u32);
                    }
                }
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-8, "({a},{c}): {s}");
            }
            let mean: f64 = (0..3).map(|i| coeffs[a][i] * raw(i as u32)).sum();
            assert!(mean.abs() < 1e-8);
        }
    }

    #[test]
    fn cauchy_budget_rejected() {
        let c = catalog("generalized-cauchy", &[4.0, 1.0]).unwrap();
        assert!(matches!(build_basis(&c, 4, &cfg()), Err(Error::MomentBudget { .. })));
    }

    #[test]
    fn gaussian_solutions() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let sol = galerkin_solve(&g, 3, &Reference::Gaussian, &cfg()).unwrap();
        assert!((sol.coeffs[0] - 1.0).abs() < 1e-10 && sol.coeffs[1].abs() < 1e-10 && sol.coeffs[2].abs() < 1e-10);
        assert!((sol.energy - 1.0).abs() < 1e-10);

        let b = build_basis(&g, 1, &cfg()).unwrap();
        let sys = assemble(&g, &b, &Reference::Gaussian, &cfg()).unwrap();
        assert!((sys.scalar_matrix[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sys.rhs_matrix[(0, 0)] - 1.0).abs() < 1e-12);

        for s2 in [0.25, 4.0] {
            let g = catalog("gaussian", &[s2]).unwrap();
            let sol = galerkin_solve(&g, 1, &Reference::Gaussian, &cfg()).unwrap();
            assert!((sol.energy - s2 * s2).abs() < 1e-10 * s2 * s2);
            assert!((sol.j_value + 0.5 * s2 * s2).abs() < 1e-10);
            let tau = kernel_field(&sol);
            assert!((tau.eval(&[0.7])[0] - s2).abs() < 1e-10);
            let rep = discrepancy_estimate(&sol, &g, &Reference::Gaussian, &cfg()).unwrap();
            let exact = (s2 - 1.0) * (s2 - 1.0);
            assert!((rep.s_squared - exact).abs() < 1e-8);
            assert!((rep.bound_value.unwrap() - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_in_two_dimensions() {
        let g = catalog("gaussian", &[1.0, 2.0]).unwrap();
        let sol = galerkin_solve(&g, 2, &Reference::Gaussian, &cfg()).unwrap();
        let tau = kernel_field(&sol);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t = tau.eval(&x);
            for (a, b) in t.iter().zip([1.0, 0.0, 0.0, 1.0]) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn shifted_exponential_rejected() {
        let e = catalog("centered-exponential", &[1.0]).unwrap().translate(&[0.1]).unwrap();
        let b = build_basis(&e, 2, &cfg()).unwrap();
        assert!(matches!(assemble(&e, &b, &Reference::Gaussian, &cfg()), Err(Error::NotCentered(_))));
    }

    #[test]
    fn exponential_product_in_two_dimensions() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let p = MeasureSpec::product(vec![e.clone(), e]).unwrap();
        let b = build_basis(&p, 2, &cfg()).unwrap();
        let sys = assemble(&p, &b, &Reference::Gaussian, &cfg()).unwrap();
        assert!(sys.cond_estimate.is_finite());
        assert!(Cholesky::new(sys.matrix()).is_some());

        // Monte Carlo oracle for the stiffness entries
        let n = 200_000;
        let pts = p.sample(n, 17).unwrap();
        let k = b.len();
        let mut acc = vec![0.0; k * k];
        let mut acc2 = vec![0.0; k * k];
        for x in pts.rows() {
            let (_, g) = b.eval(x);
            for a in 0..k {
                for c in 0..k {
                    let v = g[a * 2] * g[c * 2] + g[a * 2 + 1] * g[c * 2 + 1];
                    acc[a * k + c] += v;
                    acc2[a * k + c] += v * v;
                }
            }
        }
        for i in 0..k * k {
            let m = acc[i] / n as f64;
            let se = ((acc2[i] / n as f64 - m * m).max(0.0) / n as f64).sqrt();
            let q = sys.scalar_matrix[(i / k, i % k)];
            assert!((m - q).abs() <= 3.0 * se + 1e-12, "entry {i}: mc {m} ± {se}, quad {q}");
        }

        for n in 1..=3 {
            let sol = galerkin_solve(&p, n, &Reference::Gaussian, &cfg()).unwrap();
            let rep = discrepancy_estimate(&sol, &p, &Reference::Gaussian, &cfg()).unwrap();
            assert!(rep.s_squared <= 6.0 * (1.0 + 1e-6), "N={n}: {}", rep.s_squared);
            assert_eq!(rep.bound_value.map(|v| (v * 1e9).round() / 1e9), Some(6.0));
        }
    }

    #[test]
    fn energy_monotone_and_bounded() {
        let s3 = 3f64.sqrt();
        for spec in [
            catalog("uniform", &[-s3, s3]).unwrap(),
            catalog("centered-exponential", &[1.0]).unwrap(),
            catalog("gaussian-mixture", &[0.5, -0.6, 0.64, 0.5, 0.6, 0.64]).unwrap(),
        ] {
            let mut last = 0.0;
            for n in 1..=6 {
                let sol = galerkin_solve(&spec, n, &Reference::Gaussian, &cfg()).unwrap();
                assert!(sol.energy >= last - 1e-10, "{} N={n}", spec.name());
                last = sol.energy;
                assert!((sol.j_value + 0.5 * sol.energy).abs() < 1e-8);
                if let Some(cp) = spec.known_poincare() {
                    assert!(sol.energy <= cp * sol.second_moment * (1.0 + 1e-6));
                }
            }
        }
    }

    #[test]
    fn uniform_energy_bound_and_convergence() {
        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        let sol3 = galerkin_solve(&u, 3, &Reference::Gaussian, &cfg()).unwrap();
        assert!(sol3.energy <= 12.0 / (std::f64::consts::PI.powi(2)) + 1e-9);
        // exact: τ = (3 − x²)/2 is a degree-2 polynomial, so the solve is exact from N=3
        assert!((sol3.energy - 1.2).abs() < 1e-8, "{}", sol3.energy);
        let sol6 = galerkin_solve(&u, 6, &Reference::Gaussian, &cfg()).unwrap();
        let tau = kernel_field(&sol6);
        let p = GridDensity1D::from_spec(&u, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap();
        let exact = closed_form_kernel(&p).unwrap();
        let g = p.grid();
        let worst = (0..g.m).step_by(64).map(|i| (tau.eval(&[g.node(i)])[0] - exact.eval(&[g.node(i)])[0]).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
        let rep = discrepancy_estimate(&sol6, &u, &Reference::Gaussian, &cfg()).unwrap();
        assert!(rep.in_span_residual.unwrap() < 1e-8);
    }

    #[test]
    fn self_reference_gives_identity() {
        for spec in [catalog("gaussian", &[2.0]).unwrap(), catalog("laplace", &[0.5f64.sqrt()]).unwrap()] {
            let r = Reference::Potential(None);
            let sol = galerkin_solve(&spec, 3, &r, &cfg()).unwrap();
            let rep = discrepancy_estimate(&sol, &spec, &r, &cfg()).unwrap();
            assert!(rep.in_span_residual.unwrap() < 1e-6, "{}: {:?}", spec.name(), rep);
            assert!(rep.s_squared < 1e-6);
        }
    }

    #[test]
    fn json_shape() {
        let g = catalog("gaussian", &[1.0, 2.0]).unwrap();
        let sol = galerkin_solve(&g, 2, &Reference::Gaussian, &cfg()).unwrap();
        let v = sol.to_json();
        for key in ["dim", "degree", "multi_indices", "gram_transform", "coeffs", "energy", "mode", "regularized_flag"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["mode"], "gaussian-reference");
        let back = GalerkinSolution::from_json(&v).unwrap();
        let (mut a, mut b) = (vec![0.0; 4], vec![0.0; 4]);
        sol.jacobian_into(&[0.3, -1.2], &mut a);
        back.jacobian_into(&[0.3, -1.2], &mut b);
        assert_eq!(a, b);
    }
}

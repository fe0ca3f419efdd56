use serde::Serialize;

use crate::error::Result;
use crate::measures::MeasureSpec;
use crate::quadrature::{measure_rule_for_order, IntegrationConfig, MeasureRule};

use super::KernelField;

/// Smooth scalar test function with a closed-form gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `Π x_i^{e_i}`.
    Monomial(Vec<u32>),
    Sin { axis: usize, freq: f64 },
    Cos { axis: usize, freq: f64 },
}

impl TestFunction {
    pub fn degree(&self) -> Option<u32> {
        match self {
            TestFunction::Monomial(e) => Some(e.iter().sum()),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::Monomial(e) if e.iter().all(|&k| k == 0) => "1".into(),
            TestFunction::Monomial(e) => e
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(i, &k)| if k == 1 { format!("x{}", i + 1) } else { format!("x{}^{k}", i + 1) })
                .collect::<Vec<_>>()
                .join("*"),
            TestFunction::Sin { axis, freq } => format!("sin({freq}*x{})", axis + 1),
            TestFunction::Cos { axis, freq } => format!("cos({freq}*x{})", axis + 1),
        }
    }

    /// Value at `x`; the gradient is written to `grad`.
    pub fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self {
            TestFunction::Monomial(e) => {
                let pows: Vec<f64> = x.iter().zip(e).map(|(v, &k)| v.powi(k as i32)).collect();
                let value: f64 = pows.iter().product();
                for (i, &k) in e.iter().enumerate() {
                    if k == 0 {
                        continue;
                    }
                    let mut g = k as f64 * x[i].powi(k as i32 - 1);
                    for (j, p) in pows.iter().enumerate() {
                        if j != i {
                            g *= p;
                        }
                    }
                    grad[i] = g;
                }
                value
            }
            TestFunction::Sin { axis, freq } => {
                grad[*axis] = freq * (freq * x[*axis]).cos();
                (freq * x[*axis]).sin()
            }
            TestFunction::Cos { axis, freq } => {
                grad[*axis] = -freq * (freq * x[*axis]).sin();
                (freq * x[*axis]).cos()
            }
        }
    }
}

/// A finite family of test functions for the weak Stein identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TestBank {
    pub dim: usize,
    pub functions: Vec<TestFunction>,
}

impl TestBank {
    /// Monomials of total degree at most `max_degree`, including the constant.
    pub fn polynomial(dim: usize, max_degree: u32) -> Self {
        let mut functions = Vec::new();
        let mut exps = vec![0u32; dim];
        fn rec(i: usize, left: u32, exps: &mut Vec<u32>, out: &mut Vec<TestFunction>) {
            if i == exps.len() {
                out.push(TestFunction::Monomial(exps.clone()));
                return;
            }
            for k in 0..=left {
                exps[i] = k;
                rec(i + 1, left - k, exps, out);
            }
            exps[i] = 0;
        }
        rec(0, max_degree, &mut exps, &mut functions);
        functions.sort_by_key(|f| f.degree());
        Self { dim, functions }
    }

    /// Polynomials up to degree 6 and sine/cosine waves at frequencies 1, 2, 3.
    pub fn standard(dim: usize) -> Self {
        Self::polynomial(dim, 6).with_waves(&[1.0, 2.0, 3.0])
    }

    /// The largest polynomial bank whose squares are integrable under a
    /// moment budget, plus the usual waves.
    pub fn for_moment_budget(dim: usize, budget: f64) -> Self {
        let mut k = 6;
        while k > 0 && 2.0 * k as f64 >= budget {
            k -= 1;
        }
        Self::polynomial(dim, k).with_waves(&[1.0, 2.0, 3.0])
    }

    pub fn with_waves(mut self, freqs: &[f64]) -> Self {
        for &freq in freqs {
            for axis in 0..self.dim {
                self.functions.push(TestFunction::Sin { axis, freq });
                self.functions.push(TestFunction::Cos { axis, freq });
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.functions.iter().filter_map(|f| f.degree()).max().unwrap_or(0)
    }
}

/// Weak-form residuals of a kernel over a bank.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// `max |r(φ)| / (1 + ‖φ‖_{W^{1,2}(ν)})` over the bank and all coordinates.
    pub max: f64,
    pub worst: String,
    pub functions: usize,
}

/// Which vector field the kernel is tested against.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a> {
    /// `∫ x φ dν = ∫ τ ∇φ dν`, the defining identity.
    Position,
    /// `∫ ∇V φ dν = ∫ τ ∇φ dν` for a reference measure `e^{-V}`.
    Potential(&'a MeasureSpec),
}

/// Largest normalized weak residual of `tau` against `spec` over `bank`.
pub fn weak_residual(tau: &KernelField, spec: &MeasureSpec, bank: &TestBank, cfg: &IntegrationConfig) -> Result<f64> {
    Ok(weak_residual_report(tau, spec, bank, Rhs::Position, cfg)?.max)
}

pub fn weak_residual_report(
    tau: &KernelField,
    spec: &MeasureSpec,
    bank: &TestBank,
    rhs: Rhs<'_>,
    cfg: &IntegrationConfig,
) -> Result<ResidualReport> {
    let k = bank.max_degree().max(1);
    spec.require_moments(2.0 * k as f64)?;
    let rule = measure_rule_for_order(spec, cfg, 2 * k)?;
    residual_on_rule(tau, &rule, bank, rhs)
}

pub(crate) fn residual_on_rule(tau: &KernelField, rule: &MeasureRule, bank: &TestBank, rhs: Rhs<'_>) -> Result<ResidualReport> {
    if let Rhs::Potential(reference) = rhs {
        if reference.potential_gradient(rule.node(0)).is_none() {
            return Err(crate::error::precondition(format!("{} has no potential gradient", reference.name())));
        }
    }
    let d = rule.dim;
    let b = bank.len();
    // per function: d residual coordinates, then the squared Sobolev norm
    let stride = d + 1;
    let sums = rule.integrate_vec(b * stride, |x, out| {
        let t = tau.eval(x);
        let field = match rhs {
            Rhs::Position => x.to_vec(),
            Rhs::Potential(reference) => reference.potential_gradient(x).unwrap_or_else(|| vec![f64::NAN; d]),
        };
        let mut grad = vec![0.0; d];
        for (fi, f) in bank.functions.iter().enumerate() {
            let v = f.value_grad(x, &mut grad);
            let o = &mut out[fi * stride..(fi + 1) * stride];
            for i in 0..d {
                let mut tg = 0.0;
                for j in 0..d {
                    tg += t[i * d + j] * grad[j];
                }
                o[i] = field[i] * v - tg;
            }
            o[d] = v * v + grad.iter().map(|g| g * g).sum::<f64>();
        }
    });
    let mut max = 0.0f64;
    let mut worst = String::new();
    for (fi, f) in bank.functions.iter().enumerate() {
        let o = &sums[fi * stride..(fi + 1) * stride];
        let scale = 1.0 + o[d].max(0.0).sqrt();
        for i in 0..d {
            let r = o[i].abs() / scale;
            if r > max || worst.is_empty() {
                max = max.max(r);
                worst = if d == 1 { f.label() } else { format!("{} (coordinate {})", f.label(), i + 1) };
            }
        }
    }
    Ok(ResidualReport { max, worst, functions: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::kernel1d::{closed_form_kernel, GridDensity1D, DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
    use crate::measures::catalog;

    #[test]
    fn identity_kernel_on_gaussians() {
        let cfg = IntegrationConfig::default();
        for d in [1, 2] {
            let g = catalog("gaussian", &[1.0, d as f64]).unwrap();
            let r = weak_residual(&KernelField::identity(d), &g, &TestBank::standard(d), &cfg).unwrap();
            assert!(r < 1e-8, "d={d}: {r}");
        }
    }

    #[test]
    fn identity_fails_on_uniform() {
        let s3 = 3f64.sqrt();
        let u = catalog("uniform", &[-s3, s3]).unwrap();
        let rep = weak_residual_report(&KernelField::identity(1), &u, &TestBank::standard(1), Rhs::Position, &IntegrationConfig::default()).unwrap();
        assert!(rep.max > 0.1, "{rep:?}");
    }

    #[test]
    fn closed_form_on_laplace() {
        let spec = catalog("laplace", &[1.0]).unwrap();
        let p = GridDensity1D::from_spec(&spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap();
        let tau = closed_form_kernel(&p).unwrap();
        let r = weak_residual(&tau, &spec, &TestBank::standard(1), &IntegrationConfig::default()).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn gradient_matches_differences() {
        let bank = TestBank::standard(2);
        let x = [0.3, -0.7];
        let mut g = vec![0.0; 2];
        let mut tmp = vec![0.0; 2];
        for f in &bank.functions {
            f.value_grad(&x, &mut g);
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += 1e-6;
                xm[i] -= 1e-6;
                let fd = (f.value_grad(&xp, &mut tmp) - f.value_grad(&xm, &mut tmp)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6, "{}", f.label());
            }
        }
    }

    #[test]
    fn heavy_tails_reject_high_degrees() {
        let c = catalog("generalized-cauchy", &[3.0, 1.0]).unwrap();
        let err = weak_residual(&KernelField::identity(1), &c, &TestBank::standard(1), &IntegrationConfig::default());
        assert!(matches!(err, Err(Error::MomentBudget { .. })));
        let bank = TestBank::for_moment_budget(1, c.moment_budget());
        assert_eq!(bank.max_degree(), 2);
    }
}

use std::f64::consts::PI;

use super::{fmt_num, log_sphere_area, Family, MeasureSpec, SamplerKind, SupportKind, SupportRegion};
use crate::error::{precondition, Error, Result};

/// Names accepted by [`catalog`].
pub const CATALOG_NAMES: &[(&str, &str)] = &[
    ("gaussian", "variance [, dim]"),
    ("uniform", "a, b"),
    ("laplace", "b"),
    ("centered-exponential", "lambda"),
    ("generalized-cauchy", "beta, dim"),
    ("subexponential", "p, dim"),
    ("gaussian-mixture", "w1, m1, v1, w2, m2, v2, ..."),
    ("uniform-annuli", "r1, r2, r3, r4"),
];

fn out_of_range(measure: &str, reason: impl Into<String>) -> Error {
    Error::ParameterOutOfRange { measure: measure.into(), reason: reason.into() }
}

fn arity(name: &str, params: &[f64], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&params.len()) {
        Ok(())
    } else {
        Err(out_of_range(name, format!("expected {allowed:?} parameters, got {}", params.len())))
    }
}

fn positive(name: &str, what: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(out_of_range(name, format!("{what} must be positive and finite, got {v}")))
    }
}

fn dimension(name: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= 64.0 {
        Ok(v as usize)
    } else {
        Err(out_of_range(name, format!("dimension must be a positive integer, got {v}")))
    }
}

/// Builds a catalog measure from its name and positional parameters.
///
/// Products are built with [`MeasureSpec::product`].
pub fn catalog(name: &str, params: &[f64]) -> Result<MeasureSpec> {
    match name {
        "gaussian" => {
            arity(name, params, &[1, 2])?;
            let var = positive(name, "variance", params[0])?;
            let d = params.get(1).map(|&v| dimension(name, v)).transpose()?.unwrap_or(1);
            MeasureSpec::isotropic_gaussian(var, d)
        }
        "uniform" => {
            arity(name, params, &[2])?;
            let (a, b) = (params[0], params[1]);
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(out_of_range(name, format!("need finite a < b, got ({a}, {b})")));
            }
            let l = b - a;
            Ok(MeasureSpec::build(
                format!("uniform({}, {})", fmt_num(a), fmt_num(b)),
                1,
                Family::Uniform { a, b },
                SupportRegion { kind: SupportKind::Interval, bounds: vec![(a, b)] },
                Some((l / PI).powi(2)),
                SamplerKind::InverseCdf,
                f64::INFINITY,
            ))
        }
        "laplace" => {
            arity(name, params, &[1])?;
            let b = positive(name, "scale", params[0])?;
            Ok(MeasureSpec::build(
                format!("laplace({})", fmt_num(b)),
                1,
                Family::Laplace { b },
                SupportRegion::whole(1),
                Some(4.0 * b * b),
                SamplerKind::InverseCdf,
                f64::INFINITY,
            ))
        }
        "centered-exponential" => {
            arity(name, params, &[1])?;
            let lambda = positive(name, "rate", params[0])?;
            Ok(MeasureSpec::build(
                format!("centered-exponential({})", fmt_num(lambda)),
                1,
                Family::CenteredExponential { lambda },
                SupportRegion { kind: SupportKind::HalfLine, bounds: vec![(-1.0 / lambda, f64::INFINITY)] },
                Some(4.0 / (lambda * lambda)),
                SamplerKind::Direct,
                f64::INFINITY,
            ))
        }
        "generalized-cauchy" => {
            arity(name, params, &[2])?;
            let beta = positive(name, "beta", params[0])?;
            let d = dimension(name, params[1])?;
            let min = (0.5 * (d as f64 + 4.0)).max(d as f64);
            if !(beta > min) {
                return Err(out_of_range(name, format!("requires beta > max((d+4)/2, d) = {min}, got {beta}")));
            }
            MeasureSpec::generalized_cauchy_unchecked(beta, d)
        }
        "subexponential" => {
            arity(name, params, &[2])?;
            let p = positive(name, "p", params[0])?;
            let d = dimension(name, params[1])?;
            let log_norm = log_sphere_area(d) + statrs::function::gamma::ln_gamma(d as f64 / p) - p.ln();
            Ok(MeasureSpec::build(
                format!("subexponential({}, d={d})", fmt_num(p)),
                d,
                Family::Subexponential { p, log_norm },
                SupportRegion::whole(d),
                None,
                SamplerKind::Direct,
                f64::INFINITY,
            ))
        }
        "gaussian-mixture" => {
            if params.is_empty() || params.len() % 3 != 0 {
                return Err(out_of_range(name, "parameters come in (weight, mean, variance) triples"));
            }
            let mut weights = Vec::new();
            let mut means = Vec::new();
            let mut variances = Vec::new();
            for t in params.chunks(3) {
                weights.push(positive(name, "weight", t[0])?);
                if !t[1].is_finite() {
                    return Err(out_of_range(name, "means must be finite"));
                }
                means.push(t[1]);
                variances.push(positive(name, "variance", t[2])?);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Ok(MeasureSpec::build(
                format!("gaussian-mixture({} components)", weights.len()),
                1,
                Family::GaussianMixture { weights, means, variances },
                SupportRegion::whole(1),
                None,
                SamplerKind::Direct,
                f64::INFINITY,
            ))
        }
        "uniform-annuli" => {
            arity(name, params, &[4])?;
            let r = [params[0], params[1], params[2], params[3]];
            if !(r[0] >= 0.0 && r[0] < r[1] && r[1] < r[2] && r[2] < r[3] && r[3].is_finite()) {
                return Err(precondition(format!(
                    "annuli radii must satisfy 0 <= r1 < r2 < r3 < r4, got {r:?}"
                )));
            }
            Ok(MeasureSpec::build(
                format!(
                    "uniform-annuli({}, {}, {}, {})",
                    fmt_num(r[0]),
                    fmt_num(r[1]),
                    fmt_num(r[2]),
                    fmt_num(r[3])
                ),
                2,
                Family::UniformAnnuli { radii: r },
                SupportRegion {
                    kind: SupportKind::Annuli { radii: r },
                    bounds: vec![(-r[3], r[3]); 2],
                },
                None,
                SamplerKind::Rejection,
                f64::INFINITY,
            ))
        }
        "product" => Err(precondition("products are built from component measures, not parameters")),
        other => Err(Error::UnknownMeasure(other.to_string())),
    }
}

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel1d::GridDensity1D;
use crate::quadrature::{cum4_weights, ordered_sum};

/// Density values below this fraction of the maximum are left out of logs.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Allowed relative disagreement between the Fisher information on the grid
/// and on its even-indexed subgrid.
pub const FISHER_CONSISTENCY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyFisher {
    /// Relative entropy `∫ log(dν/dγ) dν`.
    pub entropy: f64,
    /// Relative Fisher information `∫ |∇ log(dν/dγ)|² dν`.
    pub fisher: f64,
}

/// Relative Fisher information from nodal values; `None` marks floored nodes.
///
/// Derivatives of `log p` are centered differences; at break nodes the two
/// one-sided slopes are squared and averaged, and next to floored nodes or
/// at the ends the one-sided slope is used.
fn fisher_on(values: &[f64], lo: f64, h: f64, breaks: &[usize]) -> f64 {
    let m = values.len();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let floor = DENSITY_FLOOR * max;
    let logs: Vec<Option<f64>> = values.iter().map(|&v| (v > floor).then(|| v.ln())).collect();
    let weights = cum4_weights(m, h, breaks);
    let terms: Vec<f64> = (0..m)
        .map(|i| {
            let Some(li) = logs[i] else { return 0.0 };
            let x = lo + i as f64 * h;
            let left = (i > 0).then(|| logs[i - 1]).flatten().map(|l| (li - l) / h + x);
            let right = (i + 1 < m).then(|| logs[i + 1]).flatten().map(|r| (r - li) / h + x);
            let sq = match (left, right) {
                (Some(a), Some(b)) if breaks.contains(&i) => 0.5 * (a * a + b * b),
                (Some(_), Some(_)) => {
                    let c = (logs[i + 1].unwrap() - logs[i - 1].unwrap()) / (2.0 * h) + x;
                    c * c
                }
                (Some(a), None) | (None, Some(a)) => a * a,
                (None, None) => 0.0,
            };
            weights[i] * values[i] * sq
        })
        .collect();
    ordered_sum(&terms)
}

/// Relative entropy and relative Fisher information against the standard
/// Gaussian.
///
/// Jumps of the density (for instance at the ends of a bounded support) are
/// not seen by the difference quotients, so the Fisher information is that
/// of the density on its open support.
pub fn entropy_fisher(p: &GridDensity1D) -> Result<EntropyFisher> {
    Ok(EntropyFisher { entropy: relative_entropy(p), fisher: relative_fisher(p)? })
}

pub(crate) fn relative_entropy(p: &GridDensity1D) -> f64 {
    let values = p.values();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let floor = DENSITY_FLOOR * max;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    p.integrate_nodes(|i, x| {
        let v = values[i];
        if v > floor {
            v.ln() + half_log_2pi + 0.5 * x * x
        } else {
            0.0
        }
    })
}

/// Fisher information, cross-checked against the even-indexed subgrid.
pub(crate) fn relative_fisher(p: &GridDensity1D) -> Result<f64> {
    let values = p.values();
    let g = p.grid();
    let h = g.spacing();
    let fisher = fisher_on(values, g.lo, h, p.breaks());
    let sub: Vec<f64> = values.iter().step_by(2).cloned().collect();
    if sub.len() >= 5 {
        let sub_breaks: Vec<usize> = p.breaks().iter().filter(|&&b| b % 2 == 0).map(|b| b / 2).collect();
        let coarse = fisher_on(&sub, g.lo, 2.0 * h, &sub_breaks);
        if (coarse - fisher).abs() > FISHER_CONSISTENCY * fisher.max(1.0) {
            return Err(Error::FisherInconsistent { coarse, fine: fisher });
        }
    }
    Ok(fisher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel1d::{DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
    use crate::measures::catalog;
    use crate::quadrature::Grid1D;

    fn grid(name: &str, params: &[f64]) -> GridDensity1D {
        GridDensity1D::from_spec(&catalog(name, params).unwrap(), DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap()
    }

    #[test]
    fn gaussian_closed_forms() {
        let r = entropy_fisher(&grid("gaussian", &[1.0])).unwrap();
        assert!(r.entropy.abs() < 1e-6 && r.fisher.abs() < 1e-6, "{r:?}");
        for s2 in [0.25f64, 0.5, 2.0, 4.0] {
            let r = entropy_fisher(&grid("gaussian", &[s2])).unwrap();
            assert!((r.entropy - 0.5 * (s2 - 1.0 - s2.ln())).abs() < 1e-6);
            assert!((r.fisher - (s2 - 1.0).powi(2) / s2).abs() < 1e-6, "{s2}: {}", r.fisher);
        }
    }

    #[test]
    fn laplace_and_uniform() {
        let l = entropy_fisher(&grid("laplace", &[0.5f64.sqrt()])).unwrap();
        // log(2b) + 1 is the differential entropy of laplace(b)
        let b = 0.5f64.sqrt();
        let h = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 - (2.0 * b).ln() - 1.0;
        assert!((l.entropy - h).abs() < 1e-6);
        assert!((l.fisher - 1.0).abs() < 1e-6, "{}", l.fisher);
        let s3 = 3f64.sqrt();
        let u = entropy_fisher(&grid("uniform", &[-s3, s3])).unwrap();
        assert!((u.entropy - (0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 - (2.0 * s3).ln())).abs() < 1e-9);
        assert!((u.fisher - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_density_is_rejected() {
        let g = Grid1D::new(-8.0, 8.0, 4001).unwrap();
        let values: Vec<f64> = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, x)| (-0.5 * x * x).exp() * if i % 3 == 0 { 1.05 } else { 1.0 })
            .collect();
        let p = GridDensity1D::from_values(g, values, vec![]).unwrap();
        assert!(matches!(entropy_fisher(&p), Err(Error::FisherInconsistent { .. })));
    }
}

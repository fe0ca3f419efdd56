use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{precondition, Error, Result};
use crate::kernel1d::GridDensity1D;
use crate::measures::PointSet;
use crate::quadrature::{legendre_rule, ordered_sum};

/// Largest sample size accepted by [`w2_empirical_nd`].
pub const MAX_ASSIGNMENT: usize = 4096;
/// Half-width of the integration range in Gaussian-quantile coordinates.
const Z_MAX: f64 = 38.0;
const PANELS: usize = 1024;
const PANEL_ORDER: usize = 10;

fn std_normal() -> Normal {
    Normal::standard()
}

/// Quantile of `p` at `u = Φ(z)`, taken from the tail that keeps the
/// smaller probability in relative precision.
fn quantile_at_z(p: &GridDensity1D, z: f64, n: &Normal) -> f64 {
    if z <= 0.0 {
        p.quantile_lower(n.cdf(z))
    } else {
        p.quantile_upper(n.sf(z))
    }
}

/// Break points in `z` at the images of kinks and support ends, where the
/// quantile function is not smooth.
fn z_breaks(p: &GridDensity1D, n: &Normal, out: &mut Vec<f64>) {
    for &b in p.breaks() {
        let u = p.cdf()[b];
        let z = if u <= 0.5 { n.inverse_cdf(u) } else { -n.inverse_cdf(p.survival()[b]) };
        if z.is_finite() && z.abs() < Z_MAX {
            out.push(z);
        }
    }
}

fn z_integral(breaks: Vec<f64>, f: impl Fn(f64) -> f64 + Sync) -> Result<f64> {
    let mut edges: Vec<f64> = (0..=PANELS).map(|i| -Z_MAX + 2.0 * Z_MAX * i as f64 / PANELS as f64).collect();
    edges.extend(breaks);
    edges.push(0.0);
    edges.sort_by(|a, b| a.total_cmp(b));
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let unit = legendre_rule(PANEL_ORDER, 0.0, 1.0)?;
    let parts: Vec<f64> = edges
        .par_windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let terms: Vec<f64> = unit
                .nodes
                .iter()
                .zip(&unit.weights)
                .map(|(t, wt)| {
                    let z = a + (b - a) * t;
                    wt * (b - a) * f(z) * (-0.5 * z * z).exp()
                })
                .collect();
            ordered_sum(&terms)
        })
        .collect();
    Ok(ordered_sum(&parts) / (2.0 * std::f64::consts::PI).sqrt())
}

fn check_normalized(p: &GridDensity1D) -> Result<()> {
    if !p.is_normalized() {
        return Err(Error::Normalization("quantile coupling needs normalized densities".into()));
    }
    Ok(())
}

/// `W₂(p, q)` from the monotone (quantile) coupling.
pub fn w2_quantile_1d(p: &GridDensity1D, q: &GridDensity1D) -> Result<f64> {
    check_normalized(p)?;
    check_normalized(q)?;
    let n = std_normal();
    let mut breaks = Vec::new();
    z_breaks(p, &n, &mut breaks);
    z_breaks(q, &n, &mut breaks);
    let w2 = z_integral(breaks, |z| {
        let d = quantile_at_z(p, z, &n) - quantile_at_z(q, z, &n);
        d * d
    })?;
    Ok(w2.max(0.0).sqrt())
}

/// `W₂(p, γ)` with the exact Gaussian quantile.
pub fn w2_to_gaussian(p: &GridDensity1D) -> Result<f64> {
    check_normalized(p)?;
    let n = std_normal();
    let mut breaks = Vec::new();
    z_breaks(p, &n, &mut breaks);
    let w2 = z_integral(breaks, |z| {
        let d = quantile_at_z(p, z, &n) - z;
        d * d
    })?;
    Ok(w2.max(0.0).sqrt())
}

/// Exact `W₂` between two empirical measures of equal size, by optimal
/// assignment on squared distances.
pub fn w2_empirical_nd(xs: &PointSet, ys: &PointSet) -> Result<f64> {
    if xs.dim != ys.dim {
        return Err(Error::SizeMismatch(format!("dimensions {} and {}", xs.dim, ys.dim)));
    }
    if xs.len() != ys.len() {
        return Err(Error::SizeMismatch(format!("{} and {} points", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n == 0 {
        return Err(Error::InsufficientSamples { got: 0, needed: 1 });
    }
    if n > MAX_ASSIGNMENT {
        return Err(precondition(format!("assignment limited to {MAX_ASSIGNMENT} points, got {n}")));
    }
    let cost: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (xs.row(k / n), ys.row(k % n));
            a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
        })
        .collect();
    let matrix = lapjv::Matrix::from_shape_vec((n, n), cost).map_err(|e| Error::SolveFailed(e.to_string()))?;
    let (rows, _) = lapjv::lapjv(&matrix).map_err(|e| Error::SolveFailed(format!("assignment: {e}")))?;
    let terms: Vec<f64> = rows.iter().enumerate().map(|(i, &j)| matrix[(i, j)]).collect();
    Ok((ordered_sum(&terms) / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel1d::{DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
    use crate::measures::{catalog, MeasureSpec};

    fn grid(spec: &MeasureSpec) -> GridDensity1D {
        GridDensity1D::from_spec(spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap()
    }

    #[test]
    fn gaussian_couplings() {
        let g = grid(&catalog("gaussian", &[1.0]).unwrap());
        assert!(w2_quantile_1d(&g, &g).unwrap() < 1e-12);
        assert!(w2_to_gaussian(&g).unwrap() < 1e-6);
        let shifted = grid(&catalog("gaussian", &[1.0]).unwrap().translate(&[0.7]).unwrap());
        assert!((w2_quantile_1d(&g, &shifted).unwrap() - 0.7).abs() < 1e-6);
        for var in [0.25, 4.0] {
            let s = grid(&catalog("gaussian", &[var]).unwrap());
            let expect = (var.sqrt() - 1.0f64).abs();
            assert!((w2_quantile_1d(&s, &g).unwrap() - expect).abs() < 1e-6);
            assert!((w2_to_gaussian(&s).unwrap() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_against_gaussian() {
        // independent oracle: midpoint rule in u with the exact uniform quantile
        let s3 = 3f64.sqrt();
        let u = grid(&catalog("uniform", &[-s3, s3]).unwrap());
        let n = Normal::standard();
        let k = 2_000_000;
        let oracle: f64 = (0..k)
            .map(|i| {
                let t = (i as f64 + 0.5) / k as f64;
                let d = -s3 + 2.0 * s3 * t - n.inverse_cdf(t);
                d * d
            })
            .sum::<f64>()
            / k as f64;
        let w = w2_to_gaussian(&u).unwrap();
        assert!((w * w - oracle).abs() < 1e-5, "{} vs {oracle}", w * w);
    }

    #[test]
    fn empirical_translation() {
        let g = catalog("gaussian", &[1.0, 2.0]).unwrap();
        let xs = g.sample(300, 1).unwrap();
        assert!(w2_empirical_nd(&xs, &xs).unwrap() < 1e-12);
        let shifted: Vec<f64> = xs.rows().flat_map(|r| [r[0] + 0.3, r[1] - 0.4]).collect();
        let ys = PointSet::new(2, shifted).unwrap();
        assert!((w2_empirical_nd(&xs, &ys).unwrap() - 0.5).abs() < 1e-10);
        let short = g.sample(10, 2).unwrap();
        assert!(matches!(w2_empirical_nd(&xs, &short), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn empirical_gaussian_samples() {
        let g = catalog("gaussian", &[1.0, 2.0]).unwrap();
        let w1024 = w2_empirical_nd(&g.sample(1024, 3).unwrap(), &g.sample(1024, 4).unwrap()).unwrap();
        let w256 = w2_empirical_nd(&g.sample(256, 5).unwrap(), &g.sample(256, 6).unwrap()).unwrap();
        assert!(w1024 > 0.0 && w1024 < 0.3, "{w1024}");
        assert!(w1024 < w256);
    }
}

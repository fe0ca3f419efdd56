use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, Gamma, StandardNormal};

use super::{Family, MeasureSpec, SamplerKind};
use crate::error::{Error, Result};
use crate::kernel1d::GridDensity1D;

/// `n` points in ℝ^d stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::SizeMismatch(format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += (r[i] - m[i]) * (r[j] - m[j]);
                }
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|v| *v /= n - 1.0);
        c
    }
}

const MIN_ACCEPTANCE: f64 = 1e-3;

pub(super) fn sample(spec: &MeasureSpec, n: usize, seed: u64) -> Result<PointSet> {
    if spec.sampler() == SamplerKind::Unavailable {
        return Err(Error::NoSampler(spec.name().to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * spec.dim());
    let prepared = prepare(spec)?;
    let mut stats = (0usize, 0usize);
    for _ in 0..n {
        draw(spec, &mut rng, &prepared, &mut data, &mut stats)?;
    }
    PointSet::new(spec.dim(), data)
}

/// Tabulated inverse CDFs built once per call, mirroring the family tree.
enum Prepared {
    Nothing,
    Table(GridDensity1D),
    Affine(Box<Prepared>),
    Product(Vec<Prepared>),
}

fn prepare(spec: &MeasureSpec) -> Result<Prepared> {
    Ok(match &spec.family {
        Family::Expression(_) => Prepared::Table(GridDensity1D::from_spec(spec, 1 << 14 | 1, 1e-12)?),
        Family::Tabulated(g) => Prepared::Table(g.clone()),
        Family::Affine(a) => Prepared::Affine(Box::new(prepare(&a.base)?)),
        Family::Product(c) => Prepared::Product(c.iter().map(prepare).collect::<Result<_>>()?),
        _ => Prepared::Nothing,
    })
}

fn draw(
    spec: &MeasureSpec,
    rng: &mut ChaCha8Rng,
    prepared: &Prepared,
    out: &mut Vec<f64>,
    stats: &mut (usize, usize),
) -> Result<()> {
    match &spec.family {
        Family::Gaussian(g) => {
            let d = spec.dim();
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = &g.chol * z + &g.mean;
            out.extend_from_slice(x.as_slice());
        }
        Family::Uniform { a, b } => out.push(a + (b - a) * rng.random::<f64>()),
        Family::Laplace { b } => {
            let u: f64 = rng.random::<f64>() - 0.5;
            let s = if u < 0.0 { -1.0 } else { 1.0 };
            out.push(-b * s * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln());
        }
        Family::CenteredExponential { lambda } => {
            let e = Exp::new(*lambda).map_err(|e| Error::NoSampler(e.to_string()))?;
            out.push(e.sample(rng) - 1.0 / lambda);
        }
        Family::GeneralizedCauchy { beta, .. } => {
            let d = spec.dim();
            let chi = ChiSquared::new(2.0 * beta - d as f64).map_err(|e| Error::NoSampler(e.to_string()))?;
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let s = chi.sample(rng).sqrt();
            out.extend(z.into_iter().map(|v| v / s));
        }
        Family::Subexponential { p, .. } => {
            let d = spec.dim();
            let gamma = Gamma::new(d as f64 / p, 1.0).map_err(|e| Error::NoSampler(e.to_string()))?;
            let r = gamma.sample(rng).powf(1.0 / p);
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if d == 1 {
                out.push(if z[0] < 0.0 { -r } else { r });
            } else {
                out.extend(z.into_iter().map(|v| r * v / norm));
            }
        }
        Family::Product(comps) => {
            for (i, c) in comps.iter().enumerate() {
                let p = match prepared {
                    Prepared::Product(v) => &v[i],
                    _ => &Prepared::Nothing,
                };
                draw(c, rng, p, out, stats)?;
            }
        }
        Family::GaussianMixture { weights, means, variances } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            out.push(means[k] + variances[k].sqrt() * z);
        }
        Family::UniformAnnuli { radii } => {
            let r4 = radii[3];
            loop {
                let x = [r4 * (2.0 * rng.random::<f64>() - 1.0), r4 * (2.0 * rng.random::<f64>() - 1.0)];
                stats.1 += 1;
                if spec.support().contains(&x) {
                    stats.0 += 1;
                    out.extend_from_slice(&x);
                    break;
                }
                if stats.1 >= 1000 {
                    let rate = stats.0 as f64 / stats.1 as f64;
                    if rate < MIN_ACCEPTANCE {
                        return Err(Error::RejectionRate { rate, accepted: stats.0, proposed: stats.1 });
                    }
                }
            }
        }
        Family::Expression(_) | Family::Tabulated(_) => {
            let Prepared::Table(g) = prepared else {
                return Err(Error::NoSampler(spec.name().to_string()));
            };
            out.push(g.quantile(rng.random::<f64>()));
        }
        Family::Affine(a) => {
            let mut base = Vec::with_capacity(spec.dim());
            let inner = match prepared {
                Prepared::Affine(p) => p.as_ref(),
                _ => &Prepared::Nothing,
            };
            draw(&a.base, rng, inner, &mut base, stats)?;
            out.extend(a.push(&base));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::catalog;

    #[test]
    fn gaussian_variance_band() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let s = g.sample(100_000, 7).unwrap();
        let v = s.covariance()[0];
        assert!((0.99..=1.01).contains(&v), "variance {v}");
    }

    #[test]
    fn deterministic_given_seed() {
        for spec in [
            catalog("laplace", &[1.0]).unwrap(),
            catalog("uniform-annuli", &[0.5, 1.0, 2.0, 2.5]).unwrap(),
            catalog("generalized-cauchy", &[3.5, 2.0]).unwrap(),
        ] {
            assert_eq!(spec.sample(500, 3).unwrap(), spec.sample(500, 3).unwrap());
            assert_ne!(spec.sample(500, 3).unwrap(), spec.sample(500, 4).unwrap());
        }
    }

    #[test]
    fn annuli_rejection_rate_guard() {
        let thin = catalog("uniform-annuli", &[0.0, 1e-3, 1.0 - 1e-5, 1.0]).unwrap();
        assert!(matches!(thin.sample(10, 1), Err(Error::RejectionRate { .. })));
    }

    #[test]
    fn samples_match_moments_within_bands() {
        let specs = [
            catalog("centered-exponential", &[1.0]).unwrap(),
            catalog("laplace", &[0.5f64.sqrt()]).unwrap(),
            catalog("subexponential", &[0.5, 1.0]).unwrap(),
            catalog("gaussian-mixture", &[0.5, -1.0, 0.25, 0.5, 1.0, 0.25]).unwrap(),
        ];
        let cfg = crate::quadrature::IntegrationConfig::default();
        for spec in &specs {
            let m = crate::measures::moments(spec, &cfg).unwrap();
            let n = 200_000;
            let s = spec.sample(n, 11).unwrap();
            let var = m.covariance[0];
            let band = 5.0 * (var / n as f64).sqrt();
            assert!((s.mean()[0] - m.mean[0]).abs() < band, "{}: mean", spec.name());
            let fourth = m.fourth_moment.unwrap();
            let band_v = 5.0 * ((fourth - var * var).max(0.0) / n as f64).sqrt();
            assert!((s.covariance()[0] - var).abs() < band_v, "{}: variance", spec.name());
        }
    }
}

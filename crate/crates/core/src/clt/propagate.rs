use std::sync::Arc;

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::error::{precondition, Error, Result};
use crate::kernel1d::KernelField;
use crate::measures::{MeasureSpec, PointSet};

/// Fewest Monte Carlo pairs accepted by [`propagate_kernel`].
pub const MIN_PAIRS: usize = 1000;

enum Index {
    /// Sorted coordinates with original indices.
    Line(Vec<(f64, usize)>),
    D2(ImmutableKdTree<f64, 2>),
    D3(ImmutableKdTree<f64, 3>),
    D4(ImmutableKdTree<f64, 4>),
    D5(ImmutableKdTree<f64, 5>),
    D6(ImmutableKdTree<f64, 6>),
}

/// k-nearest-neighbour local-linear regression of matrix-valued targets.
pub struct NeighborRegression {
    dim: usize,
    k: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
    index: Index,
}

impl std::fmt::Debug for NeighborRegression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NeighborRegression").field("dim", &self.dim).field("k", &self.k).field("len", &self.len()).finish()
    }
}

macro_rules! tree {
    ($d:literal, $points:expr) => {{
        let entries: Vec<[f64; $d]> = $points
            .chunks_exact($d)
            .map(|row| {
                let mut p = [0.0; $d];
                p.copy_from_slice(row);
                p
            })
            .collect();
        ImmutableKdTree::<f64, $d>::new_from_slice(&entries)
            .map_err(|e| precondition(format!("neighbour index construction failed: {e:?}")))?
    }};
}

macro_rules! query {
    ($t:expr, $d:literal, $x:expr, $k:expr) => {{
        let mut p = [0.0; $d];
        p.copy_from_slice($x);
        let mut v: Vec<(f64, usize)> =
            $t.query(&p)
                .nearest_n::<SquaredEuclidean<f64>>(NonZero::new($k).unwrap())
                .execute()
                .into_iter()
                .map(|n| (n.distance, n.item as usize))
                .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.into_iter().map(|(_, i)| i).collect::<Vec<usize>>()
    }};
}

impl NeighborRegression {
    /// `k = ⌈√N⌉` neighbours.
    pub fn new(points: PointSet, targets: Vec<f64>) -> Result<Self> {
        let n = points.len();
        let dim = points.dim;
        if targets.len() != n * dim * dim {
            return Err(Error::SizeMismatch(format!("{} targets for {n} points in d = {dim}", targets.len())));
        }
        if n == 0 {
            return Err(Error::InsufficientSamples { got: 0, needed: 1 });
        }
        let k = ((n as f64).sqrt().ceil() as usize).clamp(1, n);
        let data = points.data;
        let index = match dim {
            1 => {
                let mut v: Vec<(f64, usize)> = data.iter().copied().zip(0..).collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                Index::Line(v)
            }
            2 => Index::D2(tree!(2, data)),
            3 => Index::D3(tree!(3, data)),
            4 => Index::D4(tree!(4, data)),
            5 => Index::D5(tree!(5, data)),
            6 => Index::D6(tree!(6, data)),
            _ => return Err(precondition(format!("neighbour regression supports d <= 6, got {dim}"))),
        };
        Ok(Self { dim, k, points: data, targets, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn neighbors(&self) -> usize {
        self.k
    }

    fn nearest(&self, x: &[f64]) -> Vec<usize> {
        let k = self.k;
        match &self.index {
            Index::Line(v) => {
                let q = x[0];
                let mut right = v.partition_point(|p| p.0 < q);
                let mut left = right;
                let mut out = Vec::with_capacity(k);
                while out.len() < k {
                    let take_left = match (left > 0, right < v.len()) {
                        (true, true) => q - v[left - 1].0 <= v[right].0 - q,
                        (true, false) => true,
                        (false, true) => false,
                        (false, false) => break,
                    };
                    if take_left {
                        left -= 1;
                        out.push(v[left].1);
                    } else {
                        out.push(v[right].1);
                        right += 1;
                    }
                }
                out
            }
            Index::D2(t) => query!(t, 2, x, k),
            Index::D3(t) => query!(t, 3, x, k),
            Index::D4(t) => query!(t, 4, x, k),
            Index::D5(t) => query!(t, 5, x, k),
            Index::D6(t) => query!(t, 6, x, k),
        }
    }

    /// Local-linear fit of the targets over the `k` nearest training points,
    /// evaluated at `x`; falls back to the neighbourhood mean when the
    /// neighbours do not span the space.
    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let dd = d * d;
        let idx = self.nearest(x);
        let p = d + 1;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DMatrix::<f64>::zeros(p, dd);
        let mut z = vec![0.0; p];
        for &i in &idx {
            z[0] = 1.0;
            for a in 0..d {
                z[a + 1] = self.points[i * d + a] - x[a];
            }
            let t = &self.targets[i * dd..(i + 1) * dd];
            for a in 0..p {
                for b in 0..p {
                    gram[(a, b)] += z[a] * z[b];
                }
                for (c, v) in t.iter().enumerate() {
                    rhs[(a, c)] += z[a] * v;
                }
            }
        }
        let n = idx.len() as f64;
        let fit = (idx.len() > p).then(|| Cholesky::new(gram.clone())).flatten().and_then(|ch| {
            let diag_min = ch.l().diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
            (diag_min > 1e-10 * n.sqrt()).then(|| ch.solve(&rhs))
        });
        match fit {
            Some(beta) => (0..dd).for_each(|c| out[c] = beta[(0, c)]),
            None => (0..dd).for_each(|c| out[c] = rhs[(0, c)] / n),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.predict_into(x, &mut out);
        out
    }

    /// `(1/N) Σ ‖τ̂(s_i) − Id‖²_HS` over the training points.
    pub fn empirical_discrepancy(&self) -> f64 {
        let d = self.dim;
        let terms: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let p = self.predict(&self.points[i * d..(i + 1) * d]);
                (0..d * d).map(|a| {
                    let id = if a / d == a % d { 1.0 } else { 0.0 };
                    (p[a] - id).powi(2)
                }).sum::<f64>()
            })
            .collect();
        crate::quadrature::ordered_sum(&terms) / self.len() as f64
    }

    pub fn points(&self) -> PointSet {
        PointSet { dim: self.dim, data: self.points.clone() }
    }
}

/// Normalized partial sums `S_m` and `S_n` of `pairs` independent blocks of
/// `n` draws from `spec`.
pub fn partial_sums(spec: &MeasureSpec, n: usize, m: usize, pairs: usize, seed: u64) -> Result<(PointSet, PointSet)> {
    if m == 0 || m > n {
        return Err(precondition(format!("need 1 <= m <= n, got m = {m}, n = {n}")));
    }
    let d = spec.dim();
    let draws = spec.sample(n * pairs, seed)?;
    let mut sm = Vec::with_capacity(pairs * d);
    let mut sn = Vec::with_capacity(pairs * d);
    for b in 0..pairs {
        let mut acc_m = vec![0.0; d];
        let mut acc_n = vec![0.0; d];
        for j in 0..n {
            let x = draws.row(b * n + j);
            for i in 0..d {
                acc_n[i] += x[i];
                if j < m {
                    acc_m[i] += x[i];
                }
            }
        }
        sm.extend(acc_m.iter().map(|v| v / (m as f64).sqrt()));
        sn.extend(acc_n.iter().map(|v| v / (n as f64).sqrt()));
    }
    Ok((PointSet::new(d, sm)?, PointSet::new(d, sn)?))
}

/// Estimates `τₙ(s) = E[τₘ(Sₘ) | Sₙ = s]` by nearest-neighbour regression
/// over paired samples.
pub fn propagate_kernel(tau_m: &KernelField, samples_m: &PointSet, samples_n: &PointSet) -> Result<KernelField> {
    let n = samples_m.len();
    if samples_n.len() != n || samples_n.dim != samples_m.dim || tau_m.dim() != samples_m.dim {
        return Err(Error::SizeMismatch("paired samples and kernel must agree in size and dimension".into()));
    }
    if n < MIN_PAIRS {
        return Err(Error::InsufficientSamples { got: n, needed: MIN_PAIRS });
    }
    let targets: Vec<f64> = samples_m.rows().flat_map(|x| tau_m.eval(x)).collect();
    let reg = NeighborRegression::new(samples_n.clone(), targets)?;
    Ok(KernelField::from_neighbors(Arc::new(reg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::catalog;

    #[test]
    fn gaussian_identity_survives() {
        let g = catalog("gaussian", &[1.0]).unwrap();
        let (sm, sn) = partial_sums(&g, 4, 2, 5000, 1).unwrap();
        let tau = propagate_kernel(&KernelField::identity(1), &sm, &sn).unwrap();
        for x in [-2.0, 0.0, 1.5] {
            assert!((tau.eval(&[x])[0] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn exponential_conditional_mean() {
        let e = catalog("centered-exponential", &[1.0]).unwrap();
        let (sm, sn) = partial_sums(&e, 4, 1, 20_000, 2).unwrap();
        // τ₁(x) = x + 1
        let g = crate::quadrature::Grid1D::new(-1.0, 40.0, 4101).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|x| x + 1.0).collect();
        let tau1_exact = KernelField::tabulated(g, vals, crate::kernel1d::KernelSource::ClosedForm).unwrap();
        let tau4 = propagate_kernel(&tau1_exact, &sm, &sn).unwrap();
        for s in [-0.5, 0.0, 0.8] {
            assert!((tau4.eval(&[s])[0] - (1.0 + s / 2.0)).abs() < 0.06, "s={s}");
        }
    }

    #[test]
    fn self_conditioning_and_size_guard() {
        let g = catalog("laplace", &[0.5f64.sqrt()]).unwrap();
        let (sm, sn) = partial_sums(&g, 3, 3, 100_000, 3).unwrap();
        assert_eq!(sm, sn);
        let grid = crate::quadrature::Grid1D::new(-10.0, 10.0, 2001).unwrap();
        let vals: Vec<f64> = grid.nodes().iter().map(|x| 0.5 + x * x / 4.0).collect();
        let tau = KernelField::tabulated(grid, vals, crate::kernel1d::KernelSource::ClosedForm).unwrap();
        let prop = propagate_kernel(&tau, &sm, &sn).unwrap();
        let err: f64 = sn.rows().map(|x| (prop.eval(x)[0] - tau.eval(x)[0]).powi(2)).sum::<f64>() / sn.len() as f64;
        assert!(err.sqrt() < 0.05, "{err}");
        let (a, b) = partial_sums(&g, 2, 1, 10, 0).unwrap();
        assert!(matches!(propagate_kernel(&tau, &a, &b), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn multivariate_neighbors() {
        let g = catalog("gaussian", &[1.0, 2.0]).unwrap();
        let (sm, sn) = partial_sums(&g, 2, 1, 2000, 9).unwrap();
        let tau = propagate_kernel(&KernelField::identity(2), &sm, &sn).unwrap();
        let t = tau.eval(&[0.3, -0.2]);
        for (a, b) in t.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

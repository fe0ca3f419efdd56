use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{precondition, Error, Result};
use crate::kernel1d::GridDensity1D;
use crate::quadrature::Grid1D;

pub const MAX_CONVOLUTION_POWER: usize = 256;
/// Tolerance on mean and variance drift after convolution.
pub const DRIFT_TOL: f64 = 1e-8;
/// Values below this fraction of the maximum are treated as transform noise.
const NOISE_FLOOR: f64 = 1e-15;
/// Edge mass above which the output support is considered clipped.
const ALIAS_TOL: f64 = 1e-8;

fn fft_len(n: usize) -> usize {
    n.next_power_of_two()
}

/// Linear convolution of two sequences through one forward and one inverse
/// transform per factor.
pub(crate) fn linear_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let len = fft_len(out_len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut fa: Vec<Complex64> = (0..len).map(|i| Complex64::new(a.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut fb: Vec<Complex64> = (0..len).map(|i| Complex64::new(b.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.iter().take(out_len).map(|c| c.re / len as f64).collect()
}

/// `n`-fold self-convolution of a mass vector.
fn power_convolve(mass: &[f64], n: usize) -> Vec<f64> {
    let out_len = n * (mass.len() - 1) + 1;
    let len = fft_len(out_len);
    let mut planner = FftPlanner::<f64>::new();
    let mut f: Vec<Complex64> = (0..len).map(|i| Complex64::new(mass.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    planner.plan_fft_forward(len).process(&mut f);
    for c in f.iter_mut() {
        *c = c.powu(n as u32);
    }
    planner.plan_fft_inverse(len).process(&mut f);
    f.iter().take(out_len).map(|c| c.re / len as f64).collect()
}

/// Cell masses `w_j p_j` under the density's own quadrature weights; their
/// discrete convolution powers integrate exactly like the continuous ones at
/// every node where a factor is cut off.
fn cell_masses(p: &GridDensity1D) -> Vec<f64> {
    p.weights().iter().zip(p.values()).map(|(w, v)| w * v).collect()
}

/// Builds a density from node masses on `(lo, h)`, trimming transform noise,
/// keeping one zero node on each side and decimating to about `target`
/// nodes.
fn density_from_masses(masses: &[f64], lo: f64, h: f64, target: usize) -> Result<GridDensity1D> {
    let max = masses.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Normalization("convolution produced no mass".into()));
    }
    let floor = NOISE_FLOOR * max;
    let first = masses.iter().position(|&v| v > floor).unwrap();
    let last = masses.iter().rposition(|&v| v > floor).unwrap();
    let start = first.saturating_sub(1);
    let end = (last + 1).min(masses.len() - 1);
    let span = end - start;
    let stride = (span / target.max(2)).max(1);
    let count = span.div_ceil(stride) + 1;
    let values: Vec<f64> = (0..count)
        .map(|i| {
            let k = start + i * stride;
            let v = masses.get(k).copied().unwrap_or(0.0);
            if v > floor {
                v / h
            } else {
                0.0
            }
        })
        .collect();
    let grid = Grid1D::new(lo + start as f64 * h, lo + (start + (count - 1) * stride) as f64 * h, count)?;
    GridDensity1D::from_values(grid, values, Vec::new())
}

/// The same density under `x ↦ a x + b`.
pub(crate) fn affine_image(p: &GridDensity1D, a: f64, b: f64) -> Result<GridDensity1D> {
    let g = p.grid();
    let grid = Grid1D::new(a * g.lo + b, a * g.hi + b, g.m)?;
    GridDensity1D::from_values(grid, p.values().iter().map(|v| v / a).collect(), p.breaks().to_vec())
}

/// Law of `(X₁ + … + Xₙ)/√n` for i.i.d. `Xᵢ ~ p`.
pub fn convolve_iid_1d(p: &GridDensity1D, n: usize) -> Result<GridDensity1D> {
    if n == 0 || n > MAX_CONVOLUTION_POWER {
        return Err(precondition(format!("convolution power must lie in 1..={MAX_CONVOLUTION_POWER}, got {n}")));
    }
    let (mean, var) = (p.mean(), p.variance());
    if mean.abs() > 1e-6 || (var - 1.0).abs() > 1e-6 {
        return Err(precondition(format!("input must be centered with unit variance, got mean {mean:e}, variance {var}")));
    }
    if n == 1 {
        return Ok(p.clone());
    }
    let g = p.grid();
    let h = g.spacing();
    let mut masses = power_convolve(&cell_masses(p), n);
    if n == 2 {
        correct_pair_edges(p, &mut masses);
    }
    let max = masses.iter().cloned().fold(0.0, f64::max);
    let edge = masses[0].max(masses[masses.len() - 1]) / max.max(1e-300);
    if edge > ALIAS_TOL && p.values()[0].max(p.values()[g.m - 1]) == 0.0 {
        return Err(Error::Aliasing(edge));
    }
    let sum = density_from_masses(&masses, n as f64 * g.lo, h, g.m)?;
    let rn = (n as f64).sqrt();
    let scaled = affine_image(&sum, 1.0 / rn, 0.0)?;
    standardize(scaled)
}

/// Nodes of a pair convolution within this many steps of either end are
/// recomputed directly.
const EDGE_NODES: usize = 8;

/// Near the ends of the support the integration interval of `p * p` is
/// shorter than the end corrections of the cell weights, so the product
/// weights are wrong there when `p` jumps at an end. Those nodes are
/// integrated directly.
fn correct_pair_edges(p: &GridDensity1D, masses: &mut [f64]) {
    use crate::quadrature::cum4_intervals;
    let v = p.values();
    let m = v.len();
    let h = p.grid().spacing();
    let last = masses.len() - 1;
    for k in 0..EDGE_NODES.min(m) {
        let f: Vec<f64> = (0..=k).map(|j| v[j] * v[k - j]).collect();
        let g: Vec<f64> = (0..=k).map(|j| v[m - 1 - j] * v[m - 1 - (k - j)]).collect();
        masses[k] = h * cum4_intervals(&f, h, &[]).iter().sum::<f64>();
        masses[last - k] = h * cum4_intervals(&g, h, &[]).iter().sum::<f64>();
    }
}

/// Removes residual drift in mean and variance by an affine change of
/// variable; fails if the drift is beyond rounding.
fn standardize(q: GridDensity1D) -> Result<GridDensity1D> {
    let (mean, var) = (q.mean(), q.variance());
    if mean.abs() > 1e-6 || (var - 1.0).abs() > 1e-6 {
        return Err(Error::Normalization(format!("convolution drifted to mean {mean:e}, variance {var}")));
    }
    let s = var.sqrt();
    let out = affine_image(&q, 1.0 / s, -mean / s)?;
    let (mean, var) = (out.mean(), out.variance());
    if mean.abs() > DRIFT_TOL || (var - 1.0).abs() > DRIFT_TOL {
        return Err(Error::Normalization(format!("standardization left mean {mean:e}, variance {var}")));
    }
    Ok(out)
}

/// Law of `√t X + √(1−t) Z` with `X ~ p` and `Z` standard normal.
pub fn gaussian_smooth(p: &GridDensity1D, t: f64) -> Result<GridDensity1D> {
    if !(t > 0.0 && t < 1.0) {
        return Err(precondition(format!("smoothing parameter must lie in (0, 1), got {t}")));
    }
    let scaled = affine_image(p, t.sqrt(), 0.0)?;
    let g = scaled.grid();
    let h = g.spacing();
    let sd = (1.0 - t).sqrt();
    let half = (40.0 * sd / h).ceil() as usize;
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let z = (i as f64 - half as f64) * h / sd;
            norm * (-0.5 * z * z).exp() * h
        })
        .collect();
    let masses = linear_convolve(&cell_masses(&scaled), &kernel);
    density_from_masses(&masses, g.lo - half as f64 * h, h, usize::MAX)
}

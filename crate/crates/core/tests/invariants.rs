//! Property tests over randomized catalog parameters.

use proptest::prelude::*;
use steinlab::clt::{clt_experiment, convolve_iid_1d, Check, CltConfig, DRIFT_TOL};
use steinlab::galerkin::{build_basis, discrepancy_estimate, galerkin_solve, Reference};
use steinlab::kernel1d::{closed_form_kernel, discrepancy_1d, moment_identity_gap, GridDensity1D, DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
use steinlab::measures::{catalog, moments, standardize, MeasureSpec};
use steinlab::quadrature::{measure_rule, IntegrationConfig};
use steinlab::spectral::{poincare_constant_1d, rayleigh_variational_bound};

fn cfg() -> IntegrationConfig {
    IntegrationConfig::default()
}

fn grid(spec: &MeasureSpec) -> GridDensity1D {
    GridDensity1D::from_spec(spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL).unwrap()
}

/// A centered one-dimensional catalog measure with a free shape or scale parameter.
fn centered(kind: usize, a: f64) -> MeasureSpec {
    match kind {
        0 => catalog("gaussian", &[a * a]).unwrap(),
        1 => catalog("uniform", &[-a, a]).unwrap(),
        2 => catalog("laplace", &[a]).unwrap(),
        3 => catalog("centered-exponential", &[1.0 / a]).unwrap(),
        _ => {
            let mu = 0.7 * a / 3.0;
            catalog("gaussian-mixture", &[0.5, -mu, 0.3, 0.5, mu, 0.3]).unwrap()
        }
    }
}

/// The same families, standardized to mean zero and unit variance.
fn isotropic(kind: usize, shape: f64) -> MeasureSpec {
    let s3 = 3f64.sqrt();
    match kind {
        0 => catalog("gaussian", &[1.0]).unwrap(),
        1 => catalog("uniform", &[-s3, s3]).unwrap(),
        2 => catalog("laplace", &[0.5f64.sqrt()]).unwrap(),
        3 => catalog("centered-exponential", &[1.0]).unwrap(),
        4 => {
            let mu = 0.7 * shape;
            catalog("gaussian-mixture", &[0.5, -mu, 1.0 - mu * mu, 0.5, mu, 1.0 - mu * mu]).unwrap()
        }
        _ => standardize(&catalog("subexponential", &[1.0 + 2.0 * shape, 1.0]).unwrap(), &cfg()).unwrap(),
    }
}

fn fast() -> ProptestConfig {
    ProptestConfig { cases: 60, failure_persistence: None, ..ProptestConfig::default() }
}

fn slow() -> ProptestConfig {
    ProptestConfig { cases: 20, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(fast())]

    #[test]
    fn catalog_densities_are_normalized(kind in 0usize..5, a in 0.3f64..3.0) {
        let r = measure_rule(&centered(kind, a), &cfg()).unwrap();
        prop_assert!((r.raw_mass() - 1.0).abs() < 1e-8, "mass {}", r.raw_mass());
    }

    #[test]
    fn standardize_is_idempotent(kind in 1usize..5, a in 0.3f64..3.0, seed in 0u64..1000) {
        let once = standardize(&centered(kind, a), &cfg()).unwrap();
        let twice = standardize(&once, &cfg()).unwrap();
        let pts = once.sample(100, seed).unwrap();
        for x in pts.rows() {
            let (p, q) = (once.density(x), twice.density(x));
            prop_assert!((p - q).abs() <= 1e-12 * p.max(1.0), "{p} vs {q}");
        }
    }

    #[test]
    fn covariance_scales_quadratically(kind in 0usize..5, a in 0.3f64..3.0, s in 0.25f64..4.0) {
        let spec = centered(kind, a);
        let base = moments(&spec, &cfg()).unwrap().covariance[0];
        let scaled = moments(&spec.scale(s).unwrap(), &cfg()).unwrap().covariance[0];
        prop_assert!((scaled - s * s * base).abs() <= 1e-8 * s * s * base);
    }

    #[test]
    fn symmetric_entries_have_no_skew(kind in 0usize..3, a in 0.3f64..3.0) {
        let m = moments(&centered(kind, a), &cfg()).unwrap();
        prop_assert!(m.third_marginal.unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn kernels_satisfy_the_moment_identity(kind in 0usize..5, a in 0.3f64..3.0) {
        let p = grid(&centered(kind, a));
        let tau = closed_form_kernel(&p).unwrap();
        let gap = moment_identity_gap(&tau, &p).unwrap();
        prop_assert!(gap.abs() < 1e-8 * p.second_moment().max(1.0), "gap {gap}");
    }

    #[test]
    fn even_densities_give_even_kernels(kind in prop::sample::select(vec![0usize, 1, 2, 4]), a in 0.3f64..3.0) {
        let p = grid(&centered(kind, a));
        let tau = closed_form_kernel(&p).unwrap();
        let (g, v) = tau.grid_values().unwrap();
        let pmax = p.values().iter().cloned().fold(0.0, f64::max);
        for i in 0..g.m / 2 {
            if p.values()[i] > 1e-8 * pmax {
                prop_assert!((v[i] - v[g.m - 1 - i]).abs() < 1e-8 * v[i].abs().max(1.0), "node {i}");
            }
        }
    }

    #[test]
    fn kernel_scaling_law(kind in 1usize..5, s in 0.5f64..2.0) {
        let spec = centered(kind, 1.0);
        let base = grid(&spec);
        let tau = closed_form_kernel(&base).unwrap();
        let p = grid(&spec.scale(s).unwrap());
        let ts = closed_form_kernel(&p).unwrap();
        let (g, v) = ts.grid_values().unwrap();
        let pmax = p.values().iter().cloned().fold(0.0, f64::max);
        let inner = 0.999 * base.grid().hi.abs().min(base.grid().lo.abs());
        for i in (0..g.m).step_by(11) {
            let x = g.node(i);
            if p.values()[i] > 1e-6 * pmax && (x / s).abs() < inner {
                let expect = s * s * tau.eval(&[x / s])[0];
                prop_assert!((v[i] - expect).abs() < 1e-6, "x={x}: {} vs {expect}", v[i]);
            }
        }
    }

    #[test]
    fn convolution_keeps_mean_and_variance(kind in 1usize..6, shape in 0.0f64..1.0, k in 1u32..6) {
        let p = grid(&isotropic(kind, shape));
        let q = convolve_iid_1d(&p, 1 << k).unwrap();
        prop_assert!(q.mean().abs() < DRIFT_TOL);
        prop_assert!((q.variance() - 1.0).abs() < DRIFT_TOL);
    }
}

proptest! {
    #![proptest_config(slow())]

    #[test]
    fn galerkin_energy_is_monotone_and_bounded(kind in 1usize..5, a in 0.5f64..2.0) {
        let spec = centered(kind, a);
        let cp = spec.known_poincare().unwrap_or_else(|| poincare_constant_1d(&spec, 0).unwrap().cp_estimate);
        let mut last = 0.0;
        for n in 1..=6 {
            let sol = galerkin_solve(&spec, n, &Reference::Gaussian, &cfg()).unwrap();
            prop_assert!(sol.energy >= last - 1e-10 * last, "N={n}: {} < {last}", sol.energy);
            prop_assert!(sol.energy <= cp * sol.second_moment * (1.0 + 1e-6));
            let rep = discrepancy_estimate(&sol, &spec, &Reference::Gaussian, &cfg()).unwrap();
            prop_assert!(rep.in_span_residual.unwrap() < 1e-8);
            last = sol.energy;
        }
    }

    #[test]
    fn self_reference_residual_vanishes(kind in prop::sample::select(vec![0usize, 2]), a in 0.5f64..2.0) {
        let spec = centered(kind, a);
        let r = Reference::Potential(None);
        let sol = galerkin_solve(&spec, 3, &r, &cfg()).unwrap();
        let rep = discrepancy_estimate(&sol, &spec, &r, &cfg()).unwrap();
        prop_assert!(rep.in_span_residual.unwrap() < 1e-6);
    }

    #[test]
    fn poincare_constant_is_affine_covariant(kind in 1usize..5, shift in -2.0f64..2.0, s in 0.5f64..2.0) {
        let spec = centered(kind, 1.0);
        let cp = poincare_constant_1d(&spec, 0).unwrap().cp_estimate;
        let moved = poincare_constant_1d(&spec.translate(&[shift]).unwrap(), 0).unwrap().cp_estimate;
        prop_assert!(((moved - cp) / cp).abs() < 1e-3);
        let scaled = poincare_constant_1d(&spec.scale(s).unwrap(), 0).unwrap().cp_estimate;
        prop_assert!(((scaled - s * s * cp) / (s * s * cp)).abs() < 1e-3);
    }

    #[test]
    fn rayleigh_bounds_rise_to_the_spectral_constant(kind in 1usize..5, a in 0.5f64..2.0) {
        let spec = centered(kind, a);
        let fd = poincare_constant_1d(&spec, 0).unwrap().cp_estimate;
        let mut last = 0.0;
        for n in 1..=5 {
            let r = rayleigh_variational_bound(&spec, &build_basis(&spec, n, &cfg()).unwrap(), &cfg()).unwrap();
            prop_assert!(r >= last - 1e-10 * last && r <= fd * (1.0 + 1e-3), "N={n}: {r} (fd {fd})");
            last = r;
        }
    }

    #[test]
    fn discrepancy_obeys_the_spectral_chain(kind in 0usize..5, a in 0.5f64..2.0) {
        let spec = centered(kind, a);
        let p = grid(&spec);
        let s2 = discrepancy_1d(&closed_form_kernel(&p).unwrap(), &p).unwrap().s_squared;
        let cp = poincare_constant_1d(&spec, 0).unwrap().cp_estimate;
        prop_assert!(s2 <= (cp - 2.0) * p.second_moment() + 1.0 + 1e-3, "{s2} vs cp {cp}");
    }

    #[test]
    fn exact_clt_chain_holds(kind in 0usize..6, shape in 0.0f64..1.0) {
        let spec = isotropic(kind, shape);
        let checks = [Check::Monotonicity, Check::W2VsDiscrepancy, Check::Hsi, Check::W2Rate];
        let records = clt_experiment(&spec, &[1, 2, 4, 8], &checks, &CltConfig::default()).unwrap();
        for r in &records {
            prop_assert!(!r.is_failure(), "{} n={} m={:?}: {} vs {}", r.label, r.n, r.m, r.measured, r.bound);
        }
    }
}

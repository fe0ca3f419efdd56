use rayon::prelude::*;

use super::config::{Expected, LoadedConfig, ReferenceDecl, TaskDecl};
use crate::clt::{
    clt_experiment, poincare_constant, propagation_check, smoothed_fisher_check, w2_to_gaussian, CltConfig, ExperimentRecord,
    RecordKind,
};
use crate::error::{precondition, Result};
use crate::expr::Expression;
use crate::galerkin::{build_basis, discrepancy_estimate, galerkin_solve, kernel_field, GalerkinSolution, Reference};
use crate::kernel1d::{closed_form_kernel, discrepancy_1d, GridDensity1D, KernelField, DEFAULT_GRID_MASS_TOL, DEFAULT_GRID_NODES};
use crate::measures::{moments, MeasureSpec};
use crate::quadrature::IntegrationConfig;
use crate::spectral::{
    condition_c_estimate, converse_weight_bound, poincare_constant_1d, rayleigh_variational_bound, stability_check_poincare,
    stability_check_weighted,
};

/// Records of a whole run and the tasks that could not finish.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<String>,
}

impl RunOutcome {
    /// True when every asserted record passed and no task failed.
    pub fn success(&self) -> bool {
        self.failures.is_empty() && !self.records.iter().any(|r| r.is_failure())
    }
}

const DEFAULT_TOL: f64 = 1e-6;

/// Runs every task; tasks execute in parallel but results keep task order.
pub fn run_tasks(loaded: &LoadedConfig) -> RunOutcome {
    let cfg = &loaded.config;
    let outcomes: Vec<(String, Result<Vec<ExperimentRecord>>)> = cfg
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let spec = &loaded.measures[task.measure()];
            let seed = cfg.seed.wrapping_add(7919 * i as u64);
            let tag = format!("{}#{} ({})", task.kind(), i + 1, task.measure());
            log::info!("running {tag}");
            let start = std::time::Instant::now();
            let result = run_task(task, spec, &cfg.integration, seed).map(|mut recs| {
                let ms = start.elapsed().as_secs_f64() * 1e3;
                for r in recs.iter_mut().filter(|r| r.runtime_ms == 0.0) {
                    r.runtime_ms = ms;
                }
                recs
            });
            (tag, result)
        })
        .collect();
    let mut out = RunOutcome::default();
    for ((tag, result), task) in outcomes.into_iter().zip(&cfg.tasks) {
        match result {
            Ok(records) => out.records.extend(records.into_iter().map(|mut r| {
                r.label = format!("{}/{}", task.measure(), r.label);
                r
            })),
            Err(e) => {
                log::error!("{tag} failed: {e}");
                out.records.push(
                    ExperimentRecord::new(format!("{}/task-failed", task.measure()), RecordKind::Upper, 0, f64::NAN, f64::NAN, 0.0)
                        .with_note(format!("{tag}: {e}")),
                );
                out.failures.push(format!("{tag}: {e}"));
            }
        }
    }
    out
}

fn clt_config(integration: &IntegrationConfig, seed: u64) -> CltConfig {
    CltConfig { integration: integration.clone(), seed, ..CltConfig::default() }
}

fn expected_record(label: &str, n: usize, measured: f64, e: &Expected) -> ExperimentRecord {
    ExperimentRecord::new(label, RecordKind::Approx, n, measured, e.value, e.tol)
}

/// Largest `‖τ(x) − Id‖_max` over seeded random points.
fn identity_gap(tau: &KernelField, spec: &MeasureSpec, points: usize, seed: u64) -> Result<f64> {
    let d = spec.dim();
    let xs = spec.sample(points, seed)?;
    let mut worst: f64 = 0.0;
    let mut t = vec![0.0; d * d];
    for x in xs.rows() {
        tau.eval_into(x, &mut t);
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((t[i * d + j] - id).abs());
            }
        }
    }
    Ok(worst)
}

fn run_task(task: &TaskDecl, spec: &MeasureSpec, integration: &IntegrationConfig, seed: u64) -> Result<Vec<ExperimentRecord>> {
    match task {
        TaskDecl::Kernel1d { grid_nodes, residual_tol, identity_points, s_squared, spectral_cp, slack, .. } => {
            let nodes = grid_nodes.unwrap_or(DEFAULT_GRID_NODES);
            let p = GridDensity1D::from_spec(spec, nodes, DEFAULT_GRID_MASS_TOL)?;
            let tau = closed_form_kernel(&p)?;
            let rep = discrepancy_1d(&tau, &p)?;
            let (cp, note) = if *spectral_cp {
                (poincare_constant_1d(spec, nodes)?.cp_estimate, Some("Cp from finite-difference spectral estimate".to_string()))
            } else {
                poincare_constant(spec, &clt_config(integration, seed))?
            };
            let bound = (cp - 2.0) * p.second_moment() + 1.0;
            let mut rec = ExperimentRecord::new("discrepancy-bound", RecordKind::Upper, 1, rep.s_squared, bound, DEFAULT_TOL);
            if let Some(n) = note {
                rec = rec.with_note(n);
            }
            let mut out = vec![
                rec,
                ExperimentRecord::new("weak-residual", RecordKind::Upper, 1, rep.residual_max, residual_tol.unwrap_or(DEFAULT_TOL), 0.0),
            ];
            if let Some(e) = s_squared {
                out.push(expected_record("discrepancy-value", 1, rep.s_squared, e));
            }
            if let Some([lo, hi]) = slack {
                let gap = bound - rep.s_squared;
                out.push(ExperimentRecord::new("discrepancy-slack-lower", RecordKind::Lower, 1, gap, *lo, 0.0));
                out.push(ExperimentRecord::new("discrepancy-slack-upper", RecordKind::Upper, 1, gap, *hi, 0.0));
            }
            if let Some(k) = identity_points {
                out.push(ExperimentRecord::new("kernel-identity", RecordKind::Upper, *k, identity_gap(&tau, spec, *k, seed)?, DEFAULT_TOL, 0.0));
            }
            Ok(out)
        }
        TaskDecl::Galerkin {
            degrees,
            reference,
            compare_closed_form,
            closed_form_tol,
            in_span_tol,
            residual_tol,
            identity_points,
            s_squared,
            bound_tight,
            ..
        } => {
            let mut degrees = degrees.clone();
            degrees.sort_unstable();
            degrees.dedup();
            if degrees.is_empty() {
                return Err(precondition("galerkin task needs at least one degree"));
            }
            let reference = match reference {
                ReferenceDecl::Gaussian => Reference::Gaussian,
                ReferenceDecl::SelfReference => Reference::Potential(None),
            };
            let gaussian_mode = matches!(reference, Reference::Gaussian);
            let cp = if gaussian_mode { Some(poincare_constant(spec, &clt_config(integration, seed))?) } else { None };
            let solved: Vec<(u32, GalerkinSolution)> = degrees
                .par_iter()
                .map(|&n| Ok((n, galerkin_solve(spec, n, &reference, integration)?)))
                .collect::<Result<_>>()?;
            let mut out = Vec::new();
            let mut prev: Option<(u32, f64)> = None;
            for (n, sol) in &solved {
                let idx = *n as usize;
                let rep = discrepancy_estimate(sol, spec, &reference, integration)?;
                if let Some((cp, note)) = &cp {
                    let mut rec = ExperimentRecord::new("galerkin-energy", RecordKind::Upper, idx, sol.energy, cp * sol.second_moment, DEFAULT_TOL);
                    let bound = (cp - 2.0) * sol.second_moment + spec.dim() as f64;
                    let mut brec = ExperimentRecord::new("discrepancy-bound", RecordKind::Upper, idx, rep.s_squared, bound, DEFAULT_TOL);
                    if let Some(note) = note {
                        rec = rec.with_note(note.clone());
                        brec = brec.with_note(note.clone());
                    }
                    out.push(rec);
                    out.push(brec);
                    if *bound_tight {
                        out.push(ExperimentRecord::new("bound-equality", RecordKind::Approx, idx, rep.s_squared, bound, DEFAULT_TOL));
                    }
                }
                if let Some((m, e)) = prev {
                    out.push(ExperimentRecord::new("galerkin-energy-monotone", RecordKind::Lower, idx, sol.energy, e, 1e-9).with_m(m as usize));
                }
                prev = Some((*n, sol.energy));
                out.push(ExperimentRecord::new(
                    "galerkin-in-span",
                    RecordKind::Upper,
                    idx,
                    rep.in_span_residual.unwrap_or(f64::NAN),
                    in_span_tol.unwrap_or(1e-8),
                    0.0,
                ));
                if !gaussian_mode {
                    out.push(ExperimentRecord::new("weak-residual", RecordKind::Upper, idx, rep.residual_max, residual_tol.unwrap_or(DEFAULT_TOL), 0.0));
                }
                if let Some(e) = s_squared {
                    out.push(expected_record("discrepancy-value", idx, rep.s_squared, e));
                }
            }
            let (top_n, top) = solved.last().unwrap();
            let tau = kernel_field(top);
            if let Some(k) = identity_points {
                out.push(
                    ExperimentRecord::new("kernel-identity", RecordKind::Upper, *top_n as usize, identity_gap(&tau, spec, *k, seed)?, DEFAULT_TOL, 0.0)
                        .with_note(format!("{k} random points")),
                );
            }
            if *compare_closed_form {
                if spec.dim() != 1 {
                    return Err(precondition("closed-form comparison needs a one-dimensional measure"));
                }
                let p = GridDensity1D::from_spec(spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL)?;
                let exact = closed_form_kernel(&p)?;
                let (_, vals) = exact.grid_values().expect("closed-form kernels are tabulated");
                let err = p.integrate_nodes(|i, x| (tau.eval(&[x])[0] - vals[i]).powi(2)).max(0.0).sqrt();
                out.push(ExperimentRecord::new(
                    "galerkin-vs-closed-form",
                    RecordKind::Upper,
                    *top_n as usize,
                    err,
                    closed_form_tol.unwrap_or(0.05),
                    0.0,
                ));
            }
            Ok(out)
        }
        TaskDecl::Spectral { degrees, grid_nodes, cp_tol, weight, condition_degree, discrepancy_chain, .. } => {
            let mut out = Vec::new();
            let nodes = grid_nodes.unwrap_or(DEFAULT_GRID_NODES);
            let known = spec.known_poincare();
            let mut cp_ref = known;
            if spec.dim() == 1 {
                let rep = poincare_constant_1d(spec, nodes)?;
                if let Some(k) = known {
                    out.push(
                        ExperimentRecord::new("poincare-constant", RecordKind::Approx, rep.size, rep.cp_estimate, k, cp_tol.unwrap_or(1e-3))
                            .with_note(format!("convergence gap {:.3e}", rep.convergence_gap)),
                    );
                }
                cp_ref = Some(known.unwrap_or(rep.cp_estimate));
                if *discrepancy_chain {
                    let p = GridDensity1D::from_spec(spec, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL)?;
                    let s2 = discrepancy_1d(&closed_form_kernel(&p)?, &p)?.s_squared;
                    let bound = (rep.cp_estimate - 2.0) * p.second_moment() + 1.0;
                    out.push(
                        ExperimentRecord::new("discrepancy-bound", RecordKind::Upper, 1, s2, bound + 1e-3, 0.0)
                            .with_note("Cp from finite-difference spectral estimate, absolute slack 1e-3"),
                    );
                }
            }
            let mut prev: Option<(u32, f64)> = None;
            let mut degrees = degrees.clone();
            degrees.sort_unstable();
            for n in degrees {
                let basis = build_basis(spec, n, integration)?;
                let r = rayleigh_variational_bound(spec, &basis, integration)?;
                match cp_ref {
                    Some(cp) => out.push(ExperimentRecord::new("rayleigh-bound", RecordKind::Upper, n as usize, r, cp, 1e-3)),
                    None => out.push(
                        ExperimentRecord::new("rayleigh-bound", RecordKind::Upper, n as usize, r, f64::INFINITY, 0.0)
                            .informational()
                            .with_note("no reference Poincaré constant"),
                    ),
                }
                if let Some((m, v)) = prev {
                    out.push(ExperimentRecord::new("rayleigh-monotone", RecordKind::Lower, n as usize, r, v, 1e-9).with_m(m as usize));
                }
                prev = Some((n, r));
                if let Some(w) = weight {
                    let omega = Expression::parse(w, spec.dim())?;
                    let rep = converse_weight_bound(spec, &omega, &basis, integration)?;
                    out.push(
                        ExperimentRecord::new("converse-weight", RecordKind::Upper, n as usize, rep.witness_ratio, 1.0, 0.0)
                            .informational()
                            .with_note(format!("E[|x|^2/omega] = {:.9e}; ratios above 1 refute the weighted inequality", rep.bound)),
                    );
                }
            }
            if let Some(n) = condition_degree {
                let c = condition_c_estimate(spec, *n, integration)?;
                out.push(
                    ExperimentRecord::new("condition-c", RecordKind::Upper, *n as usize, c, f64::INFINITY, 0.0)
                        .informational()
                        .with_note("lower estimate of the best constant; finiteness only"),
                );
            }
            Ok(out)
        }
        TaskDecl::Clt {
            n_list,
            checks,
            samples,
            seeds,
            galerkin_degree,
            rio_n,
            propagation,
            fisher,
            slope,
            slope_from,
            ..
        } => {
            let mut cc = clt_config(integration, seed);
            if let Some(s) = samples {
                cc.samples = *s;
            }
            if let Some(s) = seeds {
                cc.seeds = *s;
            }
            if let Some(g) = galerkin_degree {
                cc.galerkin_degree = *g;
            }
            if let Some(r) = rio_n {
                cc.rio_n = *r;
            }
            let mut out = if checks.is_empty() { Vec::new() } else { clt_experiment(spec, n_list, checks, &cc)? };
            if let Some([lo, hi]) = slope {
                let from = slope_from.unwrap_or(1);
                let pts: Vec<(f64, f64)> = out
                    .iter()
                    .filter(|r| r.label == "w2-rate" && r.n >= from && r.measured > 0.0)
                    .map(|r| ((r.n as f64).ln(), r.measured.ln()))
                    .collect();
                if pts.len() < 2 {
                    return Err(precondition("slope fit needs w2-rate records at two or more indices"));
                }
                let k = pts.len() as f64;
                let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
                let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
                let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
                let b = sxy / sxx;
                let note = format!("least-squares slope of log W2^2 on log n over n >= {from}");
                out.push(ExperimentRecord::new("w2-slope-lower", RecordKind::Lower, from, b, *lo, 0.0).with_note(note.clone()));
                out.push(ExperimentRecord::new("w2-slope-upper", RecordKind::Upper, from, b, *hi, 0.0).with_note(note));
            }
            if let Some(p) = propagation {
                out.extend(propagation_check(spec, p.m, p.n, p.pairs, &cc)?.1);
            }
            if let Some(f) = fisher {
                out.push(smoothed_fisher_check(spec, f.n, f.t, &cc)?);
            }
            Ok(out)
        }
        TaskDecl::Stability { weight, .. } => {
            let cc = clt_config(integration, seed);
            let factors = spec
                .product_factors()
                .ok_or_else(|| precondition("stability checks need a product of one-dimensional factors"))?;
            let mut w2_sq = 0.0;
            for f in &factors {
                let p = GridDensity1D::from_spec(f, DEFAULT_GRID_NODES, DEFAULT_GRID_MASS_TOL)?;
                w2_sq += w2_to_gaussian(&p)?.powi(2);
            }
            let w2 = w2_sq.sqrt();
            let (cp, note) = poincare_constant(spec, &cc)?;
            let mut rec = stability_check_poincare(spec, cp, w2, integration)?;
            if let Some(n) = note {
                rec = rec.with_note(n);
            }
            let mut out = vec![rec];
            if let Some(w) = weight {
                let omega = Expression::parse(w, spec.dim())?;
                let basis = build_basis(spec, 1, integration)?;
                let rep = converse_weight_bound(spec, &omega, &basis, integration)?;
                out.push(stability_check_weighted(spec, rep.bound, w2, integration)?);
            }
            // the normalization is part of the hypothesis; report it for the record
            let mom = moments(spec, integration)?;
            out.push(
                ExperimentRecord::new("second-moment", RecordKind::Approx, 1, mom.second_moment, spec.dim() as f64, 1e-6).informational(),
            );
            Ok(out)
        }
    }
}

//! Particle histograms against the continuity solver and closed forms.
//!
//! The solver runs on a grid `refine` times finer than the comparison grid
//! and is summed back onto it, which keeps upwind numerical diffusion well
//! below the histogram noise.

use serde::{Deserialize, Serialize};

use crate::density::{histogram, l1_distance, DensityGrid, GridSpec, OutOfGrid};
use crate::error::{check_dim, Error, Result};
use crate::fields::VelocityField;
use crate::particles::{integrate_ode, sample_initial, Ensemble, InitialDistribution, Method};
use crate::transport::{recover_velocity, residual, solve_continuity, uniform_times, TransportRun};

use super::{affine_gaussian, initial_density};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReynoldsOptions {
    pub seed: u64,
    pub dt: f64,
    pub method: Method,
    pub cfl: f64,
    /// Solver grid refinement per axis; `None` picks 32, 4 or 1 for p = 1, 2, 3+.
    pub refine: Option<usize>,
    /// Number of uniform solver output intervals over `[0, t_end]`.
    pub intervals: usize,
    pub max_l1_analytic: f64,
    pub max_l1_pde: f64,
}

impl Default for ReynoldsOptions {
    fn default() -> Self {
        ReynoldsOptions {
            seed: 0,
            dt: 1e-3,
            method: Method::Rk4,
            cfl: 0.9,
            refine: None,
            intervals: 50,
            max_l1_analytic: 0.02,
            max_l1_pde: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReynoldsReport {
    pub n_particles: usize,
    pub t_end: f64,
    pub refine: usize,
    pub dropped_particles: usize,
    pub l1_particles_pde: f64,
    pub l1_particles_analytic: Option<f64>,
    pub l1_pde_analytic: Option<f64>,
    pub pde_mass_drift: f64,
    pub pass_pde: bool,
    pub pass_analytic: Option<bool>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ReynoldsOutcome {
    pub report: ReynoldsReport,
    /// Solver run on the refined grid, with uniform snapshots.
    pub run: TransportRun,
    pub particles: Ensemble,
    pub histogram: DensityGrid,
    pub pde: DensityGrid,
    pub analytic: Option<DensityGrid>,
}

/// Moves an ensemble and a density side by side and compares them at `t_end`.
pub fn reynolds_check(
    field: &VelocityField,
    init: &InitialDistribution,
    n_particles: usize,
    t_end: f64,
    grid: &GridSpec,
    opts: &ReynoldsOptions,
) -> Result<ReynoldsOutcome> {
    let p = field.dim();
    check_dim(p, grid.dim())?;
    check_dim(p, init.dim())?;
    if !(t_end > 0.0) {
        return Err(Error::contract("t_end must be positive"));
    }
    let refine = opts.refine.unwrap_or(match p {
        1 => 32,
        2 => 4,
        _ => 1,
    });
    let e0 = sample_initial(init, n_particles, p, 0.0, opts.seed)?;
    let e1 = integrate_ode(field, &e0, t_end, opts.dt, opts.method)?;
    let hist = histogram(&e1, grid, OutOfGrid::Drop)?;

    let fine = grid.refined(refine);
    let d0 = initial_density(init, &fine, 0.0)?;
    let run = solve_continuity(field, &d0, &uniform_times(0.0, t_end, opts.intervals)[1..], opts.cfl)?;
    let mut snapshots = vec![d0];
    snapshots.extend(run.snapshots);
    let run = TransportRun { snapshots, ..run };
    let last = run.snapshots.last().expect("non-empty run");
    let pde_mass_drift = (last.mass() - 1.0).abs();
    let pde = last.coarsen(refine)?;
    let l1_pde = l1_distance(&hist, &pde)?;

    let analytic = match (init, init.cov_matrix()) {
        (InitialDistribution::Gaussian { mean, .. }, Some(cov)) => affine_gaussian(field, mean, &cov, t_end)
            .map(|(m, c)| crate::density::analytic_gaussian(&m, &c, grid, t_end))
            .transpose()?,
        _ => None,
    };
    let l1_analytic = analytic.as_ref().map(|a| l1_distance(&hist, a)).transpose()?;
    let l1_pde_analytic = analytic.as_ref().map(|a| l1_distance(&pde, a)).transpose()?;
    let pass_pde = l1_pde <= opts.max_l1_pde;
    let pass_analytic = l1_analytic.map(|l| l <= opts.max_l1_analytic);
    let report = ReynoldsReport {
        n_particles,
        t_end,
        refine,
        dropped_particles: hist.dropped(),
        l1_particles_pde: l1_pde,
        l1_particles_analytic: l1_analytic,
        l1_pde_analytic,
        pde_mass_drift,
        pass_pde,
        pass_analytic,
        pass: pass_pde && pass_analytic.unwrap_or(true),
    };
    Ok(ReynoldsOutcome {
        report,
        run,
        particles: e1,
        histogram: hist,
        pde,
        analytic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub index: usize,
    pub time: f64,
    pub recovered_cells: usize,
    pub max_relative_error: f64,
    pub self_residual: f64,
    pub alternative_residual: f64,
    pub residual_ratio: f64,
    pub max_error_allowed: f64,
    pub min_ratio: f64,
    pub pass: bool,
}

/// Recovers the velocity from `run` and checks that `alternative` explains it worse.
pub fn uniqueness_check(
    run: &TransportRun,
    truth: &VelocityField,
    alternative: &VelocityField,
    index: Option<usize>,
    max_error_allowed: f64,
    min_ratio: f64,
) -> Result<UniquenessReport> {
    let index = index.unwrap_or(run.snapshots.len() / 2);
    let rec = recover_velocity(run, Some(index), None)?;
    let err = rec.max_relative_error(truth)?;
    let own = residual(truth, run, index)?.norm_inf();
    let alt = residual(alternative, run, index)?.norm_inf();
    let ratio = if own > 0.0 { alt / own } else { f64::INFINITY };
    Ok(UniquenessReport {
        index,
        time: rec.time,
        recovered_cells: rec.recovered_cells(),
        max_relative_error: err,
        self_residual: own,
        alternative_residual: alt,
        residual_ratio: ratio,
        max_error_allowed,
        min_ratio,
        pass: err <= max_error_allowed && ratio > min_ratio,
    })
}

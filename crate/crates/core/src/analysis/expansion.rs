//! Concentration, moment-expansion and dual-expansion checks.
//!
//! Each check starts from a narrow Gaussian `N(x0, sigma^2 I)`, advances it
//! by one short window, and compares the measured moments with the shift
//! series `g(x, t; dt)` of the field. Decay claims are reported as fitted
//! log-log orders over a decreasing ladder.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::density::{analytic_gaussian, moments, moments_ensemble, Axis, DensityGrid, GridSpec};
use crate::error::{check_dim, Error, Result};
use crate::fields::{ScalarFunction, ShiftSeries, VelocityField};
use crate::par;
use crate::particles::{integrate_ode, Ensemble, sample_initial, InitialDistribution, Method};
use crate::quadrature::GaussHermite;
use crate::transport::solve_continuity;

use super::ScalingReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    Pde,
    Particles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionOptions {
    pub mode: ExpansionMode,
    pub t0: f64,
    /// PDE cell width as a multiple of `sigma^2`.
    pub spacing_factor: f64,
    /// PDE grid half-width in units of `sigma`, beyond the drift.
    pub half_width_sigmas: f64,
    pub cfl: f64,
    pub max_cells: usize,
    /// Particle count in particle mode; each draw is paired with its reflection through `x0`.
    pub particles: usize,
    /// RK4 substeps per window in particle mode.
    pub substeps: usize,
    pub seed: u64,
    /// Required size of the last two shift-series terms.
    pub series_tolerance: f64,
    pub max_truncation: usize,
    pub min_order: f64,
    pub linear_tolerance: f64,
    pub ratio_range: (f64, f64),
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            mode: ExpansionMode::Pde,
            t0: 0.0,
            spacing_factor: 0.1,
            half_width_sigmas: 8.0,
            cfl: 1.0,
            max_cells: 4_000_000,
            particles: 1_000_000,
            substeps: 20,
            seed: 0,
            series_tolerance: 1e-10,
            max_truncation: 40,
            min_order: 1.5,
            linear_tolerance: 0.15,
            ratio_range: (3.4, 4.6),
        }
    }
}

/// Smallest truncation whose last two terms at step `s` are below `tol`.
pub fn choose_truncation(field: &VelocityField, x: &[f64], t: f64, s: f64, tol: f64, max: usize) -> Result<(ShiftSeries, f64)> {
    let mut last = f64::INFINITY;
    let mut j = 2;
    loop {
        let series = match field.shift_series(x, t, j) {
            Ok(series) => series,
            Err(Error::UnsupportedOrder { .. }) => {
                return Err(Error::Truncation { diagnostic: last, limit: tol });
            }
            Err(e) => return Err(e),
        };
        let n = series.truncation();
        let d_last = series.last_term_magnitude(s);
        let d_prev = {
            let c = &series.coefficients[n - 2];
            c.iter().fold(0.0f64, |m, v| m.max(v.abs())) * s.abs().powi(n as i32 - 1)
        };
        let diagnostic = d_last.max(d_prev);
        if diagnostic < tol {
            return Ok((series, d_last));
        }
        last = diagnostic;
        if j >= max {
            return Err(Error::Truncation { diagnostic, limit: tol });
        }
        j += 1;
    }
}

/// Moments of one window started from `N(x0, sigma^2 I)`.
struct Window {
    mean0: Vec<f64>,
    mean1: Vec<f64>,
    cov0: DMatrix<f64>,
    cov1: DMatrix<f64>,
    /// `∫ ((u - m0) g(u)ᵀ + g(u) (u - m0)ᵀ) rho0(u) du`.
    cross: DMatrix<f64>,
    g_x0: Vec<f64>,
    truncation: usize,
    diagnostic: f64,
}

fn pde_grid(x0: &[f64], drift: &[f64], sigma: f64, opts: &ExpansionOptions) -> Result<GridSpec> {
    let dx = opts.spacing_factor * sigma * sigma;
    let axes = x0
        .iter()
        .zip(drift)
        .map(|(x, g)| {
            let half = opts.half_width_sigmas * sigma + 0.5 * g.abs() + 4.0 * dx;
            let cells = (2.0 * half / dx).ceil() as usize;
            let center = x + 0.5 * g;
            Axis::new(center - 0.5 * cells as f64 * dx, center + 0.5 * cells as f64 * dx, cells)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = GridSpec::new(axes)?;
    if spec.len() > opts.max_cells {
        return Err(Error::contract(format!(
            "PDE window needs {} cells (limit {}); use particle mode or a coarser spacing",
            spec.len(),
            opts.max_cells
        )));
    }
    Ok(spec)
}

fn shift_at(field: &VelocityField, u: &[f64], t: f64, dt: f64, truncation: usize) -> Vec<f64> {
    field
        .shift_series(u, t, truncation)
        .map(|s| s.eval(dt))
        .unwrap_or_else(|_| vec![f64::NAN; u.len()])
}

fn cross_term(points: &[(Vec<f64>, f64)], mean: &[f64], field: &VelocityField, t: f64, dt: f64, truncation: usize) -> DMatrix<f64> {
    let p = mean.len();
    let parts = par::map_blocks(points.len(), |r| {
        let mut acc = DMatrix::zeros(p, p);
        for (u, w) in &points[r] {
            let g = shift_at(field, u, t, dt, truncation);
            for i in 0..p {
                for j in 0..p {
                    acc[(i, j)] += w * ((u[i] - mean[i]) * g[j] + g[i] * (u[j] - mean[j]));
                }
            }
        }
        acc
    });
    parts.into_iter().fold(DMatrix::zeros(p, p), |a, b| a + b)
}

fn window(field: &VelocityField, x0: &[f64], sigma: f64, dt: f64, opts: &ExpansionOptions) -> Result<Window> {
    let p = field.dim();
    check_dim(p, x0.len())?;
    let t0 = opts.t0;
    let (series, diagnostic) = choose_truncation(field, x0, t0, dt, opts.series_tolerance, opts.max_truncation)?;
    let truncation = series.truncation();
    let g_x0 = series.eval(dt);
    match opts.mode {
        ExpansionMode::Pde => {
            let spec = pde_grid(x0, &g_x0, sigma, opts)?;
            let cov = DMatrix::from_diagonal_element(p, p, sigma * sigma);
            let d0 = analytic_gaussian(x0, &cov, &spec, t0)?;
            let m0 = moments(&d0)?;
            let vol = spec.cell_volume();
            let points: Vec<(Vec<f64>, f64)> = d0
                .values()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(k, v)| (spec.center(k), v * vol))
                .collect();
            let cross = cross_term(&points, &m0.mean, field, t0, dt, truncation);
            let run = solve_continuity(field, &d0, &[t0 + dt], opts.cfl)?;
            let m1 = moments(&run.snapshots[0])?;
            Ok(Window {
                mean0: m0.mean,
                mean1: m1.mean,
                cov0: m0.cov,
                cov1: m1.cov,
                cross,
                g_x0,
                truncation,
                diagnostic,
            })
        }
        ExpansionMode::Particles => {
            let init = InitialDistribution::isotropic(x0.to_vec(), sigma * sigma);
            let half = sample_initial(&init, opts.particles.div_ceil(2), p, t0, opts.seed)?;
            let mut positions = half.positions().to_vec();
            positions.extend(half.positions().iter().enumerate().map(|(i, u)| 2.0 * x0[i % p] - u));
            let e0 = Ensemble::new(t0, p, positions)?;
            let m0 = moments_ensemble(&e0);
            let w = 1.0 / e0.len() as f64;
            let points: Vec<(Vec<f64>, f64)> = e0.iter().map(|u| (u.to_vec(), w)).collect();
            let cross = cross_term(&points, &m0.mean, field, t0, dt, truncation);
            let e1 = integrate_ode(field, &e0, t0 + dt, dt / opts.substeps.max(1) as f64, Method::Rk4)?;
            let m1 = moments_ensemble(&e1);
            Ok(Window {
                mean0: m0.mean,
                mean1: m1.mean,
                cov0: m0.cov,
                cov1: m1.cov,
                cross,
                g_x0,
                truncation,
                diagnostic,
            })
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `|E f(x + sigma Z) - f(x)|` over a sigma ladder, by Gauss–Hermite quadrature.
///
/// `bound` is the known bound on `|f|`; a larger value at any node is a
/// contract violation.
pub fn concentration_check(
    f: &ScalarFunction,
    bound: f64,
    center: &[f64],
    sigmas: &[f64],
    nodes: usize,
) -> Result<ScalingReport> {
    let gh = GaussHermite::new(nodes)?;
    let p = center.len();
    let fx = f.eval(0.0, center);
    let mut quantities = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let cov = DMatrix::from_diagonal_element(p, p, s * s);
        let mut worst = 0.0f64;
        let e = gh.expect_gaussian(center, &cov, 1, |x, out| {
            let v = f.eval(0.0, x);
            worst = worst.max(v.abs());
            out[0] = v;
        })?;
        if !(worst <= bound) {
            return Err(Error::contract(format!(
                "test function reaches {worst:e} at a quadrature node, above its bound {bound:e}"
            )));
        }
        quantities.push((e[0] - fx).abs());
    }
    let mut report = ScalingReport::new("sigma", sigmas.to_vec(), quantities, 1.8, 1e-12)?;
    report.pass = report.pass && report.monotone_decreasing();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub sigma: f64,
    pub mean_deviation: f64,
    pub variance_remainder: f64,
    pub delta_cov: Vec<Vec<f64>>,
    pub cross_term: Vec<Vec<f64>>,
    /// `dt (J Σ0 + Σ0 Jᵀ)` with the Jacobian at `x0` and `Σ0 = sigma^2 I`.
    pub linear_reference: Vec<Vec<f64>>,
    pub linear_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentExpansionReport {
    pub mode: ExpansionMode,
    pub dt: f64,
    pub truncation: usize,
    pub series_diagnostic: f64,
    pub mean: ScalingReport,
    pub variance: ScalingReport,
    pub rows: Vec<MomentRow>,
    /// `‖ΔΣ(sigma_i)‖ / ‖ΔΣ(sigma_{i+1})‖` for consecutive halvings.
    pub halving_ratios: Vec<f64>,
    pub linear_ok: bool,
    pub ratios_ok: bool,
    pub pass: bool,
}

/// Mean and variance of one short window against the shift series.
pub fn moment_expansion_check(
    field: &VelocityField,
    x0: &[f64],
    sigmas: &[f64],
    dt: f64,
    opts: &ExpansionOptions,
) -> Result<MomentExpansionReport> {
    if !(dt > 0.0) {
        return Err(Error::contract("dt must be positive"));
    }
    super::check_ladder(sigmas)?;
    let jac = field.jacobian(opts.t0, x0)?;
    let mut rows_out = Vec::with_capacity(sigmas.len());
    let mut mean_q = Vec::new();
    let mut var_q = Vec::new();
    let mut deltas = Vec::new();
    let mut truncation = 0;
    let mut diagnostic = 0.0;
    for &s in sigmas {
        let w = window(field, x0, s, dt, opts)?;
        truncation = w.truncation;
        diagnostic = w.diagnostic;
        let shift: f64 = (0..x0.len())
            .map(|i| (w.mean1[i] - w.mean0[i] - w.g_x0[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let delta = &w.cov1 - &w.cov0;
        let remainder = (&delta - &w.cross).norm();
        let sigma0 = DMatrix::from_diagonal_element(x0.len(), x0.len(), s * s);
        let reference = dt * (&jac * &sigma0 + &sigma0 * jac.transpose());
        let linear = (reference.norm() > 0.0).then(|| (&delta - &reference).norm() / reference.norm());
        mean_q.push(shift / dt);
        var_q.push(remainder / dt);
        deltas.push(delta.norm());
        rows_out.push(MomentRow {
            sigma: s,
            mean_deviation: shift / dt,
            variance_remainder: remainder / dt,
            delta_cov: rows(&delta),
            cross_term: rows(&w.cross),
            linear_reference: rows(&reference),
            linear_relative_error: linear,
        });
    }
    let mean = ScalingReport::new("sigma", sigmas.to_vec(), mean_q, opts.min_order, 1e-9)?;
    let variance = ScalingReport::new("sigma", sigmas.to_vec(), var_q, opts.min_order, 1e-9)?;
    let halving_ratios: Vec<f64> = sigmas
        .windows(2)
        .zip(deltas.windows(2))
        .filter(|(s, _)| ((s[0] / s[1]) - 2.0).abs() < 1e-9)
        .map(|(_, d)| d[0] / d[1])
        .collect();
    let linear_ok = rows_out
        .iter()
        .all(|r| r.linear_relative_error.is_none_or(|e| e <= opts.linear_tolerance));
    let (lo, hi) = opts.ratio_range;
    let ratios_ok = rows_out.iter().all(|r| r.linear_relative_error.is_none())
        || halving_ratios.iter().all(|r| *r >= lo && *r <= hi);
    Ok(MomentExpansionReport {
        mode: opts.mode,
        dt,
        truncation,
        series_diagnostic: diagnostic,
        pass: mean.pass && variance.pass && linear_ok && ratios_ok,
        mean,
        variance,
        rows: rows_out,
        halving_ratios,
        linear_ok,
        ratios_ok,
    })
}

/// `‖ΔΣ - cross‖` at fixed sigma over a decreasing ladder of windows `dts`.
pub fn variance_remainder_scaling(
    field: &VelocityField,
    x0: &[f64],
    sigma: f64,
    dts: &[f64],
    min_order: f64,
    opts: &ExpansionOptions,
) -> Result<ScalingReport> {
    let q = dts
        .iter()
        .map(|&dt| {
            let w = window(field, x0, sigma, dt, opts)?;
            Ok((&(&w.cov1 - &w.cov0) - &w.cross).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    ScalingReport::new("dt", dts.to_vec(), q, min_order, 1e-15)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualRow {
    pub order: usize,
    /// `d^j/dt^j ∫ f rho` by finite differences of the solver output.
    pub left: f64,
    /// `∫ D^j f rho` by quadrature at the middle time.
    pub right: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualExpansionReport {
    pub sigma: f64,
    pub dt: f64,
    pub time: f64,
    pub rows: Vec<DualRow>,
    pub pass: bool,
}

/// Relative tolerances per order for the dual-expansion identity.
pub const DUAL_TOLERANCES: [f64; 2] = [0.02, 0.05];
const DUAL_ABS_TOLERANCE: f64 = 1e-8;

/// Compares time derivatives of `∫ f rho` along a solver run with `∫ D^j f rho`.
///
/// With `D = ∂t + v·∇`, `d^j/dt^j ∫ f rho = ∫ D^j f rho`; for `f` independent
/// of time the left side is `∫ f ∂t^j rho`.
pub fn dual_expansion_check(
    field: &VelocityField,
    f: &ScalarFunction,
    x0: &[f64],
    sigma: f64,
    dt: f64,
    max_order: usize,
    opts: &ExpansionOptions,
) -> Result<DualExpansionReport> {
    if !(1..=2).contains(&max_order) {
        return Err(Error::contract("dual expansion supports orders 1 and 2"));
    }
    if !field.has_oracle() {
        return Err(Error::contract("dual expansion needs a field with a derivative oracle"));
    }
    if !(dt > 0.0 && sigma > 0.0) {
        return Err(Error::contract("sigma and dt must be positive"));
    }
    let p = field.dim();
    check_dim(p, x0.len())?;
    let t0 = opts.t0;
    let drift = field.evaluate(t0, x0)?.iter().map(|v| 2.0 * v * dt).collect::<Vec<_>>();
    let spec = pde_grid(x0, &drift, sigma, opts)?;
    let d0 = analytic_gaussian(x0, &DMatrix::from_diagonal_element(p, p, sigma * sigma), &spec, t0)?;
    let run = solve_continuity(field, &d0, &[t0 + dt, t0 + 2.0 * dt], opts.cfl)?;
    let integral = |d: &DensityGrid| {
        let vol = spec.cell_volume();
        let t = d.time();
        par::sum(spec.len(), |k| {
            let v = d.values()[k];
            if v == 0.0 {
                0.0
            } else {
                v * f.eval(t, &spec.center(k))
            }
        }) * vol
    };
    let i0 = integral(&d0);
    let i1 = integral(&run.snapshots[0]);
    let i2 = integral(&run.snapshots[1]);
    let mid = &run.snapshots[0];
    let tm = mid.time();
    let mut rows_out = Vec::with_capacity(max_order);
    for j in 1..=max_order {
        let left = if j == 1 { (i2 - i0) / (2.0 * dt) } else { (i2 - 2.0 * i1 + i0) / (dt * dt) };
        let vals = par::map_indexed(spec.len(), |k| {
            let v = mid.values()[k];
            if v == 0.0 {
                Ok(0.0)
            } else {
                field.apply_d(f, tm, &spec.center(k), j).map(|d| d * v)
            }
        });
        let right = vals.into_iter().collect::<Result<Vec<f64>>>()?.iter().sum::<f64>() * spec.cell_volume();
        let abs_diff = (left - right).abs();
        let scale = left.abs().max(right.abs());
        let rel_diff = if scale > 0.0 { abs_diff / scale } else { 0.0 };
        let tolerance = DUAL_TOLERANCES[j - 1];
        let pass = scale <= DUAL_ABS_TOLERANCE || rel_diff <= tolerance;
        rows_out.push(DualRow {
            order: j,
            left,
            right,
            abs_diff,
            rel_diff,
            tolerance,
            pass,
        });
    }
    Ok(DualExpansionReport {
        sigma,
        dt,
        time: tm,
        pass: rows_out.iter().all(|r| r.pass),
        rows: rows_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truncation_is_chosen_adaptively() {
        let (s, diag) = choose_truncation(&VelocityField::damped(1, 1.0), &[1.0], 0.0, 0.01, 1e-10, 40).unwrap();
        assert!(diag < 1e-10);
        assert!(s.truncation() <= 6);
        let custom = VelocityField::custom(1, |_, x, out| out[0] = (3.0 * x[0]).sin());
        assert!(matches!(
            choose_truncation(&custom, &[1.0], 0.0, 0.5, 1e-10, 40),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn concentration_of_linear_and_square() {
        let sig = [0.2, 0.1, 0.05];
        let lin = ScalarFunction::Linear { weights: vec![2.0], offset: 1.0 };
        let r = concentration_check(&lin, 10.0, &[0.3], &sig, 20).unwrap();
        assert!(r.quantities.iter().all(|q| *q < 1e-14));
        let sq = ScalarFunction::Power { axis: 0, exponent: 2 };
        let r = concentration_check(&sq, 10.0, &[0.0], &sig, 20).unwrap();
        for (q, s) in r.quantities.iter().zip(sig) {
            assert_relative_eq!(*q, s * s, max_relative = 1e-12);
        }
        assert_relative_eq!(r.fitted_order.unwrap(), 2.0, epsilon = 1e-9);
        assert!(concentration_check(&sq, 0.01, &[0.0], &sig, 20).is_err());
    }

    #[test]
    fn constant_field_moves_mean_exactly() {
        let f = VelocityField::constant(vec![0.5]);
        let opts = ExpansionOptions::default();
        let r = moment_expansion_check(&f, &[1.0], &[0.2, 0.1], 0.01, &opts).unwrap();
        assert!(r.mean.quantities.iter().all(|q| *q < 1e-9), "{:?}", r.mean.quantities);
    }

    #[test]
    fn dual_expansion_of_constant_is_zero() {
        let f = ScalarFunction::Constant(7.0);
        let r = dual_expansion_check(&VelocityField::damped(1, 1.0), &f, &[1.0], 0.1, 0.01, 2, &ExpansionOptions::default())
            .unwrap();
        assert!(r.pass);
        assert!(r.rows.iter().all(|row| row.right == 0.0 && row.left.abs() < 1e-8));
    }
}

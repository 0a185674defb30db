//! One function per experiment kind.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use flowlab::analysis::{
    affine_gaussian, calibration_floor, concentration_check, delta_scaling, detect_stochasticity, dual_expansion_check,
    initial_density, moment_expansion_check, reynolds_check, uniqueness_check, variance_remainder_scaling, Mode,
    ReynoldsOptions,
};
use flowlab::density::{histogram, moments, moments_ensemble, DensityGrid, OutOfGrid};
use flowlab::fields::{ScalarFunction, VelocityField};
use flowlab::noise::increment_variance;
use flowlab::particles::{
    integrate_ode, integrate_ode_snapshots, integrate_sde_snapshots, sample_initial, Diffusion, Ensemble, Method,
    NoiseSource, SdeSpec, Trajectories,
};
use flowlab::stats::loglog_fit;
use flowlab::transport::{recover_velocity, residual, solve_continuity, solve_fokker_planck, TransportRun};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{Config, Experiment, MomentsCheck, ScalingCheck};

pub struct Outcome {
    pub pass: bool,
    pub results: Value,
}

pub fn run(cfg: &Config, out: &Path) -> Result<Outcome> {
    match cfg.experiment {
        Experiment::Simulate => simulate(cfg, out),
        Experiment::Solve => solve(cfg, out),
        Experiment::Residual => residual_experiment(cfg, out),
        Experiment::Recover => recover(cfg, out),
        Experiment::Moments => moments_experiment(cfg, out),
        Experiment::Reynolds => reynolds(cfg, out),
        Experiment::Detect => detect(cfg, out),
        Experiment::Scaling => scaling(cfg, out),
    }
}

fn field(cfg: &Config) -> Result<VelocityField> {
    let spec = cfg.field.as_ref().ok_or_else(|| anyhow!("key `field` is required"))?;
    spec.build().context("building field")
}

fn sigma(cfg: &Config) -> f64 {
    cfg.sigma.unwrap_or(0.0)
}

fn initial_ensemble(cfg: &Config, dim: usize) -> Result<Ensemble> {
    let init = cfg.initial.as_ref().ok_or_else(|| anyhow!("key `initial` is required"))?;
    let n = cfg.particles.unwrap_or(100_000);
    Ok(sample_initial(init, n, dim, cfg.time.t0, cfg.seed)?)
}

fn trajectories(cfg: &Config, field: &VelocityField, sigma: f64, outputs: &[f64]) -> Result<Trajectories> {
    let e0 = initial_ensemble(cfg, field.dim())?;
    match &cfg.noise {
        Some(noise) => {
            let spec = SdeSpec {
                drift: field.clone(),
                diffusion: Diffusion::Scalar(sigma),
                noise: NoiseSource::Spec(noise.clone()),
            };
            Ok(integrate_sde_snapshots(&spec, &e0, outputs, cfg.time.dt)?)
        }
        None => Ok(integrate_ode_snapshots(field, &e0, outputs, cfg.time.dt, cfg.time.method)?),
    }
}

/// Solver run from the discretized initial distribution, with `t0` as snapshot 0.
fn transport(cfg: &Config, field: &VelocityField) -> Result<TransportRun> {
    let grid = cfg.grid.as_ref().ok_or_else(|| anyhow!("key `grid` is required"))?.build()?;
    let init = cfg.initial.as_ref().ok_or_else(|| anyhow!("key `initial` is required"))?;
    let d0 = initial_density(init, &grid, cfg.time.t0)?;
    let outputs = cfg.output_times()?;
    let s = sigma(cfg);
    let run = if s > 0.0 {
        solve_fokker_planck(field, &Diffusion::Scalar(s), &d0, &outputs, cfg.time.cfl)?
    } else {
        solve_continuity(field, &d0, &outputs, cfg.time.cfl)?
    };
    let mut snapshots = vec![d0];
    snapshots.extend(run.snapshots);
    Ok(TransportRun { snapshots, ..run })
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

fn density_row(d: &DensityGrid) -> Result<Vec<f64>> {
    let m = moments(d)?;
    let mut row = vec![d.time(), d.mass()];
    row.extend(&m.mean);
    row.push(m.trace_cov);
    Ok(row)
}

fn simulate(cfg: &Config, out: &Path) -> Result<Outcome> {
    let field = field(cfg)?;
    let traj = trajectories(cfg, &field, sigma(cfg), &cfg.output_times()?)?;
    traj.write_csv(out.join("trajectories.csv"))?;
    let p = field.dim();
    let mut header = vec!["time".to_string()];
    header.extend(names("mean_", p));
    header.push("trace_cov".into());
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for e in &traj.snapshots {
        let m = moments_ensemble(e);
        let mut row = vec![e.time()];
        row.extend(&m.mean);
        row.push(m.trace_cov);
        rows.push(row);
        summary.push(json!({"time": e.time(), "moments": m}));
    }
    write_table(&out.join("moments.csv"), &header, &rows)?;
    if let (Some(grid), Some(last)) = (&cfg.grid, traj.snapshots.last()) {
        histogram(last, &grid.build()?, OutOfGrid::Drop)?.write_csv(out.join("histogram.csv"))?;
    }
    Ok(Outcome {
        pass: true,
        results: json!({"particles": traj.snapshots[0].len(), "step": traj.step, "snapshots": summary}),
    })
}

fn solve(cfg: &Config, out: &Path) -> Result<Outcome> {
    let field = field(cfg)?;
    let run = transport(cfg, &field)?;
    run.write_dir(out.join("density"))?;
    let p = field.dim();
    let mut header = vec!["time".to_string(), "mass".into()];
    header.extend(names("mean_", p));
    header.push("trace_cov".into());
    let rows = run.snapshots.iter().map(density_row).collect::<Result<Vec<_>>>()?;
    write_table(&out.join("moments.csv"), &header, &rows)?;
    let drift = run.snapshots.iter().fold(0.0f64, |m, d| m.max((d.mass() - 1.0).abs()));
    let min = run
        .snapshots
        .iter()
        .flat_map(|d| d.values().iter().copied())
        .fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        pass: drift <= flowlab::transport::LEAK_TOLERANCE,
        results: json!({
            "times": run.times(),
            "max_mass_drift": drift,
            "min_value": min,
            "final": moments(run.snapshots.last().expect("non-empty run"))?,
        }),
    })
}

fn residual_experiment(cfg: &Config, out: &Path) -> Result<Outcome> {
    let section = cfg.residual.clone().unwrap_or_default();
    let field = field(cfg)?;
    let run = transport(cfg, &field)?;
    let hypothesis = match &section.hypothesis {
        Some(h) => h.build()?,
        None => field.clone(),
    };
    let index = section.index.unwrap_or(run.snapshots.len() / 2);
    let r = residual(&hypothesis, &run, index)?;
    let p = r.spec.dim();
    let mut header = names("x", p);
    header.push("residual".into());
    let rows: Vec<Vec<f64>> = (0..r.spec.len())
        .map(|i| {
            let mut row = r.spec.center(i);
            row.push(r.values[i]);
            row
        })
        .collect();
    write_table(&out.join("residual.csv"), &header, &rows)?;
    let norm = r.norm_inf();
    let integrated = flowlab::analysis::integrated_residual(&hypothesis, &run, index)?;
    let pass = section.max_norm.is_none_or(|m| norm <= m);
    Ok(Outcome {
        pass,
        results: json!({
            "index": index,
            "time": r.time,
            "hypothesis": hypothesis.name(),
            "norm_inf": norm,
            "integrated_l1": integrated,
            "max_norm": section.max_norm,
        }),
    })
}

fn recover(cfg: &Config, out: &Path) -> Result<Outcome> {
    let section = cfg.recover.clone().unwrap_or_default();
    let field = field(cfg)?;
    let run = transport(cfg, &field)?;
    let rec = recover_velocity(&run, section.index, Some(section.floor))?;
    let err = rec.max_relative_error(&field)?;
    let rows: Vec<Vec<f64>> = (0..rec.spec.len())
        .map(|i| {
            let x = rec.spec.center(i);
            let truth = field.evaluate(rec.time, &x).expect("dimension checked")[0];
            vec![x[0], rec.velocity[0][i], truth, f64::from(u8::from(rec.mask[0][i]))]
        })
        .collect();
    let header = ["x", "recovered", "truth", "mask"].map(String::from);
    write_table(&out.join("recovered.csv"), &header, &rows)?;
    let mut pass = err <= section.max_relative_error;
    let alternative = match &section.alternative {
        Some(alt) => {
            let u = uniqueness_check(&run, &field, &alt.build()?, section.index, section.max_relative_error, section.min_ratio)?;
            pass &= u.residual_ratio > section.min_ratio;
            Some(u)
        }
        None => None,
    };
    Ok(Outcome {
        pass,
        results: json!({
            "time": rec.time,
            "recovered_cells": rec.recovered_cells(),
            "max_relative_error": err,
            "max_error_allowed": section.max_relative_error,
            "alternative": alternative,
        }),
    })
}

fn reynolds(cfg: &Config, out: &Path) -> Result<Outcome> {
    let section = cfg.reynolds.clone().unwrap_or_default();
    let field = field(cfg)?;
    let init = cfg.initial.as_ref().ok_or_else(|| anyhow!("key `initial` is required"))?;
    let grid = cfg.grid.as_ref().ok_or_else(|| anyhow!("key `grid` is required"))?.build()?;
    let t_end = cfg.time.t_end.ok_or_else(|| anyhow!("key `time.t_end` is required"))?;
    if cfg.time.t0 != 0.0 {
        bail!("key `time.t0`: the reynolds experiment starts at 0");
    }
    let opts = ReynoldsOptions {
        seed: cfg.seed,
        dt: cfg.time.dt,
        method: cfg.time.method,
        cfl: cfg.time.cfl,
        refine: section.refine,
        intervals: cfg.time.intervals,
        max_l1_analytic: section.max_l1_analytic,
        max_l1_pde: section.max_l1_pde,
    };
    let n = cfg.particles.unwrap_or(100_000);
    let o = reynolds_check(&field, init, n, t_end, &grid, &opts)?;
    o.histogram.write_csv(out.join("histogram.csv"))?;
    o.pde.write_csv(out.join("pde.csv"))?;
    if let Some(a) = &o.analytic {
        a.write_csv(out.join("analytic.csv"))?;
    }
    let mut pass = o.report.pass;
    let uniqueness = match &section.uniqueness {
        Some(u) => {
            let r = uniqueness_check(&o.run, &field, &u.alternative.build()?, u.index, u.max_relative_error, u.min_ratio)?;
            pass &= r.pass;
            Some(r)
        }
        None => None,
    };
    Ok(Outcome {
        pass,
        results: json!({"reynolds": o.report, "uniqueness": uniqueness}),
    })
}

fn moments_experiment(cfg: &Config, out: &Path) -> Result<Outcome> {
    let m = cfg.moments.as_ref().ok_or_else(|| anyhow!("key `moments` is required"))?;
    let need = |v: Option<f64>, key: &str| v.ok_or_else(|| anyhow!("key `moments.{key}` is required for check {:?}", m.check));
    let list = |v: &Option<Vec<f64>>, key: &str| {
        v.clone()
            .ok_or_else(|| anyhow!("key `moments.{key}` is required for check {:?}", m.check))
    };
    let function = || {
        m.function
            .as_ref()
            .map(ScalarFunction::from)
            .ok_or_else(|| anyhow!("key `moments.function` is required for check {:?}", m.check))
    };
    match m.check {
        MomentsCheck::Expansion => {
            let r = moment_expansion_check(&field(cfg)?, &m.x0, &list(&m.sigmas, "sigmas")?, need(m.dt, "dt")?, &m.options)?;
            let rows: Vec<Vec<f64>> = r
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.sigma,
                        row.mean_deviation,
                        row.variance_remainder,
                        row.linear_relative_error.unwrap_or(f64::NAN),
                    ]
                })
                .collect();
            let header = ["sigma", "mean_deviation", "variance_remainder", "linear_relative_error"].map(String::from);
            write_table(&out.join("moments.csv"), &header, &rows)?;
            Ok(Outcome {
                pass: r.pass,
                results: serde_json::to_value(&r)?,
            })
        }
        MomentsCheck::Remainder => {
            let r = variance_remainder_scaling(
                &field(cfg)?,
                &m.x0,
                need(m.sigma, "sigma")?,
                &list(&m.dts, "dts")?,
                m.min_order,
                &m.options,
            )?;
            let rows: Vec<Vec<f64>> = r.sigmas.iter().zip(&r.quantities).map(|(a, b)| vec![*a, *b]).collect();
            write_table(&out.join("remainder.csv"), &["dt".into(), "remainder".into()], &rows)?;
            Ok(Outcome {
                pass: r.pass,
                results: serde_json::to_value(&r)?,
            })
        }
        MomentsCheck::Dual => {
            let r = dual_expansion_check(
                &field(cfg)?,
                &function()?,
                &m.x0,
                need(m.sigma, "sigma")?,
                need(m.dt, "dt")?,
                m.max_order,
                &m.options,
            )?;
            let rows: Vec<Vec<f64>> = r
                .rows
                .iter()
                .map(|row| vec![row.order as f64, row.left, row.right, row.rel_diff])
                .collect();
            let header = ["order", "left", "right", "rel_diff"].map(String::from);
            write_table(&out.join("dual.csv"), &header, &rows)?;
            Ok(Outcome {
                pass: r.pass,
                results: serde_json::to_value(&r)?,
            })
        }
        MomentsCheck::Concentration => {
            let r = concentration_check(&function()?, need(m.bound, "bound")?, &m.x0, &list(&m.sigmas, "sigmas")?, m.nodes)?;
            let rows: Vec<Vec<f64>> = r.sigmas.iter().zip(&r.quantities).map(|(a, b)| vec![*a, *b]).collect();
            write_table(&out.join("concentration.csv"), &["sigma".into(), "deviation".into()], &rows)?;
            Ok(Outcome {
                pass: r.pass,
                results: serde_json::to_value(&r)?,
            })
        }
    }
}

fn detect(cfg: &Config, out: &Path) -> Result<Outcome> {
    let d = cfg.detect.as_ref().ok_or_else(|| anyhow!("key `detect` is required"))?;
    let field = field(cfg)?;
    let t = d.t.unwrap_or(cfg.time.t0);
    let mut windows = vec![d.delta];
    if let Some(ds) = &d.deltas {
        windows.extend(ds);
    }
    windows.sort_by(f64::total_cmp);
    windows.dedup();
    let mut outputs = vec![t];
    outputs.extend(windows.iter().map(|w| t + w));

    let twin = trajectories(cfg, &field, 0.0, &[t, t + d.delta])?;
    let floor = calibration_floor(&twin, &field, t, d.delta, &d.options)?;
    let twin_verdict = detect_stochasticity(&twin, &field, t, d.delta, floor, &d.options)?;
    drop(twin);

    let traj = trajectories(cfg, &field, sigma(cfg), &outputs)?;
    let verdict = detect_stochasticity(&traj, &field, t, d.delta, floor, &d.options)?;
    let scaling = match &d.deltas {
        Some(ds) => Some(delta_scaling(&traj, &field, t, ds, &d.options)?),
        None => None,
    };

    let mut checks = serde_json::Map::new();
    checks.insert("twin_deterministic".into(), json!(twin_verdict.decision == Mode::Deterministic));
    if let Some(expect) = d.expect {
        checks.insert("decision".into(), json!(verdict.decision == expect));
    }
    if let Some(rate) = d.expected_rate {
        checks.insert("rate".into(), json!((verdict.rate - rate).abs() <= d.rate_tolerance * rate.abs()));
    }
    if let (Some(expect), Some(s)) = (d.expect_brownian, &scaling) {
        checks.insert("brownian_consistent".into(), json!(s.brownian_consistent == expect));
    }
    let pass = checks.values().all(|v| v.as_bool() == Some(true));
    if let Some(s) = &scaling {
        let rows: Vec<Vec<f64>> = (0..s.deltas.len())
            .map(|i| vec![s.deltas[i], s.rates[i], s.rate_std_errs[i]])
            .collect();
        write_table(&out.join("delta_scaling.csv"), &["delta".into(), "rate".into(), "std_err".into()], &rows)?;
    }
    Ok(Outcome {
        pass,
        results: json!({
            "calibration_floor": floor,
            "verdict": verdict,
            "twin": twin_verdict,
            "delta_scaling": scaling,
            "checks": checks,
        }),
    })
}

fn scaling(cfg: &Config, out: &Path) -> Result<Outcome> {
    let s = cfg.scaling.as_ref().ok_or_else(|| anyhow!("key `scaling` is required"))?;
    match s.check {
        ScalingCheck::Noise => {
            let noise = cfg.noise.as_ref().ok_or_else(|| anyhow!("key `noise` is required"))?;
            let deltas = s.deltas.clone().ok_or_else(|| anyhow!("key `scaling.deltas` is required"))?;
            if let Some(e) = &s.expected_variance {
                if e.len() != deltas.len() {
                    bail!("key `scaling.expected_variance` needs one value per delta");
                }
            }
            let mut rows = Vec::new();
            let mut pass = true;
            let mut entries = Vec::new();
            for (i, &delta) in deltas.iter().enumerate() {
                let iv = increment_variance(noise, s.t, delta, s.samples)?;
                let (var, se) = (iv.cov[(0, 0)], iv.cov_std_err[(0, 0)]);
                let expected = s.expected_variance.as_ref().map(|e| e[i]);
                let z = expected.map(|e| (var - e) / se);
                if let Some(z) = z {
                    pass &= z.abs() <= s.std_errs;
                }
                rows.push(vec![delta, var, se, expected.unwrap_or(f64::NAN)]);
                entries.push(json!({"delta": delta, "variance": var, "std_err": se, "expected": expected, "z": z, "increment": iv}));
            }
            let header = ["delta", "variance", "std_err", "expected"].map(String::from);
            write_table(&out.join("increment_variance.csv"), &header, &rows)?;
            let slope = if deltas.len() >= 2 {
                let vars: Vec<f64> = rows.iter().map(|r| r[1]).collect();
                Some(loglog_fit(&deltas, &vars)?.slope)
            } else {
                None
            };
            if let (Some(expected), Some(slope)) = (s.expected_slope, slope) {
                pass &= (slope - expected).abs() <= s.slope_tolerance;
            }
            Ok(Outcome {
                pass,
                results: json!({
                    "noise": noise,
                    "t": s.t,
                    "samples": s.samples,
                    "std_errs_allowed": s.std_errs,
                    "increments": entries,
                    "slope": slope,
                    "expected_slope": s.expected_slope,
                }),
            })
        }
        ScalingCheck::Series => {
            let field = field(cfg)?;
            let x0 = s.x0.clone().ok_or_else(|| anyhow!("key `scaling.x0` is required"))?;
            let step = s.s.ok_or_else(|| anyhow!("key `scaling.s` is required"))?;
            let series = field.shift_series(&x0, s.t, s.truncation)?;
            let g = series.eval(step);
            let p = x0.len();
            let (reference, oracle) = match affine_gaussian(&field, &x0, &DMatrix::zeros(p, p), step) {
                Some((m, _)) if field.is_autonomous() => (m, "matrix_exponential"),
                _ => {
                    let e = Ensemble::from_points(s.t, std::slice::from_ref(&x0))?;
                    let e = integrate_ode(&field, &e, s.t + step, step / 10_000.0, Method::Rk4)?;
                    (e.particle(0).to_vec(), "rk4")
                }
            };
            let expected: Vec<f64> = reference.iter().zip(&x0).map(|(a, b)| a - b).collect();
            let error = g.iter().zip(&expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let mut header = names("g_", p);
            header.extend(names("expected_", p));
            write_table(&out.join("shift_series.csv"), &header, &[g.iter().chain(&expected).copied().collect()])?;
            Ok(Outcome {
                pass: error <= s.tolerance,
                results: json!({
                    "x0": x0,
                    "t": s.t,
                    "s": step,
                    "truncation": s.truncation,
                    "shift": g,
                    "expected": expected,
                    "oracle": oracle,
                    "max_abs_error": error,
                    "last_term": series.last_term_magnitude(step),
                    "tolerance": s.tolerance,
                    "coefficients": series.coefficients,
                }),
            })
        }
    }
}


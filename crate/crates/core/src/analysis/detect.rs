//! Detectors for stochastic motion.
//!
//! The trajectory detector conditions on `ξ(t)` by spatial binning and
//! measures the variance of `ξ(t+δ)` that the field hypothesis cannot explain.
//! A σ = 0 calibration run on identical settings supplies the floor made of
//! integrator and binning error; motion is called stochastic only when the
//! measured rate clears a multiple of that floor.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::VelocityField;
use crate::par;
use crate::particles::{Ensemble, Trajectories};
use crate::stats::linear_fit;
use crate::transport::{residual, TransportRun};

use super::expansion::choose_truncation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectOptions {
    /// Bin width per axis as a fraction of the ensemble standard deviation.
    pub bin_fraction: f64,
    pub min_bin_count: usize,
    /// Share of particles that must fall in bins with `min_bin_count` entries.
    pub min_usable_fraction: f64,
    pub min_particles: usize,
    /// Threshold as a multiple of the calibration floor.
    pub threshold_factor: f64,
    /// Absolute threshold relative to `Var(ξ(t+δ)) / δ`.
    pub relative_threshold: f64,
    pub series_tolerance: f64,
    pub max_truncation: usize,
    /// Number of batches used for error bars in [`delta_scaling`].
    pub batches: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            bin_fraction: 0.02,
            min_bin_count: 30,
            min_usable_fraction: 0.9,
            min_particles: 10_000,
            threshold_factor: 5.0,
            relative_threshold: 1e-12,
            series_tolerance: 1e-10,
            max_truncation: 40,
            batches: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionVerdict {
    pub time: f64,
    pub delta: f64,
    pub n_particles: usize,
    pub bins_used: usize,
    pub usable_fraction: f64,
    /// Pooled within-bin covariance of the residual `ξ(t+δ) - ξ(t) - g*(ξ(t))`, over `δ`.
    #[serde(serialize_with = "crate::stats::serialize_rows")]
    pub conditional_variance_rate: DMatrix<f64>,
    /// Trace of the rate matrix minus the calibration floor.
    pub rate: f64,
    pub calibration_floor: f64,
    pub threshold_used: f64,
    /// RMS over bins of the mean residual.
    pub mean_shift_check: f64,
    /// Trace of `Var(ξ(t+δ))`.
    pub total_variance: f64,
    /// Trace of `E[var(ξ(t+δ) | bin)]` with the residual as conditional spread.
    pub expected_conditional_variance: f64,
    /// Trace of `var(E[ξ(t+δ) | bin])`.
    pub variance_of_conditional_means: f64,
    pub closure_gap: f64,
    /// Bound on the closure gap from the spread of `ξ(t) + g*` inside a bin.
    pub binning_bias_bound: f64,
    pub decision: Mode,
}

/// Raw within-bin statistics of one `(t, t+δ)` pair.
struct Measured {
    n: usize,
    bins_used: usize,
    usable_fraction: f64,
    rate: DMatrix<f64>,
    mean_shift: f64,
    total: f64,
    cond_resid: f64,
    cond_det: f64,
    between: f64,
}

fn bin_keys(e: &Ensemble, fraction: f64) -> Vec<Vec<i64>> {
    let p = e.dim();
    let n = e.len() as f64;
    let widths: Vec<f64> = (0..p)
        .map(|k| {
            let c = e.coordinate(k);
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let w = fraction * v.sqrt();
            if w > 0.0 { w } else { 1.0 }
        })
        .collect();
    e.iter()
        .map(|x| x.iter().zip(&widths).map(|(xi, w)| (xi / w).floor() as i64).collect())
        .collect()
}

fn group(keys: &[Vec<i64>], subset: impl Iterator<Item = usize>) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<&[i64], Vec<usize>> = BTreeMap::new();
    for i in subset {
        map.entry(&keys[i]).or_default().push(i);
    }
    map.into_values().collect()
}

fn residuals(field: &VelocityField, a: &Ensemble, b: &Ensemble, opts: &DetectOptions) -> Result<Vec<f64>> {
    let p = a.dim();
    let t = a.time();
    let delta = b.time() - t;
    let rows = par::map_indexed(a.len(), |i| {
        let x = a.particle(i);
        let y = b.particle(i);
        let (series, _) = choose_truncation(field, x, t, delta, opts.series_tolerance, opts.max_truncation)?;
        let g = series.eval(delta);
        Ok((0..p).map(|k| y[k] - x[k] - g[k]).collect::<Vec<f64>>())
    });
    Ok(rows.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Population mean and scatter matrix of rows `idx` of a flat `p`-column table.
fn scatter(data: &[f64], p: usize, idx: &[usize]) -> (Vec<f64>, DMatrix<f64>) {
    let n = idx.len() as f64;
    let mut mean = vec![0.0; p];
    for &i in idx {
        for k in 0..p {
            mean[k] += data[i * p + k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut s = DMatrix::zeros(p, p);
    for &i in idx {
        for a in 0..p {
            let da = data[i * p + a] - mean[a];
            for b in 0..p {
                s[(a, b)] += da * (data[i * p + b] - mean[b]);
            }
        }
    }
    (mean, s)
}

fn measure(a: &Ensemble, b: &Ensemble, keys: &[Vec<i64>], subset: &[usize], min_count: usize, resid: &[f64]) -> Measured {
    let p = a.dim();
    let delta = b.time() - a.time();
    let det: Vec<f64> = b.positions().iter().zip(resid).map(|(y, r)| y - r).collect();
    let bins = group(keys, subset.iter().copied());
    let n = subset.len();
    let (_, total) = scatter(b.positions(), p, subset);
    let mut pooled = DMatrix::zeros(p, p);
    let mut dof = 0usize;
    let mut usable = 0usize;
    let mut bins_used = 0usize;
    let mut shift_sq = 0.0;
    let mut cond_resid = 0.0;
    let mut cond_det = 0.0;
    let mut between = 0.0;
    let (overall, _) = scatter(b.positions(), p, subset);
    for idx in &bins {
        let (m_r, s_r) = scatter(resid, p, idx);
        let (_, s_d) = scatter(&det, p, idx);
        let (m_y, _) = scatter(b.positions(), p, idx);
        cond_resid += s_r.trace();
        cond_det += s_d.trace();
        between += idx.len() as f64 * m_y.iter().zip(&overall).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        if idx.len() >= min_count {
            pooled += &s_r;
            dof += idx.len() - 1;
            usable += idx.len();
            bins_used += 1;
            shift_sq += idx.len() as f64 * m_r.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let nf = n as f64;
    let rate = if dof > 0 { pooled / (dof as f64 * delta) } else { DMatrix::zeros(p, p) };
    Measured {
        n,
        bins_used,
        usable_fraction: usable as f64 / nf,
        rate: 0.5 * (&rate + rate.transpose()),
        mean_shift: if usable > 0 { (shift_sq / usable as f64).sqrt() } else { 0.0 },
        total: total.trace() / nf,
        cond_resid: cond_resid / nf,
        cond_det: cond_det / nf,
        between: between / nf,
    }
}

fn window<'a>(traj: &'a Trajectories, t: f64, delta: f64, opts: &DetectOptions) -> Result<(&'a Ensemble, &'a Ensemble)> {
    if !(delta > 0.0) {
        return Err(Error::contract("delta must be positive"));
    }
    if traj.step > delta / 10.0 * (1.0 + 1e-9) {
        return Err(Error::contract(format!(
            "trajectory step {} is coarser than delta/10 = {}",
            traj.step,
            delta / 10.0
        )));
    }
    let a = traj
        .at(t)
        .ok_or_else(|| Error::contract(format!("no snapshot at t = {t}")))?;
    let b = traj
        .at(t + delta)
        .ok_or_else(|| Error::contract(format!("no snapshot at t + delta = {}", t + delta)))?;
    if a.len() < opts.min_particles {
        return Err(Error::contract(format!(
            "{} trajectories given, at least {} required",
            a.len(),
            opts.min_particles
        )));
    }
    check_dim(a.len(), b.len())?;
    Ok((a, b))
}

fn measure_window(traj: &Trajectories, field: &VelocityField, t: f64, delta: f64, opts: &DetectOptions) -> Result<Measured> {
    let (a, b) = window(traj, t, delta, opts)?;
    check_dim(field.dim(), a.dim())?;
    let resid = residuals(field, a, b, opts)?;
    let keys = bin_keys(a, opts.bin_fraction);
    let all: Vec<usize> = (0..a.len()).collect();
    let m = measure(a, b, &keys, &all, opts.min_bin_count, &resid);
    if m.usable_fraction < opts.min_usable_fraction {
        return Err(Error::SparseBins {
            usable_fraction: m.usable_fraction,
            min_count: opts.min_bin_count,
            suggested_width: 2.0 * opts.bin_fraction,
        });
    }
    Ok(m)
}

/// Trace of the conditional variance rate of a σ = 0 run.
pub fn calibration_floor(traj: &Trajectories, field: &VelocityField, t: f64, delta: f64, opts: &DetectOptions) -> Result<f64> {
    Ok(measure_window(traj, field, t, delta, opts)?.rate.trace())
}

/// Conditional-variance detector for trajectories sampled at `t` and `t + delta`.
pub fn detect_stochasticity(
    traj: &Trajectories,
    field: &VelocityField,
    t: f64,
    delta: f64,
    calibration_floor: f64,
    opts: &DetectOptions,
) -> Result<DetectionVerdict> {
    if !(calibration_floor >= 0.0) {
        return Err(Error::contract("calibration floor must be non-negative"));
    }
    let m = measure_window(traj, field, t, delta, opts)?;
    let rate = m.rate.trace() - calibration_floor;
    let threshold = (opts.threshold_factor * calibration_floor).max(opts.relative_threshold * m.total / delta);
    let closure_gap = (m.total - m.cond_resid - m.between).abs();
    let binning_bias_bound = m.cond_det + 2.0 * (m.cond_det * m.cond_resid).sqrt();
    Ok(DetectionVerdict {
        time: t,
        delta,
        n_particles: m.n,
        bins_used: m.bins_used,
        usable_fraction: m.usable_fraction,
        conditional_variance_rate: m.rate,
        rate,
        calibration_floor,
        threshold_used: threshold,
        mean_shift_check: m.mean_shift,
        total_variance: m.total,
        expected_conditional_variance: m.cond_resid,
        variance_of_conditional_means: m.between,
        closure_gap,
        binning_bias_bound,
        decision: if rate > threshold { Mode::Stochastic } else { Mode::Deterministic },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaScalingReport {
    pub time: f64,
    pub deltas: Vec<f64>,
    /// Trace of the conditional variance rate at each delta.
    pub rates: Vec<f64>,
    /// Batch-means standard error of each rate.
    pub rate_std_errs: Vec<f64>,
    /// Slope of `log rate` against `log delta`.
    pub slope: f64,
    pub slope_std_err: f64,
    /// Brownian noise gives a flat rate: `|slope| <= 3 se`.
    pub brownian_consistent: bool,
}

/// Rate of the conditional variance across several windows from the same `t`.
pub fn delta_scaling(traj: &Trajectories, field: &VelocityField, t: f64, deltas: &[f64], opts: &DetectOptions) -> Result<DeltaScalingReport> {
    if deltas.len() < 2 {
        return Err(Error::contract("delta scaling needs at least two windows"));
    }
    let batches = opts.batches.max(2);
    let mut rates = Vec::with_capacity(deltas.len());
    let mut batch_rates = vec![Vec::with_capacity(deltas.len()); batches];
    for &delta in deltas {
        let (a, b) = window(traj, t, delta, opts)?;
        check_dim(field.dim(), a.dim())?;
        let resid = residuals(field, a, b, opts)?;
        let keys = bin_keys(a, opts.bin_fraction);
        let all: Vec<usize> = (0..a.len()).collect();
        let full = measure(a, b, &keys, &all, opts.min_bin_count, &resid);
        if full.usable_fraction < opts.min_usable_fraction {
            return Err(Error::SparseBins {
                usable_fraction: full.usable_fraction,
                min_count: opts.min_bin_count,
                suggested_width: 2.0 * opts.bin_fraction,
            });
        }
        rates.push(full.rate.trace());
        let size = a.len().div_ceil(batches);
        let min_count = (opts.min_bin_count / batches).max(2);
        for (k, chunk) in all.chunks(size).enumerate() {
            let m = measure(a, b, &keys, chunk, min_count, &resid);
            batch_rates[k].push(m.rate.trace());
        }
    }
    let bf = batches as f64;
    let rate_std_errs = (0..deltas.len())
        .map(|j| {
            let xs: Vec<f64> = batch_rates.iter().map(|r| r[j]).collect();
            let m = xs.iter().sum::<f64>() / bf;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (bf - 1.0) / bf).sqrt()
        })
        .collect();
    let log_d: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let slope_of = |r: &[f64]| -> Result<f64> {
        if r.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("conditional variance rate is not positive; no slope to fit"));
        }
        let log_r: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        Ok(linear_fit(&log_d, &log_r)?.slope)
    };
    let slope = slope_of(&rates)?;
    let slopes = batch_rates.iter().map(|r| slope_of(r)).collect::<Result<Vec<f64>>>()?;
    let ms = slopes.iter().sum::<f64>() / bf;
    let slope_std_err = (slopes.iter().map(|s| (s - ms).powi(2)).sum::<f64>() / (bf - 1.0) / bf).sqrt();
    Ok(DeltaScalingReport {
        time: t,
        deltas: deltas.to_vec(),
        rates,
        rate_std_errs,
        slope,
        slope_std_err,
        brownian_consistent: slope.abs() <= 3.0 * slope_std_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityModeReport {
    pub cells: Vec<usize>,
    /// Integrated continuity residual at each resolution, coarse to fine.
    pub residual_norms: Vec<f64>,
    /// Coarsest over finest residual norm.
    pub refinement_ratio: f64,
    pub ratio_threshold: f64,
    pub noise_floor: f64,
    pub decision: Mode,
}

/// L1 norm of the continuity residual accumulated along axis 0.
///
/// Accumulating turns `∂t rho + ∇·(v rho)` into a flux mismatch, which keeps
/// sampling noise of histogram densities from growing under refinement.
pub fn integrated_residual(field: &VelocityField, run: &TransportRun, index: usize) -> Result<f64> {
    let r = residual(field, run, index)?;
    let spec = &r.spec;
    let stride = spec.strides()[0];
    let cells = spec.axes[0].cells;
    let w = spec.axes[0].width();
    let mut total = 0.0;
    for start in 0..stride {
        let mut acc = 0.0;
        for c in 0..cells {
            acc += r.values[start + c * stride] * w;
            total += acc.abs();
        }
    }
    Ok(total * spec.cell_volume())
}

/// Residual persistence under refinement: runs are ordered coarse to fine.
pub fn density_mode_detection(
    runs: &[TransportRun],
    field: &VelocityField,
    index: usize,
    ratio_threshold: f64,
    noise_floor: f64,
) -> Result<DensityModeReport> {
    if runs.len() < 2 {
        return Err(Error::contract("density mode detection needs at least two resolutions"));
    }
    let times = runs[0].times();
    for run in runs {
        let ts = run.times();
        if ts.len() != times.len() || ts.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs())) {
            return Err(Error::contract("runs must share their snapshot times"));
        }
    }
    let cells: Vec<usize> = runs.iter().map(|r| r.spec().len()).collect();
    if cells.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("runs must be ordered from coarse to fine"));
    }
    let residual_norms = runs
        .iter()
        .map(|r| integrated_residual(field, r, index))
        .collect::<Result<Vec<f64>>>()?;
    let coarse = residual_norms[0];
    let fine = *residual_norms.last().expect("at least two runs");
    let refinement_ratio = if fine > 0.0 { coarse / fine } else if coarse > 0.0 { f64::INFINITY } else { 1.0 };
    let deterministic = fine <= noise_floor || refinement_ratio >= ratio_threshold;
    Ok(DensityModeReport {
        cells,
        residual_norms,
        refinement_ratio,
        ratio_threshold,
        noise_floor,
        decision: if deterministic { Mode::Deterministic } else { Mode::Stochastic },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_group_by_key_in_order() {
        let keys = vec![vec![1], vec![0], vec![1], vec![0], vec![2]];
        assert_eq!(group(&keys, 0..5), vec![vec![1, 3], vec![0, 2], vec![4]]);
    }

    #[test]
    fn scatter_matches_population_variance() {
        let data = [1.0, 2.0, 3.0, 4.0];
        let (m, s) = scatter(&data, 1, &[0, 1, 2, 3]);
        assert_eq!(m, vec![2.5]);
        assert_eq!(s[(0, 0)], 5.0);
    }
}

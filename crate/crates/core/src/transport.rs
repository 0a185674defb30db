//! Grid solvers for the continuity and Fokker–Planck equations, the
//! continuity residual, and velocity recovery from density snapshots.
//!
//! The continuity solver is first-order finite volume with upwind fluxes
//! `F = v_face * rho_upwind`, evaluated at face centers. Boundary faces are
//! closed, so mass is conserved to round-off, and the density must stay at
//! least two cells away from every edge ([`LEAK_TOLERANCE`]).

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::density::{DensityGrid, GridSpec};
use crate::error::{check_dim, Error, Result};
use crate::fields::VelocityField;
use crate::par;
use crate::particles::Diffusion;

/// Width of the boundary band, in cells, that must stay empty.
pub const BOUNDARY_CELLS: usize = 2;
/// Largest mass tolerated inside the boundary band.
pub const LEAK_TOLERANCE: f64 = 1e-9;
/// Default recovery mask: cells with `rho <= 1e-3 * max rho` are skipped.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Upwind1,
    /// Snapshots not produced by the solver (analytic or estimated).
    #[serde(rename = "none")]
    Sampled,
}

/// Time-ordered density snapshots and how they were produced.
#[derive(Debug, Clone)]
pub struct TransportRun {
    pub snapshots: Vec<DensityGrid>,
    pub field: VelocityField,
    pub cfl: f64,
    pub scheme: Scheme,
    /// Constant diffusion matrix `sigma sigma^T / 2` for Fokker–Planck runs.
    pub diffusion: Option<DMatrix<f64>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    field: &'a str,
    field_params: Option<&'a crate::fields::FieldSpec>,
    cfl: f64,
    scheme: Scheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    diffusion: Option<Vec<Vec<f64>>>,
    times: Vec<f64>,
    files: Vec<String>,
}

impl TransportRun {
    /// Wraps externally produced snapshots (analytic or histogram) as a run.
    pub fn from_snapshots(snapshots: Vec<DensityGrid>, field: VelocityField) -> Result<Self> {
        let run = TransportRun {
            snapshots,
            field,
            cfl: 0.0,
            scheme: Scheme::Sampled,
            diffusion: None,
        };
        run.validate()?;
        Ok(run)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .snapshots
            .first()
            .ok_or_else(|| Error::contract("run has no snapshots"))?;
        if self.snapshots.iter().any(|s| s.spec() != first.spec()) {
            return Err(Error::contract("run snapshots must share one grid"));
        }
        if self.snapshots.windows(2).any(|w| w[1].time() <= w[0].time()) {
            return Err(Error::contract("snapshot times must be strictly increasing"));
        }
        check_dim(first.spec().dim(), self.field.dim())
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(DensityGrid::time).collect()
    }

    pub fn spec(&self) -> &GridSpec {
        self.snapshots[0].spec()
    }

    /// Writes `snapshot_NNNN.csv` files with sidecars and `manifest.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            let name = format!("snapshot_{i:04}.csv");
            s.write_csv(dir.join(&name))?;
            files.push(name);
        }
        let manifest = Manifest {
            field: self.field.name(),
            field_params: self.field.spec(),
            cfl: self.cfl,
            scheme: self.scheme,
            diffusion: self
                .diffusion
                .as_ref()
                .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()),
            times: self.times(),
            files,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// `n + 1` evenly spaced times from `t0` to `t_end`, ending exactly at `t_end`.
pub fn uniform_times(t0: f64, t_end: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n)
        .map(|k| if k == n { t_end } else { t0 + (t_end - t0) * k as f64 / n as f64 })
        .collect()
}

/// Per-axis velocity at the right face of each cell; zero on the closed outer face.
struct Faces {
    values: Vec<Vec<f64>>,
}

struct Layout {
    strides: Vec<usize>,
    widths: Vec<f64>,
    cells: Vec<usize>,
    band: Vec<usize>,
}

impl Layout {
    fn new(spec: &GridSpec) -> Layout {
        let cells: Vec<usize> = spec.axes.iter().map(|a| a.cells).collect();
        let band = (0..spec.len())
            .filter(|&k| {
                spec.multi_index(k)
                    .iter()
                    .zip(&cells)
                    .any(|(i, n)| *i < BOUNDARY_CELLS || *i + BOUNDARY_CELLS >= *n)
            })
            .collect();
        Layout {
            strides: spec.strides(),
            widths: spec.axes.iter().map(|a| a.width()).collect(),
            cells,
            band,
        }
    }

    /// Index of coordinate `k` of flat cell `i`.
    fn coord(&self, i: usize, k: usize) -> usize {
        (i / self.strides[k]) % self.cells[k]
    }
}

fn faces(field: &VelocityField, spec: &GridSpec, layout: &Layout, t: f64) -> Faces {
    let p = spec.dim();
    let rows = par::map_indexed(spec.len(), |i| {
        let center = spec.center(i);
        let mut x = center.clone();
        let mut v = vec![0.0; p];
        (0..p)
            .map(|k| {
                if layout.coord(i, k) + 1 == layout.cells[k] {
                    return 0.0;
                }
                x[k] = center[k] + 0.5 * layout.widths[k];
                field.eval_into(t, &x, &mut v);
                x[k] = center[k];
                v[k]
            })
            .collect::<Vec<f64>>()
    });
    Faces {
        values: (0..p).map(|k| rows.iter().map(|r| r[k]).collect()).collect(),
    }
}

fn check_boundary(d: &DensityGrid, layout: &Layout) -> Result<()> {
    let vol = d.spec().cell_volume();
    let mass: f64 = layout.band.iter().map(|&k| d.values()[k]).sum::<f64>() * vol;
    if mass > LEAK_TOLERANCE {
        let axis = layout
            .band
            .iter()
            .filter(|&&k| d.values()[k] > 0.0)
            .find_map(|&k| {
                (0..layout.cells.len()).find(|&a| {
                    let i = layout.coord(k, a);
                    i < BOUNDARY_CELLS || i + BOUNDARY_CELLS >= layout.cells[a]
                })
            })
            .unwrap_or(0);
        return Err(Error::BoundaryLeak {
            axis,
            cells: BOUNDARY_CELLS,
            mass,
        });
    }
    Ok(())
}

/// Total outflow rate of each cell; the CFL limit is its inverse maximum.
fn advective_rate(faces: &Faces, layout: &Layout, n: usize) -> f64 {
    par::map_blocks(n, |r| {
        r.map(|i| {
            (0..layout.strides.len())
                .map(|k| {
                    let right = faces.values[k][i].max(0.0);
                    let left = if layout.coord(i, k) == 0 {
                        0.0
                    } else {
                        (-faces.values[k][i - layout.strides[k]]).max(0.0)
                    };
                    (right + left) / layout.widths[k]
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
    })
    .into_iter()
    .fold(0.0, f64::max)
}

fn diffusive_rate(diff: &DMatrix<f64>, layout: &Layout) -> f64 {
    let p = layout.widths.len();
    let mut r = 0.0;
    for k in 0..p {
        r += 2.0 * diff[(k, k)] / layout.widths[k].powi(2);
        for l in 0..p {
            if l != k {
                r += diff[(k, l)].abs() / (layout.widths[k] * layout.widths[l]);
            }
        }
    }
    r
}

fn limit_from_rate(rate: f64) -> f64 {
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Largest stable upwind step for `field` on `d` at time `d.time()`.
pub fn cfl_limit(field: &VelocityField, d: &DensityGrid) -> Result<f64> {
    check_dim(d.spec().dim(), field.dim())?;
    let layout = Layout::new(d.spec());
    let f = faces(field, d.spec(), &layout, d.time());
    Ok(limit_from_rate(advective_rate(&f, &layout, d.spec().len())))
}

fn upwind_update(rho: &[f64], faces: &Faces, layout: &Layout, dt: f64, diff: Option<&DMatrix<f64>>) -> Vec<f64> {
    let n = rho.len();
    let p = layout.strides.len();
    let flux = |k: usize, i: usize| -> f64 {
        // Right face of cell i along axis k.
        let u = faces.values[k][i];
        if u > 0.0 {
            u * rho[i]
        } else if u < 0.0 {
            u * rho[i + layout.strides[k]]
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; n];
    par::for_each_chunk_mut(&mut out, par::BLOCK, |c, chunk| {
        let base = c * par::BLOCK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let i = base + j;
            let mut div = 0.0;
            for k in 0..p {
                let right = flux(k, i);
                let left = if layout.coord(i, k) == 0 {
                    0.0
                } else {
                    flux(k, i - layout.strides[k])
                };
                div += (right - left) / layout.widths[k];
            }
            if let Some(dm) = diff {
                div += diffusion_divergence(rho, layout, dm, i);
            }
            *o = rho[i] - dt * div;
        }
    });
    out
}

/// Divergence of the diffusive flux `-D grad rho` at cell `i`, zero outside the grid.
fn diffusion_divergence(rho: &[f64], layout: &Layout, dm: &DMatrix<f64>, i: usize) -> f64 {
    let p = layout.strides.len();
    let at = |i: usize, k: usize, step: isize| -> Option<usize> {
        let c = layout.coord(i, k) as isize + step;
        if c < 0 || c >= layout.cells[k] as isize {
            None
        } else {
            Some((i as isize + step * layout.strides[k] as isize) as usize)
        }
    };
    let val = |i: Option<usize>| i.map_or(0.0, |i| rho[i]);
    // Flux through the right face of cell `i` along axis k; `None` for outside cells.
    let face_flux = |i: usize, k: usize| -> f64 {
        let Some(r) = at(i, k, 1) else { return 0.0 };
        let mut f = -dm[(k, k)] * (rho[r] - rho[i]) / layout.widths[k];
        for l in 0..p {
            if l == k || dm[(k, l)] == 0.0 {
                continue;
            }
            let g0 = (val(at(i, l, 1)) - val(at(i, l, -1))) / (2.0 * layout.widths[l]);
            let g1 = (val(at(r, l, 1)) - val(at(r, l, -1))) / (2.0 * layout.widths[l]);
            f -= dm[(k, l)] * 0.5 * (g0 + g1);
        }
        f
    };
    (0..p)
        .map(|k| {
            let left = at(i, k, -1).map_or(0.0, |l| face_flux(l, k));
            (face_flux(i, k) - left) / layout.widths[k]
        })
        .sum()
}

/// One upwind step of size `dt` from `d.time()`.
pub fn step_continuity(field: &VelocityField, d: &DensityGrid, dt: f64) -> Result<DensityGrid> {
    check_dim(d.spec().dim(), field.dim())?;
    if !(dt >= 0.0) {
        return Err(Error::contract("time step must be nonnegative"));
    }
    let layout = Layout::new(d.spec());
    check_boundary(d, &layout)?;
    let f = faces(field, d.spec(), &layout, d.time());
    let limit = limit_from_rate(advective_rate(&f, &layout, d.spec().len()));
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Stability { dt, admissible: limit });
    }
    let values = upwind_update(d.values(), &f, &layout, dt, None);
    DensityGrid::from_values(d.spec().clone(), values, d.time() + dt)
}

/// Solves the continuity equation from `d0` through every output time with
/// steps `cfl * cfl_limit`, landing on each output exactly.
pub fn solve_continuity(field: &VelocityField, d0: &DensityGrid, outputs: &[f64], cfl: f64) -> Result<TransportRun> {
    solve(field, None, d0, outputs, cfl)
}

/// Upwind advection plus explicit central diffusion `(1/2) sigma sigma^T : grad^2 rho`.
///
/// `sigma` must be constant; a zero `sigma` reproduces [`solve_continuity`] bit for bit.
pub fn solve_fokker_planck(
    drift: &VelocityField,
    sigma: &Diffusion,
    d0: &DensityGrid,
    outputs: &[f64],
    cfl: f64,
) -> Result<TransportRun> {
    let p = drift.dim();
    let s = match sigma {
        Diffusion::Scalar(s) => DMatrix::from_diagonal_element(p, p, *s),
        Diffusion::Matrix(m) => {
            check_dim(p, m.nrows())?;
            check_dim(p, m.ncols())?;
            m.clone()
        }
        Diffusion::Custom(_) => {
            return Err(Error::contract("the Fokker–Planck solver needs a constant sigma"))
        }
    };
    let diff = 0.5 * &s * s.transpose();
    let diff = if diff.iter().all(|v| *v == 0.0) { None } else { Some(diff) };
    let mut run = solve(drift, diff.as_ref(), d0, outputs, cfl)?;
    run.diffusion = Some(diff.unwrap_or_else(|| DMatrix::zeros(p, p)));
    Ok(run)
}

fn solve(
    field: &VelocityField,
    diff: Option<&DMatrix<f64>>,
    d0: &DensityGrid,
    outputs: &[f64],
    cfl: f64,
) -> Result<TransportRun> {
    check_dim(d0.spec().dim(), field.dim())?;
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::contract("cfl must lie in (0, 1]"));
    }
    if outputs.is_empty() || outputs[0] < d0.time() || outputs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract(
            "output times must be strictly increasing and not before the initial time",
        ));
    }
    let spec = d0.spec().clone();
    let layout = Layout::new(&spec);
    let n = spec.len();
    let diff_rate = diff.map_or(0.0, |dm| diffusive_rate(dm, &layout));
    let cached = field.is_autonomous().then(|| {
        let f = faces(field, &spec, &layout, d0.time());
        let rate = advective_rate(&f, &layout, n);
        (f, rate)
    });
    let mut rho = d0.values().to_vec();
    let mut t = d0.time();
    let mut snapshots = Vec::with_capacity(outputs.len());
    let mut current = d0.clone();
    for &target in outputs {
        while t < target {
            check_boundary(&current, &layout)?;
            let fresh;
            let (f, adv) = match &cached {
                Some((f, r)) => (f, *r),
                None => {
                    let f = faces(field, &spec, &layout, t);
                    let r = advective_rate(&f, &layout, n);
                    fresh = f;
                    (&fresh, r)
                }
            };
            let rate = if diff.is_some() { adv + diff_rate } else { adv };
            let dt_max = cfl * limit_from_rate(rate);
            let remaining = target - t;
            let (dt, next) = if dt_max >= remaining * (1.0 - 1e-12) {
                (remaining, target)
            } else {
                (dt_max, t + dt_max)
            };
            rho = upwind_update(&rho, f, &layout, dt, diff);
            t = next;
            current = DensityGrid::from_values(spec.clone(), rho.clone(), t)?;
        }
        snapshots.push(current.clone());
    }
    Ok(TransportRun {
        snapshots,
        field: field.clone(),
        cfl,
        scheme: Scheme::Upwind1,
        diffusion: None,
    })
}

/// Cellwise values on a grid, possibly negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub time: f64,
}

impl ScalarGrid {
    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_interior(run: &TransportRun, index: usize) -> Result<(f64, f64)> {
    if index == 0 || index + 1 >= run.snapshots.len() {
        return Err(Error::contract("index must have snapshots on both sides"));
    }
    let (a, b, c) = (
        run.snapshots[index - 1].time(),
        run.snapshots[index].time(),
        run.snapshots[index + 1].time(),
    );
    if ((c - b) - (b - a)).abs() > 1e-9 * (c - a) {
        return Err(Error::contract("snapshot spacing around the index must be uniform"));
    }
    Ok((b, 0.5 * (c - a)))
}

/// `R = d rho/dt + div(v rho)` by central differences at snapshot `index`.
pub fn residual(field: &VelocityField, run: &TransportRun, index: usize) -> Result<ScalarGrid> {
    run.validate()?;
    check_dim(run.spec().dim(), field.dim())?;
    let (t, dt) = check_interior(run, index)?;
    let spec = run.spec();
    let layout = Layout::new(spec);
    let p = spec.dim();
    let prev = run.snapshots[index - 1].values();
    let next = run.snapshots[index + 1].values();
    let rho = run.snapshots[index].values();
    let flux: Vec<Vec<f64>> = par::map_indexed(spec.len(), |i| {
        let v = field.evaluate(t, &spec.center(i)).expect("dimension checked");
        v.iter().map(|vk| vk * rho[i]).collect()
    });
    let values = par::map_indexed(spec.len(), |i| {
        let mut r = (next[i] - prev[i]) / (2.0 * dt);
        for k in 0..p {
            let c = layout.coord(i, k);
            let right = if c + 1 < layout.cells[k] { flux[i + layout.strides[k]][k] } else { 0.0 };
            let left = if c > 0 { flux[i - layout.strides[k]][k] } else { 0.0 };
            r += (right - left) / (2.0 * layout.widths[k]);
        }
        r
    });
    Ok(ScalarGrid {
        spec: spec.clone(),
        values,
        time: t,
    })
}

/// Per-cell velocity estimate with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub spec: GridSpec,
    pub time: f64,
    /// `velocity[k][cell]`; zero where masked.
    pub velocity: Vec<Vec<f64>>,
    /// `mask[k][cell]` is true where component `k` was recovered.
    pub mask: Vec<Vec<bool>>,
}

impl Recovery {
    /// Largest `|v_hat - v| / |v|` over recovered cells, per component pooled.
    pub fn max_relative_error(&self, truth: &VelocityField) -> Result<f64> {
        check_dim(self.spec.dim(), truth.dim())?;
        let mut worst = 0.0f64;
        for (k, comp) in self.velocity.iter().enumerate() {
            for (i, vh) in comp.iter().enumerate() {
                if !self.mask[k][i] {
                    continue;
                }
                let v = truth.evaluate(self.time, &self.spec.center(i))?[k];
                worst = worst.max((vh - v).abs() / v.abs().max(1e-12));
            }
        }
        Ok(worst)
    }

    /// Largest `|v_hat - v|` over recovered cells.
    pub fn max_abs_error(&self, truth: &VelocityField) -> Result<f64> {
        check_dim(self.spec.dim(), truth.dim())?;
        let mut worst = 0.0f64;
        for (k, comp) in self.velocity.iter().enumerate() {
            for (i, vh) in comp.iter().enumerate() {
                if self.mask[k][i] {
                    let v = truth.evaluate(self.time, &self.spec.center(i))?[k];
                    worst = worst.max((vh - v).abs());
                }
            }
        }
        Ok(worst)
    }

    pub fn recovered_cells(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }
}

/// Flux-integral estimate `-(∫_{-inf}^{x_k} d rho/dt du_k) / rho` along `axis`.
fn recover_axis(run: &TransportRun, index: usize, axis: usize, floor: f64) -> Result<(f64, Vec<f64>, Vec<bool>)> {
    let (t, dt) = check_interior(run, index)?;
    let spec = run.spec();
    let layout = Layout::new(spec);
    let rho = run.snapshots[index].values();
    let prev = run.snapshots[index - 1].values();
    let next = run.snapshots[index + 1].values();
    let cut = floor * run.snapshots[index].max_value();
    let w = layout.widths[axis];
    let stride = layout.strides[axis];
    let n_axis = layout.cells[axis];
    let mut v = vec![0.0; spec.len()];
    let mut mask = vec![false; spec.len()];
    for start in 0..spec.len() {
        if layout.coord(start, axis) != 0 {
            continue;
        }
        let mut cum = 0.0;
        for j in 0..n_axis {
            let i = start + j * stride;
            let dr = (next[i] - prev[i]) / (2.0 * dt);
            let center = cum + 0.5 * dr * w;
            cum += dr * w;
            if rho[i] > cut {
                v[i] = -center / rho[i];
                mask[i] = true;
            }
        }
    }
    Ok((t, v, mask))
}

/// One-dimensional velocity recovery at snapshot `index` (default: the middle interior one).
pub fn recover_velocity(run: &TransportRun, index: Option<usize>, floor: Option<f64>) -> Result<Recovery> {
    run.validate()?;
    if run.spec().dim() != 1 {
        return Err(Error::contract(
            "single-run recovery is one-dimensional; use recover_velocity_probes",
        ));
    }
    recover_velocity_probes(std::slice::from_ref(run), index, floor)
}

/// Component `j` from the `j`-th separable probe run.
///
/// The estimate along axis `j` equals `v_j` exactly when the other components
/// do not vary along their own axes (`∂_k v_k = 0` for `k != j`), as for
/// rotations; otherwise it carries their divergence integrated along `x_j`.
pub fn recover_velocity_probes(runs: &[TransportRun], index: Option<usize>, floor: Option<f64>) -> Result<Recovery> {
    let first = runs.first().ok_or_else(|| Error::contract("no probe runs"))?;
    let p = first.spec().dim();
    check_dim(p, runs.len())?;
    let floor = floor.unwrap_or(DEFAULT_FLOOR);
    let mut velocity = Vec::with_capacity(p);
    let mut mask = Vec::with_capacity(p);
    let mut time = f64::NAN;
    for (axis, run) in runs.iter().enumerate() {
        run.validate()?;
        if run.spec() != first.spec() {
            return Err(Error::contract("probe runs must share one grid"));
        }
        let idx = index.unwrap_or(run.snapshots.len() / 2);
        let (t, v, m) = recover_axis(run, idx, axis, floor)?;
        time = t;
        velocity.push(v);
        mask.push(m);
    }
    if mask.iter().any(|m| !m.iter().any(|b| *b)) {
        return Err(Error::Unrecoverable);
    }
    Ok(Recovery {
        spec: first.spec().clone(),
        time,
        velocity,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{analytic_gaussian, moments, Axis};
    use approx::assert_relative_eq;

    fn grid1(lo: f64, hi: f64, cells: usize) -> GridSpec {
        GridSpec::uniform(lo, hi, cells, 1).unwrap()
    }

    fn gaussian1(mean: f64, var: f64, spec: &GridSpec) -> DensityGrid {
        analytic_gaussian(&[mean], &DMatrix::from_element(1, 1, var), spec, 0.0).unwrap()
    }

    fn boxed(spec: &GridSpec, lo: usize, hi: usize) -> DensityGrid {
        let mut v = vec![0.0; spec.len()];
        v[lo..hi].iter_mut().for_each(|x| *x = 1.0);
        DensityGrid::from_values(spec.clone(), v, 0.0).unwrap().normalized().unwrap()
    }

    #[test]
    fn zero_field_leaves_density_unchanged() {
        let spec = grid1(-4.0, 4.0, 80);
        let d = gaussian1(0.0, 0.2, &spec);
        let out = step_continuity(&VelocityField::constant(vec![0.0]), &d, 0.3).unwrap();
        assert_eq!(out.values(), d.values());
    }

    #[test]
    fn unit_courant_number_shifts_one_cell() {
        let spec = grid1(0.0, 10.0, 100);
        let d = boxed(&spec, 20, 30);
        let f = VelocityField::constant(vec![1.0]);
        let w = spec.axes[0].width();
        assert_relative_eq!(cfl_limit(&f, &d).unwrap(), w, epsilon = 1e-15);
        let out = step_continuity(&f, &d, w).unwrap();
        let expected = boxed(&spec, 21, 31);
        assert_eq!(out.values(), expected.values());
    }

    #[test]
    fn cfl_violation_reports_admissible_step() {
        let spec = grid1(0.0, 10.0, 100);
        let d = boxed(&spec, 20, 30);
        match step_continuity(&VelocityField::constant(vec![2.0]), &d, 0.1) {
            Err(Error::Stability { admissible, .. }) => assert_relative_eq!(admissible, 0.05, epsilon = 1e-15),
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn boundary_contact_is_an_error() {
        let spec = grid1(0.0, 10.0, 100);
        let d = boxed(&spec, 1, 10);
        assert!(matches!(
            step_continuity(&VelocityField::constant(vec![1.0]), &d, 0.01),
            Err(Error::BoundaryLeak { axis: 0, .. })
        ));
    }

    #[test]
    fn damped_gaussian_contracts() {
        let spec = grid1(-4.0, 4.0, 6400);
        let d = gaussian1(1.0, 0.04, &spec);
        let run = solve_continuity(&VelocityField::damped(1, 1.0), &d, &[0.5], 0.9).unwrap();
        let m = moments(&run.snapshots[0]).unwrap();
        let w = spec.axes[0].width();
        assert!((m.mean[0] - (-0.5f64).exp()).abs() <= 2.0 * w);
        assert_relative_eq!(m.cov[(0, 0)], 0.04 * (-1f64).exp(), max_relative = 0.1);
        assert_relative_eq!(run.snapshots[0].mass(), 1.0, epsilon = 1e-10);
        assert_eq!(run.snapshots[0].time(), 0.5);
    }

    #[test]
    fn zero_sigma_fokker_planck_is_bitwise_continuity() {
        let spec = grid1(-4.0, 4.0, 100);
        let d = gaussian1(0.5, 0.1, &spec);
        let field = VelocityField::damped(1, 1.0);
        let times = uniform_times(0.0, 0.3, 3);
        let a = solve_continuity(&field, &d, &times, 0.8).unwrap();
        let b = solve_fokker_planck(&field, &Diffusion::Scalar(0.0), &d, &times, 0.8).unwrap();
        for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn heat_kernel_adds_variance() {
        let spec = grid1(-5.0, 5.0, 500);
        let d = gaussian1(0.0, 0.1, &spec);
        let run = solve_fokker_planck(
            &VelocityField::constant(vec![0.0]),
            &Diffusion::Scalar(1.0),
            &d,
            &[0.2],
            0.9,
        )
        .unwrap();
        let m = moments(&run.snapshots[0]).unwrap();
        assert_relative_eq!(m.cov[(0, 0)], 0.3, max_relative = 0.02);
    }

    #[test]
    fn constant_field_recovered_from_translated_box() {
        // Smooth-edged box so central time differences see a clean flux.
        let spec = grid1(-2.0, 6.0, 800);
        let soft = |x: f64| 1.0 / (1.0 + (-(x - 0.0) / 0.05).exp()) / (1.0 + ((x - 1.0) / 0.05).exp());
        let c = 0.7;
        let times = uniform_times(0.0, 0.02, 4);
        let snaps = times
            .iter()
            .map(|&t| DensityGrid::from_fn(spec.clone(), t, |x| soft(x[0] - c * t)).unwrap())
            .collect();
        let field = VelocityField::constant(vec![c]);
        let run = TransportRun::from_snapshots(snaps, field.clone()).unwrap();
        let rec = recover_velocity(&run, None, None).unwrap();
        let err = rec.max_relative_error(&field).unwrap();
        assert!(err <= 0.02, "{err}");
    }

    #[test]
    fn static_density_recovers_zero() {
        let spec = grid1(-4.0, 4.0, 80);
        let d = gaussian1(0.0, 0.3, &spec);
        let snaps = (0..3).map(|k| d.clone().with_time(k as f64 * 0.1)).collect();
        let run = TransportRun::from_snapshots(snaps, VelocityField::constant(vec![0.0])).unwrap();
        let rec = recover_velocity(&run, None, None).unwrap();
        assert!(rec.velocity[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_mask_is_unrecoverable() {
        let spec = grid1(-4.0, 4.0, 8);
        let zero = DensityGrid::from_values(spec, vec![0.0; 8], 0.0).unwrap();
        let snaps = (0..3).map(|k| zero.clone().with_time(k as f64)).collect();
        let run = TransportRun::from_snapshots(snaps, VelocityField::constant(vec![0.0])).unwrap();
        assert!(matches!(recover_velocity(&run, None, None), Err(Error::Unrecoverable)));
    }

    #[test]
    fn two_dimensional_rotation_conserves_mass() {
        let spec = GridSpec::new(vec![Axis::new(-3.0, 3.0, 60).unwrap(); 2]).unwrap();
        let d = analytic_gaussian(&[1.0, 0.0], &DMatrix::from_diagonal_element(2, 2, 0.05), &spec, 0.0).unwrap();
        let run = solve_continuity(&VelocityField::rotation2d(1.0), &d, &[0.5], 0.9).unwrap();
        assert_relative_eq!(run.snapshots[0].mass(), 1.0, epsilon = 1e-12);
        assert!(run.snapshots[0].values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn manifest_lists_snapshots() {
        let spec = grid1(-4.0, 4.0, 40);
        let d = gaussian1(0.0, 0.3, &spec);
        let run = solve_continuity(&VelocityField::damped(1, 1.0), &d, &uniform_times(0.0, 0.1, 2), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_dir(dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["field"], "damped");
        assert_eq!(manifest["scheme"], "upwind1");
        assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
        assert!(dir.path().join("snapshot_0002.json").exists());
    }
}

//! Densities on rectangular grids: histogram and kernel estimates from
//! ensembles, discretized Gaussians, moments and distances.
//!
//! Cells are stored row-major with the last axis varying fastest. Values
//! are cell averages, so the mass is `sum(values) * cell_volume`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{check_dim, Error, Result};
use crate::par;
use crate::particles::Ensemble;

/// Kernel support in bandwidths; the Gaussian tail beyond is below `1e-15`.
const KERNEL_CUTOFF: f64 = 8.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        let a = Axis { lower, upper, cells };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if !(self.upper > self.lower) || !self.lower.is_finite() || !self.upper.is_finite() || self.cells == 0 {
            return Err(Error::contract("grid axis needs finite lower < upper and at least one cell"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.width()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.width()
    }

    /// Cell containing `x`; the upper edge belongs to the last cell.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if !(x >= self.lower && x <= self.upper) {
            return None;
        }
        let k = ((x - self.lower) / self.width()).floor() as usize;
        Some(k.min(self.cells - 1))
    }

    fn clip(&self, x: f64) -> usize {
        if x.is_nan() || x <= self.lower {
            0
        } else {
            self.locate(x).unwrap_or(self.cells - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let g = GridSpec { axes };
        g.validate()?;
        Ok(g)
    }

    pub fn uniform(lower: f64, upper: f64, cells: usize, dim: usize) -> Result<Self> {
        GridSpec::new(vec![Axis::new(lower, upper, cells)?; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::contract("grid needs at least one axis"));
        }
        self.axes.iter().try_for_each(Axis::validate)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.cells).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    /// Flat-index stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for k in (0..self.dim().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].cells;
        }
        s
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.axes[k].cells;
            flat /= self.axes[k].cells;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.cells + i)
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(i, a)| a.center(*i))
            .collect()
    }

    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (xi, a) in x.iter().zip(&self.axes) {
            flat = flat * a.cells + a.locate(*xi)?;
        }
        Some(flat)
    }

    /// Same extent with every axis split `factor` times finer.
    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec {
            axes: self
                .axes
                .iter()
                .map(|a| Axis {
                    lower: a.lower,
                    upper: a.upper,
                    cells: a.cells * factor.max(1),
                })
                .collect(),
        }
    }
}

/// What `histogram` and `kde` do with particles outside the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfGrid {
    /// Discard and count; normalize by the retained particles.
    #[default]
    Drop,
    /// Assign to the nearest edge cell.
    Clip,
}

/// Cell-averaged density with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    spec: GridSpec,
    values: Vec<f64>,
    time: f64,
    dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    axes: Vec<Axis>,
    time: f64,
    mass: f64,
    dropped: usize,
}

impl DensityGrid {
    /// Wraps nonnegative cell values without rescaling them.
    pub fn from_values(spec: GridSpec, values: Vec<f64>, time: f64) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.len(), values.len())?;
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract("density values must be finite and nonnegative"));
        }
        Ok(DensityGrid {
            spec,
            values,
            time,
            dropped: 0,
        })
    }

    /// Samples `f` at cell centers and rescales to unit mass.
    pub fn from_fn(spec: GridSpec, time: f64, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> Result<Self> {
        spec.validate()?;
        let values = par::map_indexed(spec.len(), |k| f(&spec.center(k)));
        DensityGrid::from_values(spec, values, time)?.normalized()
    }

    /// Rescaled to unit mass; fails for zero mass.
    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(Error::contract("density has no mass to normalize"));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(self)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn mass(&self) -> f64 {
        par::sum(self.values.len(), |k| self.values[k]) * self.spec.cell_volume()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Sums blocks of `factor` cells per axis onto the coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<DensityGrid> {
        if factor == 0 || self.spec.axes.iter().any(|a| a.cells % factor != 0) {
            return Err(Error::contract("coarsening factor must divide every axis"));
        }
        let coarse = GridSpec {
            axes: self
                .spec
                .axes
                .iter()
                .map(|a| Axis {
                    lower: a.lower,
                    upper: a.upper,
                    cells: a.cells / factor,
                })
                .collect(),
        };
        let mut values = vec![0.0; coarse.len()];
        for (k, v) in self.values.iter().enumerate() {
            let idx: Vec<usize> = self.spec.multi_index(k).iter().map(|i| i / factor).collect();
            values[coarse.flat_index(&idx)] += v;
        }
        let scale = (factor as f64).powi(self.spec.dim() as i32);
        values.iter_mut().for_each(|v| *v /= scale);
        Ok(DensityGrid {
            spec: coarse,
            values,
            time: self.time,
            dropped: self.dropped,
        })
    }

    /// Writes `cell_index_1,...,cell_index_p,value` plus a `.json` sidecar.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.spec.dim()).map(|i| format!("cell_index_{i}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.spec.multi_index(k).iter().map(|i| i.to_string()).collect();
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            axes: self.spec.axes.clone(),
            time: self.time,
            mass: self.mass(),
            dropped: self.dropped,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let spec = GridSpec::new(sidecar.axes)?;
        let mut values = vec![0.0; spec.len()];
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let bad = |e: String| Error::contract(format!("bad density row: {e}"));
            let idx: Vec<usize> = (0..spec.dim())
                .map(|i| rec[i].parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?;
            if idx.iter().zip(&spec.axes).any(|(i, a)| *i >= a.cells) {
                return Err(bad("cell index out of range".into()));
            }
            values[spec.flat_index(&idx)] = rec[spec.dim()].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        }
        let mut d = DensityGrid::from_values(spec, values, sidecar.time)?;
        d.dropped = sidecar.dropped;
        Ok(d)
    }
}

fn check_grid(e: &Ensemble, spec: &GridSpec) -> Result<()> {
    spec.validate()?;
    check_dim(spec.dim(), e.dim())?;
    if e.is_empty() {
        return Err(Error::contract("ensemble is empty"));
    }
    Ok(())
}

/// Cell value = count / (N_retained * cell_volume).
pub fn histogram(e: &Ensemble, spec: &GridSpec, policy: OutOfGrid) -> Result<DensityGrid> {
    check_grid(e, spec)?;
    let n = e.len();
    let cells = spec.len();
    let partials = par::map_blocks(n, |range| {
        let mut counts = vec![0u64; cells];
        let mut dropped = 0usize;
        for i in range {
            let x = e.particle(i);
            let k = match policy {
                OutOfGrid::Drop => spec.locate(x),
                OutOfGrid::Clip => Some(
                    x.iter()
                        .zip(&spec.axes)
                        .fold(0, |acc, (xi, a)| acc * a.cells + a.clip(*xi)),
                ),
            };
            match k {
                Some(k) => counts[k] += 1,
                None => dropped += 1,
            }
        }
        (counts, dropped)
    });
    let mut counts = vec![0u64; cells];
    let mut dropped = 0;
    for (c, d) in partials {
        dropped += d;
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    let kept = n - dropped;
    if kept == 0 {
        return Err(Error::contract("every particle lies outside the grid"));
    }
    let scale = 1.0 / (kept as f64 * spec.cell_volume());
    Ok(DensityGrid {
        spec: spec.clone(),
        values: counts.into_iter().map(|c| c as f64 * scale).collect(),
        time: e.time(),
        dropped,
    })
}

/// Kernel width choice for [`kde`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Scalar(f64),
    PerAxis(Vec<f64>),
    /// Per-axis `sample_std * N^(-1/(p+4))`.
    Rule,
}

impl Bandwidth {
    pub fn resolve(&self, e: &Ensemble) -> Result<Vec<f64>> {
        let p = e.dim();
        let h = match self {
            Bandwidth::Scalar(h) => vec![*h; p],
            Bandwidth::PerAxis(h) => {
                check_dim(p, h.len())?;
                h.clone()
            }
            Bandwidth::Rule => {
                let m = moments_ensemble(e);
                let factor = (e.len() as f64).powf(-1.0 / (p as f64 + 4.0));
                (0..p).map(|k| m.cov[(k, k)].sqrt() * factor).collect()
            }
        };
        if h.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::contract("bandwidth must be positive"));
        }
        Ok(h)
    }
}

/// Gaussian product-kernel estimate sampled at cell centers.
///
/// Each particle's kernel is normalized to unit mass over the grid before
/// summing; particles whose kernel misses the grid entirely count as dropped.
pub fn kde(e: &Ensemble, spec: &GridSpec, bandwidth: &Bandwidth) -> Result<DensityGrid> {
    check_grid(e, spec)?;
    let h = bandwidth.resolve(e)?;
    let p = spec.dim();
    let cells = spec.len();
    let strides = spec.strides();
    let vol = spec.cell_volume();
    let partials = par::map_blocks(e.len(), |range| {
        let mut acc = vec![0.0; cells];
        let mut dropped = 0usize;
        let mut spans: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new()); p];
        for i in range {
            let x = e.particle(i);
            let mut total = 1.0;
            for k in 0..p {
                let a = &spec.axes[k];
                let w = a.width();
                let lo = ((x[k] - KERNEL_CUTOFF * h[k] - a.lower) / w).floor().max(0.0);
                let hi = ((x[k] + KERNEL_CUTOFF * h[k] - a.lower) / w).ceil().min(a.cells as f64);
                let (lo, hi) = if hi <= lo { (0, 0) } else { (lo as usize, hi as usize) };
                let weights: Vec<f64> = (lo..hi)
                    .map(|c| {
                        let z = (a.center(c) - x[k]) / h[k];
                        (-0.5 * z * z).exp()
                    })
                    .collect();
                total *= weights.iter().sum::<f64>();
                spans[k] = (lo, weights);
            }
            if !(total > 0.0) {
                dropped += 1;
                continue;
            }
            let scale = 1.0 / (total * vol);
            accumulate(&mut acc, &spans, &strides, 0, 0, scale);
        }
        (acc, dropped)
    });
    let mut values = vec![0.0; cells];
    let mut dropped = 0;
    for (a, d) in partials {
        dropped += d;
        for (v, x) in values.iter_mut().zip(a) {
            *v += x;
        }
    }
    let kept = e.len() - dropped;
    if kept == 0 {
        return Err(Error::contract("every particle lies outside the grid"));
    }
    values.iter_mut().for_each(|v| *v /= kept as f64);
    Ok(DensityGrid {
        spec: spec.clone(),
        values,
        time: e.time(),
        dropped,
    })
}

fn accumulate(acc: &mut [f64], spans: &[(usize, Vec<f64>)], strides: &[usize], axis: usize, base: usize, w: f64) {
    let (lo, weights) = &spans[axis];
    if axis + 1 == spans.len() {
        for (j, wj) in weights.iter().enumerate() {
            acc[base + lo + j] += w * wj;
        }
    } else {
        for (j, wj) in weights.iter().enumerate() {
            accumulate(acc, spans, strides, axis + 1, base + (lo + j) * strides[axis], w * wj);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    #[serde(serialize_with = "crate::stats::serialize_rows")]
    pub cov: DMatrix<f64>,
    pub trace_cov: f64,
    pub mass: f64,
}

/// Mean and covariance by cell-center quadrature.
pub fn moments(d: &DensityGrid) -> Result<MomentReport> {
    let mass = d.mass();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::StaleGrid { mass });
    }
    let spec = &d.spec;
    let p = spec.dim();
    let vol = spec.cell_volume();
    let weighted = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| {
        par::sum(spec.len(), |k| {
            let v = d.values[k];
            if v == 0.0 {
                0.0
            } else {
                v * f(&spec.center(k))
            }
        }) * vol
    };
    let mean: Vec<f64> = (0..p).map(|i| weighted(&|c: &[f64]| c[i]) / mass).collect();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let (mi, mj) = (mean[i], mean[j]);
            let c = weighted(&|c: &[f64]| (c[i] - mi) * (c[j] - mj)) / mass;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    Ok(MomentReport {
        trace_cov: cov.trace(),
        mean,
        cov,
        mass,
    })
}

/// Sample mean and covariance with denominator `N`.
pub fn moments_ensemble(e: &Ensemble) -> MomentReport {
    let p = e.dim();
    let n = e.len() as f64;
    let mean: Vec<f64> = (0..p).map(|i| par::sum(e.len(), |k| e.particle(k)[i]) / n).collect();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let c = par::sum(e.len(), |k| {
                let x = e.particle(k);
                (x[i] - mean[i]) * (x[j] - mean[j])
            }) / n;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    MomentReport {
        trace_cov: cov.trace(),
        mean,
        cov,
        mass: 1.0,
    }
}

/// `sum |a - b| * cell_volume` on identical grids.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::contract("L1 distance needs identical grids"));
    }
    Ok(par::sum(a.values.len(), |k| (a.values[k] - b.values[k]).abs()) * a.spec.cell_volume())
}

/// `P(a < Z < b)` for standard normal `Z`, accurate in both tails.
pub fn normal_interval(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    if a >= 0.0 {
        0.5 * (erfc(a / s) - erfc(b / s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b / s) - erfc(-a / s))
    } else {
        1.0 - 0.5 * (erfc(-a / s) + erfc(b / s))
    }
}

/// Discretized `N(mean, cov)`, renormalized on the grid.
///
/// Diagonal covariances use exact cell averages; correlated ones sample the
/// density at cell centers.
pub fn analytic_gaussian(mean: &[f64], cov: &DMatrix<f64>, spec: &GridSpec, time: f64) -> Result<DensityGrid> {
    spec.validate()?;
    let p = spec.dim();
    check_dim(p, mean.len())?;
    check_dim(p, cov.nrows())?;
    check_dim(p, cov.ncols())?;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::contract("covariance must be positive definite"))?;
    let diagonal = (0..p).all(|i| (0..p).all(|j| i == j || cov[(i, j)] == 0.0));
    let values: Vec<f64> = if diagonal {
        let per_axis: Vec<Vec<f64>> = (0..p)
            .map(|k| {
                let a = &spec.axes[k];
                let s = cov[(k, k)].sqrt();
                (0..a.cells)
                    .map(|c| normal_interval((a.edge(c) - mean[k]) / s, (a.edge(c + 1) - mean[k]) / s) / a.width())
                    .collect()
            })
            .collect();
        par::map_indexed(spec.len(), |k| {
            spec.multi_index(k)
                .iter()
                .enumerate()
                .map(|(ax, i)| per_axis[ax][*i])
                .product()
        })
    } else {
        let inv = chol.inverse();
        par::map_indexed(spec.len(), |k| {
            let c = spec.center(k);
            let d = nalgebra::DVector::from_iterator(p, c.iter().zip(mean).map(|(a, b)| a - b));
            (-0.5 * (d.transpose() * &inv * &d)[(0, 0)]).exp()
        })
    };
    DensityGrid::from_values(spec.clone(), values, time)?.normalized()
}

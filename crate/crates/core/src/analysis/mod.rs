//! End-to-end checks built from the particle, density and transport
//! layers.
//!
//! * [`reynolds`]: particles versus the continuity solver versus closed forms,
//!   and velocity recovery from the resulting run.
//! * [`expansion`]: concentration, moment-expansion and dual-expansion checks,
//!   measured as fitted log-log orders over a parameter ladder.
//! * [`detect`]: conditional-variance and residual-persistence detectors for
//!   stochastic motion.

pub mod detect;
pub mod expansion;
pub mod reynolds;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::density::{analytic_gaussian, DensityGrid, GridSpec};
use crate::error::{check_dim, Error, Result};
use crate::fields::VelocityField;
use crate::par;
use crate::particles::InitialDistribution;
use crate::stats::loglog_fit;

pub use detect::{
    calibration_floor, delta_scaling, density_mode_detection, detect_stochasticity, integrated_residual,
    DeltaScalingReport, DensityModeReport,
    DetectOptions, DetectionVerdict, Mode,
};
pub use expansion::{
    concentration_check, dual_expansion_check, moment_expansion_check, variance_remainder_scaling, DualExpansionReport,
    ExpansionMode, ExpansionOptions, MomentExpansionReport,
};
pub use reynolds::{reynolds_check, uniqueness_check, ReynoldsOptions, ReynoldsOutcome, ReynoldsReport, UniquenessReport};

/// Decay of a quantity along a decreasing parameter ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    /// Name of the ladder parameter (`sigma`, `dt`, ...).
    pub parameter: String,
    pub sigmas: Vec<f64>,
    pub quantities: Vec<f64>,
    /// Log-log slope; `None` when every quantity is below `zero_tolerance`.
    pub fitted_order: Option<f64>,
    pub required_order: f64,
    pub zero_tolerance: f64,
    pub pass: bool,
}

impl ScalingReport {
    pub fn new(
        parameter: &str,
        sigmas: Vec<f64>,
        quantities: Vec<f64>,
        required_order: f64,
        zero_tolerance: f64,
    ) -> Result<Self> {
        check_ladder(&sigmas)?;
        check_dim(sigmas.len(), quantities.len())?;
        if quantities.iter().any(|q| !q.is_finite()) {
            return Err(Error::contract("scaling quantities must be finite"));
        }
        let (fitted_order, pass) = if quantities.iter().all(|q| q.abs() <= zero_tolerance) {
            (None, true)
        } else if quantities.iter().any(|q| *q <= 0.0) {
            (None, false)
        } else {
            let order = loglog_fit(&sigmas, &quantities)?.slope;
            (Some(order), order >= required_order)
        };
        Ok(ScalingReport {
            parameter: parameter.into(),
            sigmas,
            quantities,
            fitted_order,
            required_order,
            zero_tolerance,
            pass,
        })
    }

    /// True if every quantity is no larger than its predecessor.
    pub fn monotone_decreasing(&self) -> bool {
        self.quantities.windows(2).all(|w| w[1] <= w[0])
    }
}

fn check_ladder(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::contract("a scaling ladder needs at least two values"));
    }
    if values.iter().any(|s| !(*s > 0.0)) || values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::contract("ladder values must be positive and strictly decreasing"));
    }
    Ok(())
}

/// Mean and covariance at time `t` of a Gaussian moved by an affine field.
///
/// Uses the exponential of the augmented matrix `[[A, b], [0, 0]]`.
pub fn affine_gaussian(field: &VelocityField, mean: &[f64], cov: &DMatrix<f64>, t: f64) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let (a, b) = field.affine_parts()?;
    let p = a.nrows();
    let mut aug = DMatrix::zeros(p + 1, p + 1);
    aug.view_mut((0, 0), (p, p)).copy_from(&(&a * t));
    aug.view_mut((0, p), (p, 1)).copy_from(&(&b * t));
    let e = aug.exp();
    let phi = e.view((0, 0), (p, p)).into_owned();
    let shift: DVector<f64> = e.view((0, p), (p, 1)).column(0).into_owned();
    let m = &phi * DVector::from_column_slice(mean) + shift;
    let c = &phi * cov * phi.transpose();
    let c = 0.5 * (&c + c.transpose());
    Some((m.iter().copied().collect(), c))
}

/// Discretizes an initial distribution on a grid, normalized to unit mass.
pub fn initial_density(dist: &InitialDistribution, spec: &GridSpec, time: f64) -> Result<DensityGrid> {
    check_dim(spec.dim(), dist.dim())?;
    match dist {
        InitialDistribution::Gaussian { mean, .. } => {
            let cov = dist
                .cov_matrix()
                .ok_or_else(|| Error::contract("covariance must be a square matrix"))?;
            analytic_gaussian(mean, &cov, spec, time)
        }
        InitialDistribution::Uniform { lower, upper } => {
            let overlap: Vec<Vec<f64>> = spec
                .axes
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    (0..a.cells)
                        .map(|c| {
                            let lo = a.edge(c).max(lower[k]);
                            let hi = a.edge(c + 1).min(upper[k]);
                            if upper[k] == lower[k] {
                                f64::from(a.locate(lower[k]) == Some(c))
                            } else {
                                (hi - lo).max(0.0)
                            }
                        })
                        .collect()
                })
                .collect();
            let values = par::map_indexed(spec.len(), |k| {
                spec.multi_index(k).iter().enumerate().map(|(ax, i)| overlap[ax][*i]).product()
            });
            DensityGrid::from_values(spec.clone(), values, time)?.normalized()
        }
        InitialDistribution::DeltaCloud { center, radius } => {
            let r2 = radius * radius;
            let values = par::map_indexed(spec.len(), |k| {
                let c = spec.center(k);
                f64::from(c.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
            });
            let mut d = DensityGrid::from_values(spec.clone(), values, time)?;
            if d.mass() == 0.0 {
                let cell = spec
                    .locate(center)
                    .ok_or_else(|| Error::contract("delta cloud center lies outside the grid"))?;
                let mut v = vec![0.0; spec.len()];
                v[cell] = 1.0;
                d = DensityGrid::from_values(spec.clone(), v, time)?;
            }
            d.normalized()
        }
    }
}

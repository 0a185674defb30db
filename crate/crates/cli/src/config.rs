//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use flowlab::analysis::{DetectOptions, ExpansionOptions, Mode};
use flowlab::density::{Axis, GridSpec};
use flowlab::fields::{FieldSpec, FunctionSpec};
use flowlab::noise::{NoiseKind, NoiseSpec};
use flowlab::particles::{InitialDistribution, Method};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Simulate,
    Solve,
    Residual,
    Recover,
    Moments,
    Reynolds,
    Detect,
    Scaling,
}

impl Experiment {
    pub const CATALOG: [&'static str; 8] = [
        "detect", "moments", "recover", "residual", "reynolds", "scaling", "simulate", "solve",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: Experiment,
    /// Drives particle sampling and Monte Carlo windows; the noise has its own seed.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Constant scalar diffusion `σ* = sigma I`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reynolds: Option<ReynoldsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recover: Option<RecoverSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<DetectSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridConfig {
    pub fn build(&self) -> Result<GridSpec> {
        let p = self.lower.len();
        if self.upper.len() != p || self.cells.len() != p {
            bail!("grid.lower, grid.upper and grid.cells must have the same length");
        }
        let axes = (0..p)
            .map(|k| Axis::new(self.lower[k], self.upper[k], self.cells[k]))
            .collect::<flowlab::Result<Vec<_>>>()?;
        Ok(GridSpec::new(axes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t0: f64,
    pub t_end: Option<f64>,
    /// Particle integration step.
    pub dt: f64,
    pub method: Method,
    /// Transport steps are `cfl` times the stability limit.
    pub cfl: f64,
    /// Explicit output times; otherwise `intervals` uniform steps from `t0` to `t_end`.
    pub outputs: Option<Vec<f64>>,
    pub intervals: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            t0: 0.0,
            t_end: None,
            dt: 1e-3,
            method: Method::Rk4,
            cfl: 0.9,
            outputs: None,
            intervals: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReynoldsSection {
    /// Solver refinement per axis; defaults depend on the dimension.
    pub refine: Option<usize>,
    pub max_l1_analytic: f64,
    pub max_l1_pde: f64,
    /// Also recover the velocity from the solver run and test it against `alternative`.
    pub uniqueness: Option<UniquenessSection>,
}

impl Default for ReynoldsSection {
    fn default() -> Self {
        ReynoldsSection {
            refine: None,
            max_l1_analytic: 0.02,
            max_l1_pde: 0.05,
            uniqueness: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessSection {
    pub alternative: FieldSpec,
    #[serde(default = "default_max_relative_error")]
    pub max_relative_error: f64,
    #[serde(default = "default_min_ratio")]
    pub min_ratio: f64,
    #[serde(default)]
    pub index: Option<usize>,
}

fn default_max_relative_error() -> f64 {
    0.05
}

fn default_min_ratio() -> f64 {
    10.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualSection {
    /// Field the residual is evaluated against; the generating field by default.
    pub hypothesis: Option<FieldSpec>,
    pub index: Option<usize>,
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverSection {
    pub floor: f64,
    pub index: Option<usize>,
    pub max_relative_error: f64,
    pub alternative: Option<FieldSpec>,
    pub min_ratio: f64,
}

impl Default for RecoverSection {
    fn default() -> Self {
        RecoverSection {
            floor: flowlab::transport::DEFAULT_FLOOR,
            index: None,
            max_relative_error: 0.05,
            alternative: None,
            min_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentsCheck {
    Expansion,
    Remainder,
    Dual,
    Concentration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSection {
    pub check: MomentsCheck,
    pub x0: Vec<f64>,
    /// Sigma ladder (expansion, concentration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    /// Fixed sigma (remainder, dual).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Window length (expansion, dual).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Window ladder (remainder).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dts: Option<Vec<f64>>,
    /// Test function (dual, concentration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<FunctionSpec>,
    /// Known bound on the test function (concentration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default = "default_max_order")]
    pub max_order: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_min_order")]
    pub min_order: f64,
    #[serde(default)]
    pub options: ExpansionOptions,
}

fn default_max_order() -> usize {
    2
}

fn default_nodes() -> usize {
    40
}

fn default_min_order() -> f64 {
    1.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    /// Detection time; the ensemble starts at `time.t0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub delta: f64,
    /// Windows for the delta-scaling fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_rate: Option<f64>,
    #[serde(default = "default_rate_tolerance")]
    pub rate_tolerance: f64,
    /// Expected outcome of the Brownian-consistency test on the delta ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_brownian: Option<bool>,
    #[serde(default)]
    pub options: DetectOptions,
}

fn default_rate_tolerance() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingCheck {
    Noise,
    Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub check: ScalingCheck,
    /// Increment lengths (noise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    /// Start of the increments (noise) or base time of the series.
    #[serde(default)]
    pub t: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Expected `Var(W_1)` per delta (noise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_variance: Option<Vec<f64>>,
    /// Allowed deviation in Monte Carlo standard errors.
    #[serde(default = "default_std_errs")]
    pub std_errs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_slope: Option<f64>,
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
    /// Base point (series).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Step (series).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_series_tolerance")]
    pub tolerance: f64,
}

fn default_samples() -> usize {
    1_000_000
}

fn default_std_errs() -> f64 {
    3.0
}

fn default_slope_tolerance() -> f64 {
    0.1
}

fn default_truncation() -> usize {
    10
}

fn default_series_tolerance() -> f64 {
    1e-10
}

/// Reads, checks catalog names and resolves defaults.
pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse(text: &str) -> Result<Config> {
    let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
    check_names(&value)?;
    let config: Config = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("key `{path}`: {}", e.into_inner())
    })?;
    config.resolved()
}

fn check_names(value: &Value) -> Result<()> {
    let checks: [(&str, &str, &[&str]); 5] = [
        ("experiment", "", &Experiment::CATALOG),
        ("field", "name", &FieldSpec::CATALOG),
        ("initial", "kind", &InitialDistribution::CATALOG),
        ("noise", "kind", &NoiseKind::CATALOG),
        ("moments", "check", &["concentration", "dual", "expansion", "remainder"]),
    ];
    for (section, key, catalog) in checks {
        let Some(v) = value.get(section) else { continue };
        let (v, label) = if key.is_empty() {
            (Some(v), section.to_string())
        } else {
            (v.get(key), format!("{section}.{key}"))
        };
        match v {
            None => bail!("key `{label}` is missing"),
            Some(Value::String(name)) if catalog.contains(&name.as_str()) => {}
            Some(other) => bail!("key `{label}`: unknown name {other}; expected one of {}", catalog.join(", ")),
        }
    }
    Ok(())
}

fn need<'a, T>(value: &'a Option<T>, key: &str, experiment: Experiment) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| anyhow!("key `{key}` is required for experiment {experiment:?}"))
}

impl Config {
    /// Fills experiment defaults and cross-checks required keys.
    pub fn resolved(mut self) -> Result<Config> {
        use Experiment::*;
        let e = self.experiment;
        if matches!(e, Simulate | Solve | Residual | Recover | Reynolds | Detect) {
            need(&self.field, "field", e)?;
            need(&self.initial, "initial", e)?;
        }
        if matches!(e, Solve | Residual | Recover | Reynolds) {
            need(&self.grid, "grid", e)?;
        }
        if matches!(e, Simulate | Solve | Residual | Recover | Reynolds) && self.time.outputs.is_none() {
            need(&self.time.t_end, "time.t_end", e)?;
        }
        if matches!(e, Simulate | Reynolds | Detect) && self.particles.is_none() {
            self.particles = Some(100_000);
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) {
                bail!("key `sigma` must be non-negative");
            }
        }
        if self.noise.is_none() && (self.sigma.is_some_and(|s| s > 0.0) || e == Detect) {
            let dim = self.field.as_ref().map_or(Ok(1), |f| f.build().map(|f| f.dim()))?;
            self.noise = Some(NoiseSpec::new(NoiseKind::Brownian, dim, self.seed)?);
        }
        match e {
            Reynolds => {
                self.reynolds.get_or_insert_with(Default::default);
            }
            Residual => {
                self.residual.get_or_insert_with(Default::default);
            }
            Recover => {
                self.recover.get_or_insert_with(Default::default);
            }
            Moments => {
                let m = self.moments.as_mut().ok_or_else(|| anyhow!("key `moments` is required for experiment Moments"))?;
                m.options.seed = self.seed;
                if m.check != MomentsCheck::Concentration {
                    need(&self.field, "field", e)?;
                }
            }
            Detect => {
                let d = self.detect.as_mut().ok_or_else(|| anyhow!("key `detect` is required for experiment Detect"))?;
                d.t.get_or_insert(self.time.t0);
            }
            Scaling => {
                let s = need(&self.scaling, "scaling", e)?;
                if s.check == ScalingCheck::Series {
                    need(&self.field, "field", e)?;
                } else {
                    need(&self.noise, "noise", e)?;
                }
            }
            Simulate | Solve => {}
        }
        Ok(self)
    }

    pub fn output_times(&self) -> Result<Vec<f64>> {
        if let Some(o) = &self.time.outputs {
            return Ok(o.clone());
        }
        let t_end = self.time.t_end.ok_or_else(|| anyhow!("key `time.t_end` is required"))?;
        Ok(flowlab::transport::uniform_times(self.time.t0, t_end, self.time.intervals)[1..].to_vec())
    }
}

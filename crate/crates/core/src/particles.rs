//! Particle ensembles moved by `dx/dt = v(t, x)` or by the stochastic
//! update `dξ = v* dt + σ* dW`.
//!
//! Integration is particle-major: every particle is advanced through the
//! whole schedule independently, in fixed blocks, so the result never depends
//! on the thread count. Steps are fixed; the last step before each output
//! time is shortened to land on it exactly. Stochastic increments use the
//! left endpoint, `σ*(tₙ, ξₙ)(W(tₙ₊₁) - W(tₙ))`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::VelocityField;
use crate::noise::{rng_stream, NoisePath, NoiseSpec, NoiseStream};
use crate::par;
use crate::stats::psd_factor;

/// `N` particle positions in `R^p` at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    time: f64,
    dim: usize,
    positions: Vec<f64>,
}

impl Ensemble {
    /// `positions` is row-major: particle `i` occupies `[i*dim, (i+1)*dim)`.
    pub fn new(time: f64, dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("ensemble dimension must be positive"));
        }
        if positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::contract("ensemble needs at least one complete particle"));
        }
        if let Some(k) = positions.iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                particle: k / dim,
                time,
            });
        }
        Ok(Ensemble {
            time,
            dim,
            positions,
        })
    }

    pub fn from_points(time: f64, points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::contract("all points must share one dimension"));
        }
        Ensemble::new(time, dim, points.concat())
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks_exact(self.dim)
    }

    /// Values of coordinate `axis` for every particle.
    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.iter().map(|p| p[axis]).collect()
    }

    /// Every position multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Ensemble {
        Ensemble {
            time: self.time,
            dim: self.dim,
            positions: self.positions.iter().map(|x| c * x).collect(),
        }
    }

    /// Writes `t,particle_id,x_1,...,x_p`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_snapshots(path, std::slice::from_ref(self))
    }
}

fn write_snapshots(path: impl AsRef<Path>, snapshots: &[Ensemble]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = snapshots.first().map_or(1, |e| e.dim);
    let mut header = vec!["t".to_string(), "particle_id".to_string()];
    header.extend((1..=dim).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for e in snapshots {
        for (i, p) in e.iter().enumerate() {
            let mut row = vec![e.time.to_string(), i.to_string()];
            row.extend(p.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// The noise coefficient `σ*(t, x)`.
#[derive(Clone)]
pub enum Diffusion {
    /// `σ* = s I`.
    Scalar(f64),
    /// Constant `p x p` matrix.
    Matrix(DMatrix<f64>),
    /// Writes the row-major `p x p` matrix `σ*(t, x)`.
    Custom(DiffusionFn),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Scalar(s) => write!(f, "Scalar({s})"),
            Diffusion::Matrix(m) => write!(f, "Matrix({m:?})"),
            Diffusion::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Diffusion {
    fn is_zero(&self) -> bool {
        match self {
            Diffusion::Scalar(s) => *s == 0.0,
            Diffusion::Matrix(m) => m.iter().all(|v| *v == 0.0),
            Diffusion::Custom(_) => false,
        }
    }
}

/// Where the driving increments come from.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    /// Independent replicate `i` of the spec for particle `i`.
    Spec(NoiseSpec),
    /// Pre-sampled paths; particle `i` follows path `i`, linearly interpolated.
    Recorded(Arc<Vec<NoisePath>>),
}

impl NoiseSource {
    fn dim(&self) -> usize {
        match self {
            NoiseSource::Spec(s) => s.dim,
            NoiseSource::Recorded(paths) => paths.first().map_or(0, NoisePath::dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdeSpec {
    pub drift: VelocityField,
    pub diffusion: Diffusion,
    pub noise: NoiseSource,
}

/// Snapshots of one ensemble at increasing output times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub snapshots: Vec<Ensemble>,
    /// Integration step used to produce the snapshots.
    pub step: f64,
}

impl Trajectories {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|e| e.time).collect()
    }

    /// Snapshot whose time is within `1e-9` of `t`.
    pub fn at(&self, t: f64) -> Option<&Ensemble> {
        let tol = 1e-9 * (1.0 + t.abs());
        self.snapshots.iter().find(|e| (e.time - t).abs() <= tol)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_snapshots(path, &self.snapshots)
    }
}

/// Time stamps and step lengths from `start` through every output time.
#[derive(Debug, Clone)]
struct Schedule {
    /// `(t, h)` per step.
    steps: Vec<(f64, f64)>,
    /// Number of steps completed when each output is reached.
    marks: Vec<usize>,
}

fn schedule(start: f64, outputs: &[f64], dt: f64) -> Result<Schedule> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::contract("time step must be positive and finite"));
    }
    if outputs.is_empty() {
        return Err(Error::contract("at least one output time is required"));
    }
    let mut steps = Vec::new();
    let mut marks = Vec::with_capacity(outputs.len());
    let mut a = start;
    for &b in outputs {
        if !(b >= a) || !b.is_finite() {
            return Err(Error::contract(
                "output times must be finite, nondecreasing and not before the ensemble time",
            ));
        }
        let span = b - a;
        let n = if span == 0.0 {
            0
        } else {
            ((span / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
        };
        for k in 0..n {
            let t = a + k as f64 * dt;
            let h = if k + 1 == n { b - t } else { dt };
            steps.push((t, h));
        }
        marks.push(steps.len());
        a = b;
    }
    Ok(Schedule { steps, marks })
}

/// Per-particle state update over one step.
trait Stepper: Sync {
    fn dim(&self) -> usize;
    fn step(&self, particle: usize, t: f64, h: f64, x: &mut [f64], scratch: &mut Scratch);
    fn start(&self, particle: usize, t0: f64) -> Option<NoiseStream>;
}

#[derive(Default)]
struct Scratch {
    k: [Vec<f64>; 4],
    y: Vec<f64>,
    dw: Vec<f64>,
    sigma: Vec<f64>,
    stream: Option<NoiseStream>,
}

struct OdeStepper<'a> {
    field: &'a VelocityField,
    method: Method,
}

impl Stepper for OdeStepper<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn start(&self, _: usize, _: f64) -> Option<NoiseStream> {
        None
    }

    fn step(&self, _: usize, t: f64, h: f64, x: &mut [f64], s: &mut Scratch) {
        let f = self.field;
        match self.method {
            Method::Euler => {
                f.eval_into(t, x, &mut s.k[0]);
                for (xi, ki) in x.iter_mut().zip(&s.k[0]) {
                    *xi += h * ki;
                }
            }
            Method::Rk4 => {
                let p = x.len();
                f.eval_into(t, x, &mut s.k[0]);
                for i in 0..p {
                    s.y[i] = x[i] + 0.5 * h * s.k[0][i];
                }
                f.eval_into(t + 0.5 * h, &s.y, &mut s.k[1]);
                for i in 0..p {
                    s.y[i] = x[i] + 0.5 * h * s.k[1][i];
                }
                f.eval_into(t + 0.5 * h, &s.y, &mut s.k[2]);
                for i in 0..p {
                    s.y[i] = x[i] + h * s.k[2][i];
                }
                f.eval_into(t + h, &s.y, &mut s.k[3]);
                for i in 0..p {
                    x[i] += h / 6.0 * (s.k[0][i] + 2.0 * s.k[1][i] + 2.0 * s.k[2][i] + s.k[3][i]);
                }
            }
        }
    }
}

struct SdeStepper<'a> {
    spec: &'a SdeSpec,
    noisy: bool,
}

impl Stepper for SdeStepper<'_> {
    fn dim(&self) -> usize {
        self.spec.drift.dim()
    }

    fn start(&self, particle: usize, t0: f64) -> Option<NoiseStream> {
        match &self.spec.noise {
            NoiseSource::Spec(n) if self.noisy => Some(NoiseStream::new(n, particle as u64, t0)),
            _ => None,
        }
    }

    fn step(&self, particle: usize, t: f64, h: f64, x: &mut [f64], s: &mut Scratch) {
        let p = x.len();
        self.spec.drift.eval_into(t, x, &mut s.k[0]);
        if self.noisy {
            match (&self.spec.noise, s.stream.as_mut()) {
                (NoiseSource::Spec(_), Some(stream)) => stream.advance(h, &mut s.dw),
                (NoiseSource::Recorded(paths), _) => {
                    let path = &paths[particle];
                    // Range was validated before integration.
                    path.value_at(t + h, &mut s.y).expect("validated path range");
                    path.value_at(t, &mut s.dw).expect("validated path range");
                    for i in 0..p {
                        s.dw[i] = s.y[i] - s.dw[i];
                    }
                }
                _ => unreachable!("noise stream initialised for noisy runs"),
            }
            if let Diffusion::Custom(f) = &self.spec.diffusion {
                f(t, x, &mut s.sigma);
            }
        }
        for (xi, ki) in x.iter_mut().zip(&s.k[0]) {
            *xi += h * ki;
        }
        if !self.noisy {
            return;
        }
        match &self.spec.diffusion {
            Diffusion::Scalar(sig) => {
                for (xi, d) in x.iter_mut().zip(&s.dw) {
                    *xi += sig * d;
                }
            }
            Diffusion::Matrix(m) => {
                for i in 0..p {
                    x[i] += (0..p).map(|j| m[(i, j)] * s.dw[j]).sum::<f64>();
                }
            }
            Diffusion::Custom(_) => {
                for i in 0..p {
                    x[i] += (0..p).map(|j| s.sigma[i * p + j] * s.dw[j]).sum::<f64>();
                }
            }
        }
    }
}

fn run<S: Stepper>(stepper: &S, e: &Ensemble, outputs: &[f64], dt: f64) -> Result<Trajectories> {
    check_dim(stepper.dim(), e.dim)?;
    let sched = schedule(e.time, outputs, dt)?;
    let p = e.dim;
    let n = e.len();
    let outputs_n = outputs.len();
    let blocks = par::map_blocks(n, |range| -> std::result::Result<Vec<Vec<f64>>, (usize, f64)> {
        let mut out = vec![Vec::with_capacity(range.len() * p); outputs_n];
        let mut s = Scratch {
            k: std::array::from_fn(|_| vec![0.0; p]),
            y: vec![0.0; p],
            dw: vec![0.0; p],
            sigma: vec![0.0; p * p],
            stream: None,
        };
        let mut x = vec![0.0; p];
        for i in range {
            x.copy_from_slice(e.particle(i));
            s.stream = stepper.start(i, e.time);
            let mut done = 0;
            for (k, &mark) in sched.marks.iter().enumerate() {
                while done < mark {
                    let (t, h) = sched.steps[done];
                    stepper.step(i, t, h, &mut x, &mut s);
                    done += 1;
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err((i, t + h));
                    }
                }
                out[k].extend_from_slice(&x);
            }
        }
        Ok(out)
    });
    let mut snaps: Vec<Vec<f64>> = (0..outputs_n).map(|_| Vec::with_capacity(n * p)).collect();
    for block in blocks {
        let block = block.map_err(|(particle, time)| Error::Divergence { particle, time })?;
        for (snap, part) in snaps.iter_mut().zip(block) {
            snap.extend_from_slice(&part);
        }
    }
    let snapshots = snaps
        .into_iter()
        .zip(outputs)
        .map(|(positions, &time)| Ensemble {
            time,
            dim: p,
            positions,
        })
        .collect();
    Ok(Trajectories { snapshots, step: dt })
}

/// Advances every particle to `t_end` with fixed step `dt`.
pub fn integrate_ode(field: &VelocityField, e: &Ensemble, t_end: f64, dt: f64, method: Method) -> Result<Ensemble> {
    let mut tr = integrate_ode_snapshots(field, e, &[t_end], dt, method)?;
    Ok(tr.snapshots.pop().expect("one output"))
}

pub fn integrate_ode_snapshots(
    field: &VelocityField,
    e: &Ensemble,
    outputs: &[f64],
    dt: f64,
    method: Method,
) -> Result<Trajectories> {
    run(&OdeStepper { field, method }, e, outputs, dt)
}

/// Euler–Maruyama with one independent noise replicate per particle.
pub fn integrate_sde(spec: &SdeSpec, e: &Ensemble, t_end: f64, dt: f64) -> Result<Ensemble> {
    let mut tr = integrate_sde_snapshots(spec, e, &[t_end], dt)?;
    Ok(tr.snapshots.pop().expect("one output"))
}

pub fn integrate_sde_snapshots(spec: &SdeSpec, e: &Ensemble, outputs: &[f64], dt: f64) -> Result<Trajectories> {
    check_dim(spec.drift.dim(), spec.noise.dim())?;
    if let Diffusion::Matrix(m) = &spec.diffusion {
        check_dim(e.dim, m.nrows())?;
        check_dim(e.dim, m.ncols())?;
    }
    match &spec.noise {
        NoiseSource::Spec(s) => s.validate()?,
        NoiseSource::Recorded(paths) => {
            if paths.len() < e.len() {
                return Err(Error::contract(format!(
                    "{} recorded paths for {} particles",
                    paths.len(),
                    e.len()
                )));
            }
            let end = outputs.last().copied().unwrap_or(e.time);
            for path in paths.iter() {
                let mut probe = vec![0.0; path.dim()];
                path.value_at(e.time, &mut probe)?;
                path.value_at(end, &mut probe)?;
            }
        }
    }
    let noisy = !spec.diffusion.is_zero();
    run(&SdeStepper { spec, noisy }, e, outputs, dt)
}

/// Initial particle distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// Uniform on the box `[lower, upper]`.
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Uniform in the ball of `radius` around `center`.
    DeltaCloud { center: Vec<f64>, radius: f64 },
}

impl InitialDistribution {
    pub const CATALOG: [&'static str; 3] = ["delta_cloud", "gaussian", "uniform"];

    /// Isotropic Gaussian `N(mean, variance I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let p = mean.len();
        let cov = (0..p)
            .map(|i| (0..p).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        InitialDistribution::Gaussian { mean, cov }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Gaussian { mean, .. } => mean.len(),
            InitialDistribution::Uniform { lower, .. } => lower.len(),
            InitialDistribution::DeltaCloud { center, .. } => center.len(),
        }
    }

    pub fn cov_matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            InitialDistribution::Gaussian { cov, .. } => {
                let p = cov.len();
                if cov.iter().any(|r| r.len() != p) {
                    return None;
                }
                Some(DMatrix::from_row_slice(p, p, &cov.concat()))
            }
            _ => None,
        }
    }
}

/// Draws `n` i.i.d. particles at `time`.
pub fn sample_initial(dist: &InitialDistribution, n: usize, dim: usize, time: f64, seed: u64) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::contract("ensemble needs at least one particle"));
    }
    check_dim(dim, dist.dim())?;
    if dim == 0 {
        return Err(Error::contract("dimension must be positive"));
    }
    enum Sampler {
        Gaussian(Vec<f64>, DMatrix<f64>),
        Uniform(Vec<f64>, Vec<f64>),
        Ball(Vec<f64>, f64),
    }
    let sampler = match dist {
        InitialDistribution::Gaussian { mean, .. } => {
            let cov = dist
                .cov_matrix()
                .ok_or_else(|| Error::contract("covariance must be a square matrix"))?;
            check_dim(dim, cov.nrows())?;
            Sampler::Gaussian(mean.clone(), psd_factor(&cov)?)
        }
        InitialDistribution::Uniform { lower, upper } => {
            check_dim(dim, upper.len())?;
            if lower.iter().zip(upper).any(|(a, b)| !(b >= a)) {
                return Err(Error::contract("uniform box needs lower <= upper"));
            }
            Sampler::Uniform(lower.clone(), upper.clone())
        }
        InitialDistribution::DeltaCloud { center, radius } => {
            if !(*radius >= 0.0) {
                return Err(Error::contract("delta cloud radius must be nonnegative"));
            }
            Sampler::Ball(center.clone(), *radius)
        }
    };
    let blocks = par::map_blocks(n, |range| {
        let mut rng = rng_stream(seed, (range.start / par::BLOCK) as u64);
        let mut out = Vec::with_capacity(range.len() * dim);
        let mut z = vec![0.0; dim];
        for _ in range {
            match &sampler {
                Sampler::Gaussian(mean, f) => {
                    for zi in z.iter_mut() {
                        *zi = rng.sample(StandardNormal);
                    }
                    for i in 0..dim {
                        out.push(mean[i] + (0..dim).map(|j| f[(i, j)] * z[j]).sum::<f64>());
                    }
                }
                Sampler::Uniform(lo, hi) => {
                    for i in 0..dim {
                        out.push(lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
                    }
                }
                Sampler::Ball(c, r) => {
                    if *r == 0.0 {
                        out.extend_from_slice(c);
                        continue;
                    }
                    for zi in z.iter_mut() {
                        *zi = rng.sample(StandardNormal);
                    }
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let radius = r * rng.random::<f64>().powf(1.0 / dim as f64);
                    for i in 0..dim {
                        out.push(c[i] + radius * z[i] / norm);
                    }
                }
            }
        }
        out
    });
    Ensemble::new(time, dim, blocks.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;
    use approx::assert_relative_eq;

    fn one(x: f64) -> Ensemble {
        Ensemble::new(0.0, 1, vec![x]).unwrap()
    }

    #[test]
    fn constant_velocity_is_exact() {
        let f = VelocityField::constant(vec![1.0]);
        for m in [Method::Euler, Method::Rk4] {
            let out = integrate_ode(&f, &one(0.0), 1.0, 0.1, m).unwrap();
            assert_relative_eq!(out.positions()[0], 1.0, epsilon = 1e-15);
            assert_eq!(out.time(), 1.0);
        }
    }

    #[test]
    fn rk4_matches_closed_forms() {
        let out = integrate_ode(&VelocityField::damped(1, 1.0), &one(1.0), 1.0, 1e-3, Method::Rk4).unwrap();
        assert!((out.positions()[0] - (-1f64).exp()).abs() < 1e-9);
        let e = Ensemble::new(0.0, 2, vec![1.0, 0.0]).unwrap();
        let r = integrate_ode(&VelocityField::rotation2d(1.0), &e, std::f64::consts::FRAC_PI_2, 1e-3, Method::Rk4)
            .unwrap();
        assert!(r.positions()[0].abs() < 1e-8);
        assert!((r.positions()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn last_step_lands_on_output() {
        let s = schedule(0.0, &[0.25, 1.0], 0.1).unwrap();
        assert_eq!(s.marks, vec![3, 11]);
        let (t, h) = s.steps[2];
        assert_relative_eq!(t + h, 0.25, epsilon = 1e-15);
        let (t, h) = *s.steps.last().unwrap();
        assert_eq!(t + h, 1.0);
    }

    #[test]
    fn blow_up_names_particle_and_time() {
        let f = VelocityField::polynomial(vec![0.0, 0.0, 1.0]).unwrap();
        let e = Ensemble::new(0.0, 1, vec![0.1, 10.0, 0.2]).unwrap();
        match integrate_ode(&f, &e, 2.0, 0.05, Method::Euler) {
            Err(Error::Divergence { particle, time }) => {
                assert_eq!(particle, 1);
                assert!(time > 0.0 && time < 2.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_diffusion_reproduces_euler_bitwise() {
        let field = VelocityField::damped(1, 1.0);
        let e = sample_initial(&InitialDistribution::isotropic(vec![1.0], 0.1), 100, 1, 0.0, 3).unwrap();
        let sde = SdeSpec {
            drift: field.clone(),
            diffusion: Diffusion::Scalar(0.0),
            noise: NoiseSource::Spec(NoiseSpec::new(NoiseKind::Brownian, 1, 9).unwrap()),
        };
        let a = integrate_sde(&sde, &e, 0.7, 0.01).unwrap();
        let b = integrate_ode(&field, &e, 0.7, 0.01, Method::Euler).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_noise_drives_particles() {
        let path = NoisePath::new(vec![0.0, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let sde = SdeSpec {
            drift: VelocityField::constant(vec![0.0]),
            diffusion: Diffusion::Scalar(2.0),
            noise: NoiseSource::Recorded(Arc::new(vec![path])),
        };
        let out = integrate_sde(&sde, &one(0.0), 1.0, 0.1).unwrap();
        assert_relative_eq!(out.positions()[0], 2.0, epsilon = 1e-12);
        assert!(integrate_sde(&sde, &one(0.0), 2.0, 0.1).is_err());
    }

    #[test]
    fn delta_cloud_of_zero_radius_is_a_point() {
        let d = InitialDistribution::DeltaCloud { center: vec![1.0, -2.0], radius: 0.0 };
        let e = sample_initial(&d, 50, 2, 0.0, 1).unwrap();
        assert!(e.iter().all(|p| p == [1.0, -2.0]));
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let d = InitialDistribution::Gaussian { mean: vec![0.0, 0.0], cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]] };
        assert!(matches!(sample_initial(&d, 10, 2, 0.0, 1), Err(Error::Contract(_))));
        assert!(sample_initial(&d, 10, 3, 0.0, 1).is_err());
    }

    #[test]
    fn snapshot_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("e.csv");
        Ensemble::new(0.5, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().write_csv(&file).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        assert_eq!(text, "t,particle_id,x_1,x_2\n0.5,0,1,2\n0.5,1,3,4\n");
    }
}

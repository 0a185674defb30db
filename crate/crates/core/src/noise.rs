//! Driving processes `W(t)` for stochastic particle motion.
//!
//! Three kinds are built in: Brownian motion `B`, the polynomial family
//! `W = ‖B‖^k B` with even `k`, and the zero process. Arbitrary processes
//! enter as pre-sampled [`NoisePath`] files.
//!
//! Randomness is ChaCha8 seeded with `seed` and positioned on stream
//! `replicate`, so replicate `r` of a run is reproducible from
//! `(ChaCha8, seed, r)` alone and streams never overlap.
//!
//! `B` is anchored at absolute time zero. A path started at `t0 > 0` first
//! draws `B(t0) ~ N(0, t0 I)`, and reports `W(t) - W(t0)` so every path
//! starts at the origin.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    Brownian,
    /// `W = ‖B‖^power B`; `power` must be even.
    PolyBrownian { power: u32 },
    Zero,
}

impl NoiseKind {
    pub const CATALOG: [&'static str; 3] = ["brownian", "poly_brownian", "zero"];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Brownian => "brownian",
            NoiseKind::PolyBrownian { .. } => "poly_brownian",
            NoiseKind::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoiseSpec")]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Brownian,
    PolyBrownian,
    Zero,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoiseSpec {
    kind: RawKind,
    power: Option<u32>,
    dim: usize,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawNoiseSpec> for NoiseSpec {
    type Error = String;

    fn try_from(raw: RawNoiseSpec) -> std::result::Result<Self, String> {
        let kind = match (raw.kind, raw.power) {
            (RawKind::Brownian, None) => NoiseKind::Brownian,
            (RawKind::Zero, None) => NoiseKind::Zero,
            (RawKind::PolyBrownian, Some(power)) => NoiseKind::PolyBrownian { power },
            (RawKind::PolyBrownian, None) => return Err("poly_brownian needs `power`".into()),
            (_, Some(_)) => return Err("`power` only applies to poly_brownian".into()),
        };
        NoiseSpec::new(kind, raw.dim, raw.seed).map_err(|e| e.to_string())
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, dim: usize, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { kind, dim, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::contract("noise dimension must be positive"));
        }
        if let NoiseKind::PolyBrownian { power } = self.kind {
            if power % 2 != 0 {
                return Err(Error::contract(format!(
                    "poly_brownian power must be even, got {power}"
                )));
            }
        }
        Ok(())
    }
}

/// ChaCha8 generator for replicate `replicate` of `seed`.
pub fn rng_stream(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Sequential sampler of one replicate of `W`, yielding increments.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    kind: NoiseKind,
    rng: ChaCha8Rng,
    b: Vec<f64>,
    w: Vec<f64>,
}

impl NoiseStream {
    /// Starts replicate `replicate` at time `t0 >= 0`.
    pub fn new(spec: &NoiseSpec, replicate: u64, t0: f64) -> Self {
        let mut rng = rng_stream(spec.seed, replicate);
        let mut b = vec![0.0; spec.dim];
        if t0 > 0.0 && spec.kind != NoiseKind::Zero {
            let s = t0.sqrt();
            for bi in b.iter_mut() {
                *bi = s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let w = transform(spec.kind, &b);
        NoiseStream {
            kind: spec.kind,
            rng,
            b,
            w,
        }
    }

    /// Advances by `dt` and writes `W(t + dt) - W(t)` into `dw`.
    pub fn advance(&mut self, dt: f64, dw: &mut [f64]) {
        match self.kind {
            NoiseKind::Zero => dw.iter_mut().for_each(|d| *d = 0.0),
            NoiseKind::Brownian => {
                let s = dt.sqrt();
                for (bi, d) in self.b.iter_mut().zip(dw.iter_mut()) {
                    *d = s * self.rng.sample::<f64, _>(StandardNormal);
                    *bi += *d;
                }
            }
            NoiseKind::PolyBrownian { .. } => {
                let s = dt.sqrt();
                for bi in self.b.iter_mut() {
                    *bi += s * self.rng.sample::<f64, _>(StandardNormal);
                }
                let w = transform(self.kind, &self.b);
                for ((d, new), old) in dw.iter_mut().zip(&w).zip(&self.w) {
                    *d = new - old;
                }
                self.w = w;
            }
        }
    }
}

fn transform(kind: NoiseKind, b: &[f64]) -> Vec<f64> {
    match kind {
        NoiseKind::PolyBrownian { power } if power > 0 => {
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = norm.powi(power as i32);
            b.iter().map(|v| f * v).collect()
        }
        NoiseKind::Zero => vec![0.0; b.len()],
        _ => b.to_vec(),
    }
}

/// A sampled trajectory `W(t)` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl NoisePath {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_increasing(&times)?;
        check_dim(times.len(), values.len())?;
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(Error::contract("path values must share a positive dimension"));
        }
        if values[0].iter().any(|v| *v != 0.0) {
            return Err(Error::contract("noise paths must start at the origin"));
        }
        Ok(NoisePath { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Linear interpolation of `W` at `t` inside the grid.
    pub fn value_at(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        let tol = 1e-12 * (1.0 + t1.abs());
        if t < t0 - tol || t > t1 + tol {
            return Err(Error::contract(format!(
                "time {t} is outside the recorded path [{t0}, {t1}]"
            )));
        }
        let k = self.times.partition_point(|s| *s <= t);
        if k == 0 {
            out.copy_from_slice(&self.values[0]);
        } else if k >= self.times.len() {
            out.copy_from_slice(self.values.last().unwrap());
        } else {
            let (a, b) = (self.times[k - 1], self.times[k]);
            let lambda = (t - a) / (b - a);
            for (i, o) in out.iter_mut().enumerate() {
                *o = (1.0 - lambda) * self.values[k - 1][i] + lambda * self.values[k][i];
            }
        }
        Ok(())
    }

    /// Writes the path as CSV with header `t,w_1,...,w_p`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("w_{i}")));
        w.write_record(&header)?;
        for (t, v) in self.times.iter().zip(&self.values) {
            let mut row = vec![t.to_string()];
            row.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(Error::contract("path file header must be t,w_1,...,w_p"));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::contract(format!("bad number {s:?} in path file: {e}")))
            };
            times.push(parse(&rec[0])?);
            values.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?);
        }
        NoisePath::new(times, values)
    }
}

fn check_increasing(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::contract("time grid is empty"));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("time grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// Samples replicate 0 of `spec` on `times`.
pub fn sample_path(spec: &NoiseSpec, times: &[f64]) -> Result<NoisePath> {
    sample_path_replicate(spec, times, 0)
}

pub fn sample_path_replicate(spec: &NoiseSpec, times: &[f64], replicate: u64) -> Result<NoisePath> {
    spec.validate()?;
    check_increasing(times)?;
    if times[0] < 0.0 {
        return Err(Error::contract("noise time grid must start at t >= 0"));
    }
    let mut stream = NoiseStream::new(spec, replicate, times[0]);
    let mut values = Vec::with_capacity(times.len());
    let mut current = vec![0.0; spec.dim];
    let mut dw = vec![0.0; spec.dim];
    values.push(current.clone());
    for w in times.windows(2) {
        stream.advance(w[1] - w[0], &mut dw);
        for (c, d) in current.iter_mut().zip(&dw) {
            *c += d;
        }
        values.push(current.clone());
    }
    Ok(NoisePath {
        times: times.to_vec(),
        values,
    })
}

/// Monte Carlo estimate of the law of `W(t + delta) - W(t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementVariance {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub mean_std_err: Vec<f64>,
    #[serde(serialize_with = "crate::stats::serialize_rows")]
    pub cov: DMatrix<f64>,
    /// Standard error of each covariance entry.
    #[serde(serialize_with = "crate::stats::serialize_rows")]
    pub cov_std_err: DMatrix<f64>,
}

/// Estimates `Var(W(t + delta) - W(t))` from `n_mc` replicates of `spec`.
pub fn increment_variance(spec: &NoiseSpec, t: f64, delta: f64, n_mc: usize) -> Result<IncrementVariance> {
    spec.validate()?;
    if !(delta > 0.0) || !(t >= 0.0) {
        return Err(Error::contract("increment needs t >= 0 and delta > 0"));
    }
    if n_mc < 1000 {
        return Err(Error::contract("increment variance needs at least 1000 samples"));
    }
    let p = spec.dim;
    let width = p + 2 * p * p;
    let partials = par::map_blocks(n_mc, |range| {
        let mut acc = vec![0.0; width];
        let mut dw = vec![0.0; p];
        for r in range {
            let mut s = NoiseStream::new(spec, r as u64, t);
            s.advance(delta, &mut dw);
            for i in 0..p {
                acc[i] += dw[i];
                for j in 0..p {
                    let q = dw[i] * dw[j];
                    acc[p + i * p + j] += q;
                    acc[p + p * p + i * p + j] += q * q;
                }
            }
        }
        acc
    });
    let mut total = vec![0.0; width];
    for part in partials {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    let n = n_mc as f64;
    let mean: Vec<f64> = total[..p].iter().map(|s| s / n).collect();
    let mut cov = DMatrix::zeros(p, p);
    let mut cov_se = DMatrix::zeros(p, p);
    let mut mean_se = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            let m2 = total[p + i * p + j] / n;
            let m4 = total[p + p * p + i * p + j] / n;
            cov[(i, j)] = (m2 - mean[i] * mean[j]) * n / (n - 1.0);
            cov_se[(i, j)] = ((m4 - m2 * m2).max(0.0) / n).sqrt();
        }
        mean_se[i] = (cov[(i, i)] / n).sqrt();
    }
    Ok(IncrementVariance {
        samples: n_mc,
        mean,
        mean_std_err: mean_se,
        cov,
        cov_std_err: cov_se,
    })
}

//! fBm and Brownian drivers on dyadic grids, their piecewise-linear dyadic
//! approximations, and discrete Hölder norms.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{hash_hex, least_squares_slope, order_median};

/// Environment variable naming the directory of the binary sample cache.
pub const CACHE_ENV: &str = "FRACCTL_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmConfig {
    pub hurst: f64,
    pub dimension: usize,
    pub horizon: f64,
    pub levels: u32,
    pub seed: u64,
}

impl FbmConfig {
    pub fn validate(&self) -> Result<()> {
        validate_hurst(self.hurst)?;
        if self.dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.levels == 0 || self.levels > 24 {
            return Err(Error::Config("levels must lie in 1..=24".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.horizon / (1u64 << self.levels) as f64
    }

    pub fn hash(&self) -> String {
        hash_hex(
            format!(
                "fbm;hurst={:?};dim={};horizon={:?};levels={};seed={}",
                self.hurst, self.dimension, self.horizon, self.levels, self.seed
            )
            .as_bytes(),
        )
    }
}

pub fn validate_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 1.0 / 3.0 && hurst < 1.0) {
        return Err(Error::Config(format!("hurst {hurst} must lie in (1/3, 1)")));
    }
    if (hurst - 0.5).abs() < 1e-12 {
        return Err(Error::Config("hurst = 1/2 is excluded".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Raw,
    PiecewiseLinear { level: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub dim: usize,
    pub levels: u32,
    pub kind: PathKind,
    values: Vec<f64>,
}

impl SampledPath {
    /// Build a path on the uniform dyadic grid of `2^levels + 1` points.
    /// `values` is time-major: `values[i * dim + c]`.
    pub fn new(horizon: f64, levels: u32, dim: usize, values: Vec<f64>, kind: PathKind) -> Result<Self> {
        let n = (1usize << levels) + 1;
        if values.len() != n * dim {
            return Err(Error::GridMismatch(format!(
                "expected {} values for {} points of dimension {}, got {}",
                n * dim,
                n,
                dim,
                values.len()
            )));
        }
        let h = horizon / (n - 1) as f64;
        let times = (0..n).map(|i| if i == n - 1 { horizon } else { i as f64 * h }).collect();
        Ok(Self { times, dim, levels, kind, values })
    }

    pub fn from_fn(horizon: f64, levels: u32, dim: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let n = (1usize << levels) + 1;
        let h = horizon / (n - 1) as f64;
        let mut values = vec![0.0; n * dim];
        for i in 0..n {
            f(i as f64 * h, &mut values[i * dim..(i + 1) * dim]);
        }
        Self::new(horizon, levels, dim, values, PathKind::Raw).expect("consistent shape")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.horizon() / (self.len() - 1) as f64
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.values[i * self.dim + c]).collect()
    }

    /// Grid index of `t`, if `t` is a grid point up to round-off.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.step();
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.len() {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Linear interpolation at an arbitrary time in `[0, T]`.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let (l, x) = self.locate(t);
        let a = self.at(l);
        if l + 1 == self.len() {
            out.copy_from_slice(a);
            return;
        }
        let b = self.at(l + 1);
        for c in 0..self.dim {
            out[c] = a[c] + x * (b[c] - a[c]);
        }
    }

    /// Segment index and local coordinate in `[0,1]` of time `t`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.step();
        let n = self.len() - 1;
        if t <= 0.0 {
            return (0, 0.0);
        }
        if t >= self.horizon() {
            return (n - 1, 1.0);
        }
        let l = ((t / h).floor() as usize).min(n - 1);
        (l, (t - self.times[l]) / h)
    }

    /// Velocity of the linear interpolant on segment `l`.
    pub fn velocity(&self, l: usize, out: &mut [f64]) {
        let h = self.times[l + 1] - self.times[l];
        let a = self.at(l);
        let b = self.at(l + 1);
        for c in 0..self.dim {
            out[c] = (b[c] - a[c]) / h;
        }
    }

    /// Restriction to the coarse grid of `2^level + 1` points.
    pub fn restrict(&self, level: u32) -> Result<SampledPath> {
        if level > self.levels {
            return Err(Error::Level { requested: level, available: self.levels });
        }
        let stride = 1usize << (self.levels - level);
        let mut values = Vec::with_capacity(((1usize << level) + 1) * self.dim);
        for i in (0..self.len()).step_by(stride) {
            values.extend_from_slice(self.at(i));
        }
        let kind = match self.kind {
            PathKind::PiecewiseLinear { level: k } if k <= level => PathKind::PiecewiseLinear { level: k },
            _ => PathKind::Raw,
        };
        SampledPath::new(self.horizon(), level, self.dim, values, kind)
    }

    pub fn sub(&self, other: &SampledPath) -> Result<SampledPath> {
        self.check_same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        SampledPath::new(self.horizon(), self.levels, self.dim, values, PathKind::Raw)
    }

    pub fn check_same_grid(&self, other: &SampledPath) -> Result<()> {
        if self.levels != other.levels || self.dim != other.dim || (self.horizon() - other.horizon()).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "levels {} vs {}, dim {} vs {}, horizon {} vs {}",
                self.levels,
                other.levels,
                self.dim,
                other.dim,
                self.horizon(),
                other.horizon()
            )));
        }
        Ok(())
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.at(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|c| format!("component_{c}")));
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![format!("{:.17e}", self.times[i])];
            rec.extend(self.at(i).iter().map(|v| format!("{v:.17e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read a path written by [`SampledPath::write_csv`]; the grid must be dyadic.
    pub fn read_csv<R: Read>(r: R) -> Result<SampledPath> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(1);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}")));
            times.push(parse(&rec[0])?);
            for c in 1..=dim {
                values.push(parse(&rec[c])?);
            }
        }
        let n = times.len();
        if n < 2 || !(n - 1).is_power_of_two() {
            return Err(Error::GridMismatch(format!("{n} points is not a dyadic grid")));
        }
        let levels = (n - 1).trailing_zeros();
        SampledPath::new(*times.last().unwrap(), levels, dim, values, PathKind::Raw)
    }
}

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fgn_autocov(hurst: f64, k: usize) -> f64 {
    let k = k as f64;
    let h2 = 2.0 * hurst;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

enum Method {
    Circulant { sqrt_eig: Vec<f64>, fft: Arc<dyn Fft<f64>> },
    Cholesky(DMatrix<f64>),
}

/// Reusable fractional Gaussian noise generator for one (H, N) pair.
pub struct FbmSampler {
    hurst: f64,
    n: usize,
    method: Method,
}

impl FbmSampler {
    pub fn new(hurst: f64, levels: u32) -> Result<Self> {
        validate_hurst(hurst)?;
        let n = 1usize << levels;
        let m = 2 * n;
        let mut row: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let k = if j <= n { j } else { m - j };
                Complex::new(fgn_autocov(hurst, k), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);
        let max = row.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        let negative = row.iter().any(|c| c.re < -1e-10 * max);
        let method = if negative {
            log::debug!("circulant embedding not nonnegative for H={hurst}, N={n}; using Cholesky");
            Self::cholesky(hurst, n)?
        } else {
            let sqrt_eig = row.iter().map(|c| (c.re.max(0.0) / m as f64).sqrt()).collect();
            Method::Circulant { sqrt_eig, fft }
        };
        Ok(Self { hurst, n, method })
    }

    /// Sampler that always uses the dense Cholesky factor.
    pub fn new_cholesky(hurst: f64, levels: u32) -> Result<Self> {
        validate_hurst(hurst)?;
        let n = 1usize << levels;
        Ok(Self { hurst, n, method: Self::cholesky(hurst, n)? })
    }

    fn cholesky(hurst: f64, n: usize) -> Result<Method> {
        let cov = DMatrix::from_fn(n, n, |i, j| fgn_autocov(hurst, i.abs_diff(j)));
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Config(format!("fGn covariance not positive definite (H={hurst}, N={n})")))?;
        Ok(Method::Cholesky(chol.l()))
    }

    pub fn uses_circulant(&self) -> bool {
        matches!(self.method, Method::Circulant { .. })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Unit-step fGn increments, length `2^levels`.
    pub fn unit_increments<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.method {
            Method::Circulant { sqrt_eig, fft } => {
                let mut buf: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|a| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex::new(a * re, a * im)
                    })
                    .collect();
                fft.process(&mut buf);
                buf[..self.n].iter().map(|c| c.re).collect()
            }
            Method::Cholesky(l) => {
                let z = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
                (l * z).iter().copied().collect()
            }
        }
    }

    /// One `dim`-dimensional fBm path with independent components.
    pub fn sample<R: Rng>(&self, horizon: f64, dim: usize, rng: &mut R) -> SampledPath {
        let levels = self.n.trailing_zeros();
        let scale = (horizon / self.n as f64).powf(self.hurst);
        let mut values = vec![0.0; (self.n + 1) * dim];
        for c in 0..dim {
            let inc = self.unit_increments(rng);
            let mut acc = 0.0;
            for (i, x) in inc.iter().enumerate() {
                acc += scale * x;
                values[(i + 1) * dim + c] = acc;
            }
        }
        SampledPath::new(horizon, levels, dim, values, PathKind::Raw).expect("consistent shape")
    }
}

/// One fBm sample for `config`, reproducible per `config.seed`.
pub fn sample_fbm(config: &FbmConfig) -> Result<SampledPath> {
    config.validate()?;
    let sampler = FbmSampler::new(config.hurst, config.levels)?;
    let mut rng = rng_for(config.seed, 0);
    Ok(sampler.sample(config.horizon, config.dimension, &mut rng))
}

/// Standard Brownian motion on the dyadic grid.
pub fn sample_bm<R: Rng>(horizon: f64, levels: u32, dim: usize, rng: &mut R) -> SampledPath {
    let n = 1usize << levels;
    let sd = (horizon / n as f64).sqrt();
    let mut values = vec![0.0; (n + 1) * dim];
    for i in 0..n {
        for c in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            values[(i + 1) * dim + c] = values[i * dim + c] + sd * z;
        }
    }
    SampledPath::new(horizon, levels, dim, values, PathKind::Raw).expect("consistent shape")
}

/// Piecewise-linear interpolation through the `2^k + 1` coarse points,
/// resampled on the fine grid of `path`.
pub fn dyadic_approx(path: &SampledPath, k: u32) -> Result<SampledPath> {
    if k > path.levels {
        return Err(Error::Level { requested: k, available: path.levels });
    }
    let stride = 1usize << (path.levels - k);
    let dim = path.dim;
    let mut values = vec![0.0; path.len() * dim];
    for i in 0..path.len() {
        let l = (i / stride).min((1usize << k) - 1);
        let r = i - l * stride;
        let x = r as f64 / stride as f64;
        let a = path.at(l * stride);
        let b = path.at((l + 1) * stride);
        for c in 0..dim {
            values[i * dim + c] = if r == 0 { a[c] } else { a[c] + x * (b[c] - a[c]) };
        }
    }
    let level = match path.kind {
        PathKind::PiecewiseLinear { level } if level <= k => level,
        _ => k,
    };
    SampledPath::new(path.horizon(), path.levels, dim, values, PathKind::PiecewiseLinear { level })
}

/// Discrete α-Hölder seminorm over all grid pairs.
pub fn holder_norm(path: &SampledPath, alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let n = path.len();
    let mut best = 0.0f64;
    for i in 0..n {
        let a = path.at(i);
        for j in i + 1..n {
            let b = path.at(j);
            let d: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
            let v = d / (path.times[j] - path.times[i]).powf(alpha);
            best = best.max(v);
        }
    }
    best
}

/// Log-log slope of the median increment size against the dyadic scale,
/// over grid levels `lo..=hi`. Estimates the pathwise Hölder exponent.
pub fn empirical_holder_exponent(path: &SampledPath, lo: u32, hi: u32) -> f64 {
    let hi = hi.min(path.levels);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in lo..=hi {
        let stride = 1usize << (path.levels - j);
        let incs: Vec<f64> = (0..(1usize << j))
            .map(|l| {
                let a = path.at(l * stride);
                let b = path.at((l + 1) * stride);
                a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
            })
            .collect();
        let med = order_median(&incs);
        if med > 0.0 {
            xs.push((path.horizon() / (1u64 << j) as f64).ln());
            ys.push(med.ln());
        }
    }
    if xs.len() < 2 {
        return f64::INFINITY;
    }
    least_squares_slope(&xs, &ys)
}

const CACHE_MAGIC: &[u8; 4] = b"FBMC";

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fracctl-cache"))
}

pub fn cache_file(dir: &Path, config: &FbmConfig) -> PathBuf {
    dir.join(format!("fbm-{}-{}.bin", config.seed, config.hash()))
}

pub fn write_cache(path: &Path, config: &FbmConfig, sample: &SampledPath) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::with_capacity(48 + sample.values.len() * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(config.dimension as u32).to_le_bytes());
    buf.extend_from_slice(&config.levels.to_le_bytes());
    buf.extend_from_slice(&config.horizon.to_le_bytes());
    buf.extend_from_slice(&config.hurst.to_le_bytes());
    buf.extend_from_slice(&config.seed.to_le_bytes());
    for v in &sample.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache(path: &Path, config: &FbmConfig) -> Result<Option<SampledPath>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 44 || &bytes[..4] != CACHE_MAGIC {
        return Ok(None);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != 1
        || u32_at(8) as usize != config.dimension
        || u32_at(12) != config.levels
        || f64_at(16) != config.horizon
        || f64_at(24) != config.hurst
        || u64_at(32) != config.seed
    {
        return Ok(None);
    }
    let n = ((1usize << config.levels) + 1) * config.dimension;
    if bytes.len() != 40 + 8 * n {
        return Ok(None);
    }
    let values = (0..n).map(|i| f64_at(40 + 8 * i)).collect();
    Ok(Some(SampledPath::new(config.horizon, config.levels, config.dimension, values, PathKind::Raw)?))
}

/// Sample through the binary cache in `dir`.
pub fn sample_fbm_cached(config: &FbmConfig, dir: &Path) -> Result<SampledPath> {
    let file = cache_file(dir, config);
    if let Some(p) = read_cache(&file, config)? {
        return Ok(p);
    }
    let p = sample_fbm(config)?;
    write_cache(&file, config, &p)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: f64, levels: u32, seed: u64) -> FbmConfig {
        FbmConfig { hurst: h, dimension: 2, horizon: 1.0, levels, seed }
    }

    #[test]
    fn starts_at_zero_and_is_deterministic() {
        let a = sample_fbm(&cfg(0.7, 8, 3)).unwrap();
        let b = sample_fbm(&cfg(0.7, 8, 3)).unwrap();
        assert!(a.at(0).iter().all(|&v| v == 0.0));
        assert_eq!(a.values(), b.values());
        let c = sample_fbm(&cfg(0.7, 8, 4)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn rejects_half_and_out_of_range() {
        assert!(sample_fbm(&cfg(0.5, 4, 0)).is_err());
        assert!(sample_fbm(&cfg(0.3, 4, 0)).is_err());
        assert!(sample_fbm(&cfg(1.0, 4, 0)).is_err());
    }

    #[test]
    fn covariance_matches_fbm_kernel() {
        let h = 0.7;
        let sampler = FbmSampler::new(h, 4).unwrap();
        assert!(sampler.uses_circulant());
        let mut rng = rng_for(11, 0);
        let n = 10_000;
        let prods: Vec<f64> = (0..n)
            .map(|_| {
                let p = sampler.sample(1.0, 1, &mut rng);
                p.at(4)[0] * p.at(12)[0]
            })
            .collect();
        let mean = prods.iter().sum::<f64>() / n as f64;
        let var = prods.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let (s, t) = (0.25f64, 0.75f64);
        let exact = 0.5 * (s.powf(2.0 * h) + t.powf(2.0 * h) - (t - s).powf(2.0 * h));
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn cholesky_fallback_has_same_law() {
        let h = 0.4;
        let chol = FbmSampler::new_cholesky(h, 3).unwrap();
        let mut rng = rng_for(5, 1);
        let n = 20_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let p = chol.sample(1.0, 1, &mut rng);
            acc += p.at(8)[0].powi(2);
        }
        let var = acc / n as f64;
        assert!((var - 1.0).abs() < 0.05, "Var(B_1) = {var}");
    }

    #[test]
    fn dyadic_approx_interpolates_division_points() {
        let p = sample_fbm(&cfg(0.4, 10, 1)).unwrap();
        for k in 0..=10 {
            let a = dyadic_approx(&p, k).unwrap();
            let stride = 1 << (10 - k);
            for i in (0..p.len()).step_by(stride) {
                assert_eq!(a.at(i), p.at(i));
            }
            let again = dyadic_approx(&a, k).unwrap();
            assert_eq!(again.values(), a.values());
        }
        assert!(dyadic_approx(&p, 11).is_err());
    }

    #[test]
    fn approximation_error_non_increasing() {
        let p = sample_fbm(&cfg(0.7, 12, 2)).unwrap();
        let errs: Vec<f64> = (4..12).map(|k| dyadic_approx(&p, k).unwrap().sub(&p).unwrap().sup_norm()).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{errs:?}");
        }
    }

    #[test]
    fn holder_norm_closed_forms() {
        let c = SampledPath::from_fn(1.0, 6, 1, |_, o| o[0] = 2.0);
        assert_eq!(holder_norm(&c, 0.5), 0.0);
        let lin = SampledPath::from_fn(1.0, 6, 1, |t, o| o[0] = t);
        assert!((holder_norm(&lin, 1.0) - 1.0).abs() < 1e-12);
        let sq = SampledPath::from_fn(1.0, 6, 1, |t, o| o[0] = t.sqrt());
        assert!((holder_norm(&sq, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn holder_norm_of_approximation_error_shrinks() {
        let p = sample_fbm(&cfg(0.7, 9, 8)).unwrap();
        let norms: Vec<f64> =
            [3u32, 6, 8].iter().map(|&k| holder_norm(&dyadic_approx(&p, k).unwrap().sub(&p).unwrap(), 0.5)).collect();
        assert!(norms[2] < norms[0], "{norms:?}");
    }

    #[test]
    fn csv_and_cache_round_trip() {
        let c = cfg(0.7, 5, 9);
        let p = sample_fbm(&c).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = SampledPath::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), p.values());
        let dir = tempfile::tempdir().unwrap();
        let a = sample_fbm_cached(&c, dir.path()).unwrap();
        let b = sample_fbm_cached(&c, dir.path()).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(cache_file(dir.path(), &c).exists());
    }

    #[test]
    fn holder_exponent_estimate_near_hurst() {
        let p = sample_fbm(&FbmConfig { hurst: 0.7, dimension: 1, horizon: 1.0, levels: 12, seed: 4 }).unwrap();
        let e = empirical_holder_exponent(&p, 4, 12);
        assert!((e - 0.7).abs() < 0.1, "{e}");
    }
}

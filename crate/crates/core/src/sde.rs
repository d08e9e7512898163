//! Monte-Carlo simulation of the controlled system, its transformed form,
//! the observation density and the cost functional.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Scope};
use crate::fbm::{rng_for, sample_bm, FbmSampler, SampledPath};
use crate::lie::MatrixFamily;
use crate::lift::{lift_piecewise_linear, Level2Lift};
use crate::system::{ExprFamily, SystemSpec};
use crate::transform::{lu_inverses, solve_gamma_cbhd, solve_gamma_ode_direct, MatrixPath};
use crate::util::{mean_se, median, quantile};

/// Uniform dyadic simulation grid with `2^level` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub horizon: f64,
    pub level: u32,
}

impl Grid {
    pub fn new(horizon: f64, level: u32) -> Self {
        Self { horizon, level }
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| self.time(k)).collect()
    }
}

/// Observation values on grid slots `0..=k`; later slots are not reachable.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub k: usize,
    pub t: f64,
    pub dim: usize,
    values: &'a [f64],
}

impl<'a> History<'a> {
    pub fn new(k: usize, t: f64, dim: usize, values: &'a [f64]) -> Self {
        debug_assert!(values.len() >= (k + 1) * dim);
        Self { k, t, dim, values: &values[..(k + 1) * dim] }
    }

    pub fn at(&self, j: usize) -> &'a [f64] {
        assert!(j <= self.k, "observation slot {j} is in the future of step {}", self.k);
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.at(self.k)
    }
}

/// A control policy adapted to the observation history.
pub trait Control: Send + Sync {
    fn value(&self, obs: &History, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct ConstantControl(pub Vec<f64>);

impl Control for ConstantControl {
    fn value(&self, _: &History, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Deterministic piecewise-constant schedule on a uniform partition of
/// `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct ScheduleControl {
    pub horizon: f64,
    pub values: Vec<Vec<f64>>,
}

impl ScheduleControl {
    pub fn new(horizon: f64, values: Vec<Vec<f64>>) -> Self {
        assert!(!values.is_empty());
        Self { horizon, values }
    }

    pub fn at(&self, t: f64) -> &[f64] {
        let n = self.values.len();
        let i = ((t / self.horizon) * n as f64 + 1e-9).floor() as usize;
        &self.values[i.min(n - 1)]
    }
}

impl Control for ScheduleControl {
    fn value(&self, obs: &History, out: &mut [f64]) {
        out.copy_from_slice(self.at(obs.t));
    }
}

/// Policy given by expressions in `t` and the current observation `z[i]`.
#[derive(Debug, Clone)]
pub struct ExprControl {
    pub exprs: Vec<Expr>,
}

impl ExprControl {
    pub fn parse(sources: &[String], spec: &SystemSpec) -> Result<Self> {
        if sources.len() != spec.d {
            return Err(Error::Config(format!("control needs {} expressions, got {}", spec.d, sources.len())));
        }
        let mut scope = Scope::new(0, 0);
        scope.z = spec.k2;
        let exprs = sources.iter().map(|s| Expr::parse(s, &scope)).collect::<Result<Vec<_>>>()?;
        Ok(Self { exprs })
    }
}

impl Control for ExprControl {
    fn value(&self, obs: &History, out: &mut [f64]) {
        let z = obs.current();
        for (o, e) in out.iter_mut().zip(&self.exprs) {
            *o = e.eval_with_z(obs.t, &[], &[], z);
        }
    }
}

/// Adds a constant shift to another policy.
pub struct ShiftedControl<'a> {
    pub base: &'a dyn Control,
    pub shift: Vec<f64>,
}

impl Control for ShiftedControl<'_> {
    fn value(&self, obs: &History, out: &mut [f64]) {
        self.base.value(obs, out);
        for (o, s) in out.iter_mut().zip(&self.shift) {
            *o += s;
        }
    }
}

/// Exogenous randomness of one sample on the driver grid.
#[derive(Debug, Clone)]
pub struct Drivers {
    pub w: SampledPath,
    /// `W̃` under the physical measure, `W̄` under the reference measure.
    pub wt: SampledPath,
    pub b: Option<SampledPath>,
    pub bt: Option<SampledPath>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Measure {
    Physical,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FbmScheme {
    Young,
    SecondOrder,
}

impl FbmScheme {
    pub fn for_hurst(hurst: f64) -> Self {
        if hurst > 0.5 {
            FbmScheme::Young
        } else {
            FbmScheme::SecondOrder
        }
    }
}

/// Reproducible driver generation: sample `i` draws `W`, `W̃`, `B`, `B̃`
/// from streams `4i..4i+3`, or `B`, `B̃` from a fixed seed when `ω₂` is
/// held fixed.
pub struct DriverFactory {
    pub seed: u64,
    pub levels: u32,
    pub fix_omega2: Option<u64>,
    horizon: f64,
    k1: usize,
    k2: usize,
    m1: usize,
    m2: usize,
    sampler: Option<FbmSampler>,
}

impl DriverFactory {
    pub fn new(spec: &SystemSpec, seed: u64, levels: u32, fix_omega2: Option<u64>) -> Result<Self> {
        let (m1, m2) = (spec.m1(), spec.m2());
        let sampler = if m1 + m2 > 0 { Some(FbmSampler::new(spec.hurst, levels)?) } else { None };
        Ok(Self { seed, levels, fix_omega2, horizon: spec.horizon, k1: spec.k1, k2: spec.k2, m1, m2, sampler })
    }

    fn fbm(&self, dim: usize, seed: u64, stream: u64) -> Option<SampledPath> {
        let s = self.sampler.as_ref()?;
        (dim > 0).then(|| s.sample(self.horizon, dim, &mut rng_for(seed, stream)))
    }

    pub fn drivers(&self, i: usize) -> Drivers {
        let base = 4 * i as u64;
        let w = sample_bm(self.horizon, self.levels, self.k1, &mut rng_for(self.seed, base));
        let wt = sample_bm(self.horizon, self.levels, self.k2, &mut rng_for(self.seed, base + 1));
        let (b, bt) = match self.fix_omega2 {
            Some(s) => (self.fbm(self.m1, s, 0), self.fbm(self.m2, s, 1)),
            None => (self.fbm(self.m1, self.seed, base + 2), self.fbm(self.m2, self.seed, base + 3)),
        };
        Drivers { w, wt, b, bt }
    }
}

/// `Γ` and `Λ` on the simulation grid for one sample.
#[derive(Debug, Clone)]
pub struct SampleTransform {
    pub gamma: Arc<MatrixPath>,
    pub lambda: Arc<MatrixPath>,
}

fn matrix_path(family: &ExprFamily, driver: Option<&SampledPath>, grid: &Grid) -> Result<MatrixPath> {
    let times = grid.times();
    let driver = match driver {
        Some(d) if !family.is_zero() => d,
        _ => return Ok(MatrixPath::identity(times, family.size())),
    };
    if driver.levels < grid.level {
        return Err(Error::Level { requested: grid.level, available: driver.levels });
    }
    if family.is_constant() {
        return solve_gamma_cbhd(family, driver, &times);
    }
    let fine = solve_gamma_ode_direct(family, driver, 4)?;
    let stride = 1usize << (driver.levels - grid.level);
    let values: Vec<DMatrix<f64>> = (0..times.len()).map(|k| fine.values[k * stride].clone()).collect();
    let mut path = MatrixPath { times, values, inverses: None };
    path.inverses = Some(lu_inverses(&path)?);
    Ok(path)
}

pub fn transform_paths(spec: &SystemSpec, drivers: &Drivers, grid: &Grid) -> Result<SampleTransform> {
    let gamma = matrix_path(&spec.a, drivers.b.as_ref(), grid)?;
    let lambda = matrix_path(&spec.c, drivers.bt.as_ref(), grid)?;
    Ok(SampleTransform { gamma: Arc::new(gamma), lambda: Arc::new(lambda) })
}

fn inverse(path: &MatrixPath, k: usize) -> &DMatrix<f64> {
    &path.inverses.as_ref().expect("matrix path without inverses")[k]
}

fn increments(path: &SampledPath, grid: &Grid) -> Result<Vec<f64>> {
    if path.levels < grid.level {
        return Err(Error::Level { requested: grid.level, available: path.levels });
    }
    let stride = 1usize << (path.levels - grid.level);
    let dim = path.dim;
    let mut out = vec![0.0; grid.steps() * dim];
    for k in 0..grid.steps() {
        let (a, b) = (path.at(k * stride), path.at((k + 1) * stride));
        for c in 0..dim {
            out[k * dim + c] = b[c] - a[c];
        }
    }
    Ok(out)
}

fn check_finite(v: &[f64], k: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(k))
    }
}

/// Linear fBm term `Σ_j M_j(t) v ΔB^j`, plus `Σ_{i,j} M_i M_j v 𝕏^{ji}`
/// for the second-order scheme.
struct FbmStep<'a> {
    family: &'a ExprFamily,
    path: &'a SampledPath,
    lift: Option<Level2Lift>,
    stride: usize,
}

impl<'a> FbmStep<'a> {
    fn new(family: &'a ExprFamily, path: Option<&'a SampledPath>, grid: &Grid, scheme: FbmScheme) -> Result<Option<Self>> {
        let path = match path {
            Some(p) if !family.is_zero() => p,
            _ => return Ok(None),
        };
        if path.levels < grid.level {
            return Err(Error::Level { requested: grid.level, available: path.levels });
        }
        let lift = (scheme == FbmScheme::SecondOrder).then(|| lift_piecewise_linear(path));
        Ok(Some(Self { family, path, lift, stride: 1 << (path.levels - grid.level) }))
    }

    fn apply(&self, k: usize, t: f64, v: &DVector<f64>) -> DVector<f64> {
        let (s, e) = (k * self.stride, (k + 1) * self.stride);
        let m = self.path.dim;
        let mats: Vec<DMatrix<f64>> = (0..m).map(|j| self.family.eval(j, t)).collect();
        let mut out = DVector::zeros(v.len());
        let (a, b) = (self.path.at(s), self.path.at(e));
        for j in 0..m {
            out += &mats[j] * v * (b[j] - a[j]);
        }
        if let Some(lift) = &self.lift {
            let x2 = lift.second(s, e);
            for i in 0..m {
                let av = &mats[i] * v;
                for j in 0..m {
                    out += &mats[j] * &av * x2[(i, j)];
                }
            }
        }
        out
    }
}

/// Direct simulation of the original state and observation.
#[derive(Debug, Clone, Serialize)]
pub struct OriginalPaths {
    /// `X`, `(N+1) × n`, time-major.
    pub x: Vec<f64>,
    /// `ξ`, `(N+1) × k₂`.
    pub xi: Vec<f64>,
    /// `ζ = Λξ`, `(N+1) × k₂`.
    pub zeta: Vec<f64>,
    pub u: Vec<f64>,
}

/// Euler–Maruyama in `W`, `W̃` with the fBm terms handled by `scheme`; the
/// controller sees `ζ_k = Λ_k ξ_k`.
pub fn simulate_original(
    spec: &SystemSpec,
    drivers: &Drivers,
    lambda: &MatrixPath,
    grid: &Grid,
    control: &dyn Control,
    scheme: FbmScheme,
) -> Result<OriginalPaths> {
    let (n, d, k1, k2) = (spec.n, spec.d, spec.k1, spec.k2);
    let steps = grid.steps();
    let h = grid.step();
    let dw = increments(&drivers.w, grid)?;
    let dwt = increments(&drivers.wt, grid)?;
    let xs = FbmStep::new(&spec.a, drivers.b.as_ref(), grid, scheme)?;
    let xis = FbmStep::new(&spec.c, drivers.bt.as_ref(), grid, scheme)?;
    let mut x = vec![0.0; (steps + 1) * n];
    let mut xi = vec![0.0; (steps + 1) * k2];
    let mut zeta = vec![0.0; (steps + 1) * k2];
    let mut u = vec![0.0; steps * d];
    x[..n].copy_from_slice(&spec.x0);
    let mut uk = vec![0.0; d];
    for k in 0..steps {
        let t = grid.time(k);
        control.value(&History::new(k, t, k2, &zeta), &mut uk);
        spec.clamp_control(&mut uk);
        u[k * d..(k + 1) * d].copy_from_slice(&uk);
        let xk = DVector::from_column_slice(&x[k * n..(k + 1) * n]);
        let xik = DVector::from_column_slice(&xi[k * k2..(k + 1) * k2]);
        let dwk = DVector::from_column_slice(&dw[k * k1..(k + 1) * k1]);
        let dwtk = DVector::from_column_slice(&dwt[k * k2..(k + 1) * k2]);
        let mut xn = &xk + spec.b.eval(t, xk.as_slice(), &uk) * h + spec.sigma_matrix(t, xk.as_slice(), &uk) * dwk;
        if let Some(s) = &xs {
            xn += s.apply(k, t, &xk);
        }
        let mut xin = &xik + spec.h.eval(t, xk.as_slice(), &uk) * h + spec.d_matrix(t) * dwtk;
        if let Some(s) = &xis {
            xin += s.apply(k, t, &xik);
        }
        check_finite(xn.as_slice(), k)?;
        check_finite(xin.as_slice(), k)?;
        x[(k + 1) * n..(k + 2) * n].copy_from_slice(xn.as_slice());
        xi[(k + 1) * k2..(k + 2) * k2].copy_from_slice(xin.as_slice());
        let z = &lambda.values[k + 1] * xin;
        zeta[(k + 1) * k2..(k + 2) * k2].copy_from_slice(z.as_slice());
    }
    Ok(OriginalPaths { x, xi, zeta, u })
}

/// One sample of the transformed system.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    /// `Y`, `(N+1) × n`.
    pub y: Vec<f64>,
    /// `Γ⁻¹Y`, `(N+1) × n`.
    pub x: Vec<f64>,
    /// `ζ`, `(N+1) × k₂`.
    pub zeta: Vec<f64>,
    /// `ρ̃`, `N+1`.
    pub rho: Vec<f64>,
    /// Control values, `N × d`.
    pub u: Vec<f64>,
    /// `ΔW`, `N × k₁`.
    pub dw: Vec<f64>,
    /// Innovation increments `ΔW̄ = D⁻¹Λ⁻¹Δζ`, `N × k₂`.
    pub dwbar: Vec<f64>,
}

impl Trajectory {
    pub fn state(&self, k: usize, n: usize) -> &[f64] {
        &self.x[k * n..(k + 1) * n]
    }

    pub fn control(&self, k: usize, d: usize) -> &[f64] {
        &self.u[k * d..(k + 1) * d]
    }
}

/// Euler–Maruyama for `Y` and `ζ`; no fBm differential enters.
pub fn simulate_transformed(
    spec: &SystemSpec,
    tr: &SampleTransform,
    drivers: &Drivers,
    grid: &Grid,
    control: &dyn Control,
    measure: Measure,
) -> Result<Trajectory> {
    let (n, d, k1, k2) = (spec.n, spec.d, spec.k1, spec.k2);
    let steps = grid.steps();
    let h = grid.step();
    let (gamma, lambda) = (&*tr.gamma, &*tr.lambda);
    if gamma.len() != steps + 1 || lambda.len() != steps + 1 {
        return Err(Error::GridMismatch(format!("Γ/Λ have {}/{} points, grid {}", gamma.len(), lambda.len(), steps + 1)));
    }
    let dw = increments(&drivers.w, grid)?;
    let dwt = increments(&drivers.wt, grid)?;
    let mut y = vec![0.0; (steps + 1) * n];
    let mut x = vec![0.0; (steps + 1) * n];
    let mut zeta = vec![0.0; (steps + 1) * k2];
    let mut u = vec![0.0; steps * d];
    y[..n].copy_from_slice(&spec.x0);
    let x0 = inverse(gamma, 0) * DVector::from_column_slice(&spec.x0);
    x[..n].copy_from_slice(x0.as_slice());
    let mut uk = vec![0.0; d];
    for k in 0..steps {
        let t = grid.time(k);
        control.value(&History::new(k, t, k2, &zeta), &mut uk);
        spec.clamp_control(&mut uk);
        u[k * d..(k + 1) * d].copy_from_slice(&uk);
        let xk = &x[k * n..(k + 1) * n];
        let g = &gamma.values[k];
        let yk = DVector::from_column_slice(&y[k * n..(k + 1) * n]);
        let dwk = DVector::from_column_slice(&dw[k * k1..(k + 1) * k1]);
        let yn = yk + g * (spec.b.eval(t, xk, &uk) * h + spec.sigma_matrix(t, xk, &uk) * dwk);
        let dwtk = DVector::from_column_slice(&dwt[k * k2..(k + 1) * k2]);
        let ld = &lambda.values[k] * spec.d_matrix(t);
        let dz = match measure {
            Measure::Physical => &lambda.values[k] * spec.h.eval(t, xk, &uk) * h + ld * dwtk,
            Measure::Reference => ld * dwtk,
        };
        check_finite(yn.as_slice(), k)?;
        y[(k + 1) * n..(k + 2) * n].copy_from_slice(yn.as_slice());
        let xn = inverse(gamma, k + 1) * yn;
        x[(k + 1) * n..(k + 2) * n].copy_from_slice(xn.as_slice());
        for c in 0..k2 {
            zeta[(k + 1) * k2 + c] = zeta[k * k2 + c] + dz[c];
        }
    }
    let dwbar = innovations(spec, lambda, grid, &zeta)?;
    let rho = simulate_density(spec, grid, &x, &u, &dwbar);
    Ok(Trajectory { y, x, zeta, rho, u, dw, dwbar })
}

/// `ΔW̄_k = D_k⁻¹ Λ_k⁻¹ (ζ_{k+1} − ζ_k)`.
pub fn innovations(spec: &SystemSpec, lambda: &MatrixPath, grid: &Grid, zeta: &[f64]) -> Result<Vec<f64>> {
    let k2 = spec.k2;
    let mut out = vec![0.0; grid.steps() * k2];
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let dinv = spec.d_matrix(t).try_inverse().ok_or(Error::Singular(t))?;
        let dz = DVector::from_fn(k2, |c, _| zeta[(k + 1) * k2 + c] - zeta[k * k2 + c]);
        let v = dinv * (inverse(lambda, k) * dz);
        out[k * k2..(k + 1) * k2].copy_from_slice(v.as_slice());
    }
    Ok(out)
}

/// `D⁻¹(t) h(t, x, u)`.
pub fn drift_ratio(spec: &SystemSpec, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
    let dinv = spec.d_matrix(t).try_inverse().expect("D(t) invertible");
    dinv * spec.h.eval(t, x, u)
}

/// Log-Euler scheme for `dρ̃ = ρ̃ (D⁻¹h)ᵀ dW̄`, `ρ̃₀ = 1`, where `x` is the
/// original-coordinate state `Γ⁻¹Y`.
pub fn simulate_density(spec: &SystemSpec, grid: &Grid, x: &[f64], u: &[f64], dwbar: &[f64]) -> Vec<f64> {
    let (n, d, k2) = (spec.n, spec.d, spec.k2);
    let h = grid.step();
    let mut rho = Vec::with_capacity(grid.steps() + 1);
    let mut log_rho = 0.0;
    rho.push(1.0);
    for k in 0..grid.steps() {
        if !spec.h.is_zero() {
            let g = drift_ratio(spec, grid.time(k), &x[k * n..(k + 1) * n], &u[k * d..(k + 1) * d]);
            let dwb = &dwbar[k * k2..(k + 1) * k2];
            log_rho += g.iter().zip(dwb).map(|(a, b)| a * b).sum::<f64>() - 0.5 * g.norm_squared() * h;
        }
        rho.push(log_rho.exp());
    }
    rho
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrature {
    Trapezoid,
    LeftPoint,
}

/// `ρ̃_T Φ(X_T) + ∫ ρ̃_t f(t, X_t, u_t) dt` for one sample; the running cost
/// at `T` reuses the last control value.
pub fn sample_cost(spec: &SystemSpec, grid: &Grid, traj: &Trajectory, quad: Quadrature) -> f64 {
    let (n, d) = (spec.n, spec.d);
    let steps = grid.steps();
    let h = grid.step();
    let run = |k: usize| {
        let uk = traj.control(k.min(steps - 1), d);
        traj.rho[k] * spec.f_value(grid.time(k), traj.state(k, n), uk)
    };
    let mut integral = 0.0;
    match quad {
        Quadrature::LeftPoint => {
            for k in 0..steps {
                integral += run(k) * h;
            }
        }
        Quadrature::Trapezoid => {
            let mut prev = run(0);
            for k in 0..steps {
                let uk = traj.control(k, d);
                let next = traj.rho[k + 1] * spec.f_value(grid.time(k + 1), traj.state(k + 1, n), uk);
                integral += 0.5 * h * (prev + next);
                prev = run(k + 1);
            }
        }
    }
    traj.rho[steps] * spec.phi_value(traj.state(steps, n)) + integral
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, se) = mean_se(xs);
        Self { mean, se }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchConfig {
    pub samples: usize,
    pub level: u32,
    /// Driver resolution; `Γ`, `Λ` and the lift come from this level.
    pub driver_level: u32,
    pub seed: u64,
    pub fix_omega2: Option<u64>,
    pub measure: Measure,
    pub scheme: Option<FbmScheme>,
    pub with_original: bool,
}

impl BatchConfig {
    pub fn new(samples: usize, level: u32, seed: u64) -> Self {
        Self {
            samples,
            level,
            driver_level: level.max(10),
            seed,
            fix_omega2: None,
            measure: Measure::Reference,
            scheme: None,
            with_original: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub transform: SampleTransform,
    pub traj: Trajectory,
    pub original: Option<OriginalPaths>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub grid: Grid,
    pub config: BatchConfig,
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn costs(&self, spec: &SystemSpec, quad: Quadrature) -> Vec<f64> {
        self.samples.par_iter().map(|s| sample_cost(spec, &self.grid, &s.traj, quad)).collect()
    }

    pub fn cost(&self, spec: &SystemSpec, quad: Quadrature) -> Estimate {
        Estimate::from_samples(&self.costs(spec, quad))
    }

    pub fn terminal_density(&self) -> Estimate {
        let v: Vec<f64> = self.samples.iter().map(|s| *s.traj.rho.last().unwrap()).collect();
        Estimate::from_samples(&v)
    }

    /// Transforms of every sample, for re-simulation under common random
    /// numbers.
    pub fn transforms(&self) -> Vec<SampleTransform> {
        self.samples.iter().map(|s| s.transform.clone()).collect()
    }
}

fn validate_batch(spec: &SystemSpec, cfg: &BatchConfig) -> Result<()> {
    if cfg.samples == 0 {
        return Err(Error::Config("batch needs at least one sample".into()));
    }
    if cfg.level > cfg.driver_level {
        return Err(Error::Level { requested: cfg.level, available: cfg.driver_level });
    }
    spec.validate()
}

/// Simulates `cfg.samples` independent samples under `control`. When
/// `transforms` is given, those `Γ`, `Λ` are reused instead of recomputed.
pub fn run_batch_with(
    spec: &SystemSpec,
    cfg: &BatchConfig,
    control: &dyn Control,
    transforms: Option<&[SampleTransform]>,
) -> Result<Batch> {
    validate_batch(spec, cfg)?;
    let grid = Grid::new(spec.horizon, cfg.level);
    let factory = DriverFactory::new(spec, cfg.seed, cfg.driver_level, cfg.fix_omega2)?;
    let scheme = cfg.scheme.unwrap_or_else(|| FbmScheme::for_hurst(spec.hurst));
    let shared = match (transforms, cfg.fix_omega2) {
        (None, Some(_)) => Some(transform_paths(spec, &factory.drivers(0), &grid)?),
        _ => None,
    };
    let samples = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let drivers = factory.drivers(i);
            let transform = match (transforms, &shared) {
                (Some(ts), _) => ts[i].clone(),
                (None, Some(s)) => s.clone(),
                (None, None) => transform_paths(spec, &drivers, &grid)?,
            };
            let traj = simulate_transformed(spec, &transform, &drivers, &grid, control, cfg.measure)?;
            let original = if cfg.with_original {
                Some(simulate_original(spec, &drivers, &transform.lambda, &grid, control, scheme)?)
            } else {
                None
            };
            Ok(Sample { index: i, transform, traj, original })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { grid, config: cfg.clone(), samples })
}

pub fn run_batch(spec: &SystemSpec, cfg: &BatchConfig, control: &dyn Control) -> Result<Batch> {
    run_batch_with(spec, cfg, control, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub level: u32,
    pub per_sample: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub q95: f64,
    pub max: f64,
}

/// `sup_t |X_t − Γ_t⁻¹ Y_t|` per sample, for batches simulated with the
/// original system alongside.
pub fn consistency_check(spec: &SystemSpec, batch: &Batch) -> Result<ConsistencyReport> {
    let n = spec.n;
    let per_sample = batch
        .samples
        .iter()
        .map(|s| {
            let orig = s
                .original
                .as_ref()
                .ok_or_else(|| Error::Config("batch was simulated without the original system".into()))?;
            let mut sup = 0.0f64;
            for k in 0..=batch.grid.steps() {
                let a = &orig.x[k * n..(k + 1) * n];
                let b = s.traj.state(k, n);
                let dist = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                sup = sup.max(dist);
            }
            Ok(sup)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ConsistencyReport {
        level: batch.grid.level,
        median: median(&per_sample),
        mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        q95: quantile(&per_sample, 0.95),
        max: per_sample.iter().copied().fold(0.0, f64::max),
        per_sample,
    })
}

//! Spike variations, the first and second order variational equations of
//! the transformed system, and the order-of-ε studies built on them.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::rng_for;
use crate::sde::{
    run_batch_with, sample_cost, Batch, Control, Estimate, Grid, History, Measure, Quadrature, SampleTransform, Trajectory,
};
use crate::system::{Field, SystemSpec};
use crate::util::{linear_fit, quantile};

use super::Verdict;

/// Replacement of the control by `value` on `[τ, τ+ε)`.
#[derive(Debug, Clone, Serialize)]
pub struct SpikeVariation {
    pub tau: f64,
    pub eps: f64,
    pub value: Vec<f64>,
}

impl SpikeVariation {
    pub fn new(tau: f64, eps: f64, value: Vec<f64>, horizon: f64) -> Result<Self> {
        if !(tau >= 0.0 && eps >= 0.0 && tau + eps <= horizon * (1.0 + 1e-12)) {
            return Err(Error::Spike { tau, eps, horizon });
        }
        Ok(Self { tau, eps, value })
    }

    /// Whether a grid step starting at `t` lies in `[τ, τ+ε)`.
    pub fn active(&self, t: f64) -> bool {
        let tol = 1e-12 * (1.0 + self.tau.abs());
        t >= self.tau - tol && t < self.tau + self.eps - tol
    }

    /// Grid steps covered by the spike.
    pub fn steps(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.steps()).filter(|&k| self.active(grid.time(k))).collect()
    }
}

pub struct SpikeControl<'a> {
    pub base: &'a dyn Control,
    pub spike: SpikeVariation,
}

impl Control for SpikeControl<'_> {
    fn value(&self, obs: &History, out: &mut [f64]) {
        if self.spike.active(obs.t) {
            out.copy_from_slice(&self.spike.value);
        } else {
            self.base.value(obs, out);
        }
    }
}

pub fn spike_control<'a>(base: &'a dyn Control, spike: SpikeVariation, horizon: f64) -> Result<SpikeControl<'a>> {
    let spike = SpikeVariation::new(spike.tau, spike.eps, spike.value, horizon)?;
    Ok(SpikeControl { base, spike })
}

/// `Y¹, Y²` (`(N+1) × n`) and `ρ̃¹, ρ̃²` (`N+1`) for one sample.
#[derive(Debug, Clone, Serialize)]
pub struct VariationalPaths {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VariationalBundle {
    pub spike: SpikeVariation,
    pub paths: Vec<VariationalPaths>,
}

/// `(vᵀ φ^i_XX v)_i` for every component of `field`.
fn quad_form(field: &Field, affine: bool, t: f64, x: &[f64], u: &[f64], v: &DVector<f64>) -> DVector<f64> {
    if affine {
        return DVector::zeros(field.len());
    }
    DVector::from_iterator(field.len(), (0..field.len()).map(|i| v.dot(&(field.hessian(i, t, x, u) * v))))
}

fn spike_value(spec: &SystemSpec, spike: &SpikeVariation) -> Vec<f64> {
    let mut v = spike.value.clone();
    spec.clamp_control(&mut v);
    v
}

/// Euler schemes for the four variational equations along one base
/// trajectory simulated under the reference measure.
pub fn variational_sample(
    spec: &SystemSpec,
    grid: &Grid,
    tr: &SampleTransform,
    traj: &Trajectory,
    spike: &SpikeVariation,
) -> Result<VariationalPaths> {
    let (n, d, k1, k2) = (spec.n, spec.d, spec.k1, spec.k2);
    let steps = grid.steps();
    let h = grid.step();
    let gamma = &*tr.gamma;
    let ginv = gamma.inverses.as_ref().ok_or_else(|| Error::Config("Γ path without inverses".into()))?;
    let v = spike_value(spec, spike);
    let b_aff = spec.b.is_affine_in_x();
    let s_aff: Vec<bool> = spec.sigma.iter().map(|s| s.is_affine_in_x()).collect();
    let h_zero = spec.h.is_zero();
    let h_aff = spec.h.is_affine_in_x();
    let mut y1 = vec![0.0; (steps + 1) * n];
    let mut y2 = vec![0.0; (steps + 1) * n];
    let mut rho1 = vec![0.0; steps + 1];
    let mut rho2 = vec![0.0; steps + 1];
    for k in 0..steps {
        let t = grid.time(k);
        let x = traj.state(k, n);
        let u = traj.control(k, d);
        let active = spike.active(t);
        let (g, gi) = (&gamma.values[k], &ginv[k]);
        let x1 = gi * DVector::from_column_slice(&y1[k * n..(k + 1) * n]);
        let x2 = gi * DVector::from_column_slice(&y2[k * n..(k + 1) * n]);
        let bx = spec.b.jacobian(t, x, u);
        let mut d1 = &bx * &x1 * h;
        let mut d2 = (&bx * &x2 + quad_form(&spec.b, b_aff, t, x, u, &x1) * 0.5) * h;
        if active {
            d2 += (spec.b.eval(t, x, &v) - spec.b.eval(t, x, u)) * h;
        }
        for r in 0..k1 {
            let dw = traj.dw[k * k1 + r];
            let sig = &spec.sigma[r];
            let sx = sig.jacobian(t, x, u);
            let mut a1 = &sx * &x1;
            let mut a2 = &sx * &x2 + quad_form(sig, s_aff[r], t, x, u, &x1) * 0.5;
            if active {
                a1 += sig.eval(t, x, &v) - sig.eval(t, x, u);
                a2 += (sig.jacobian(t, x, &v) - &sx) * &x1;
            }
            d1 += a1 * dw;
            d2 += a2 * dw;
        }
        let y1n = DVector::from_column_slice(&y1[k * n..(k + 1) * n]) + g * d1;
        let y2n = DVector::from_column_slice(&y2[k * n..(k + 1) * n]) + g * d2;
        y1[(k + 1) * n..(k + 2) * n].copy_from_slice(y1n.as_slice());
        y2[(k + 1) * n..(k + 2) * n].copy_from_slice(y2n.as_slice());
        if h_zero {
            continue;
        }
        let rb = traj.rho[k];
        let dinv = spec.d_matrix(t).try_inverse().ok_or(Error::Singular(t))?;
        let gbar = &dinv * spec.h.eval(t, x, u);
        let hx = spec.h.jacobian(t, x, u);
        let hx1 = &dinv * &hx * &x1;
        let mut a1 = &gbar * rho1[k] + &hx1 * rb;
        let mut a2 = &gbar * rho2[k] + &hx1 * rho1[k] + &dinv * &hx * &x2 * rb
            + &dinv * quad_form(&spec.h, h_aff, t, x, u, &x1) * (0.5 * rb);
        if active {
            let dh = &dinv * (spec.h.eval(t, x, &v) - spec.h.eval(t, x, u));
            a1 += &dh * rb;
            a2 += &dh * rho1[k] + &dinv * (spec.h.jacobian(t, x, &v) - &hx) * &x1 * rb;
        }
        let dwb = DVector::from_column_slice(&traj.dwbar[k * k2..(k + 1) * k2]);
        rho1[k + 1] = rho1[k] + a1.dot(&dwb);
        rho2[k + 1] = rho2[k] + a2.dot(&dwb);
    }
    if y1.iter().chain(&y2).chain(&rho1).chain(&rho2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(steps));
    }
    Ok(VariationalPaths { y1, y2, rho1, rho2 })
}

fn require_reference(batch: &Batch) -> Result<()> {
    if batch.config.measure != Measure::Reference {
        return Err(Error::Config("variational studies need a batch simulated under the reference measure".into()));
    }
    Ok(())
}

pub fn variational_paths(spec: &SystemSpec, batch: &Batch, spike: &SpikeVariation) -> Result<VariationalBundle> {
    require_reference(batch)?;
    let spike = SpikeVariation::new(spike.tau, spike.eps, spike.value.clone(), batch.grid.horizon)?;
    let paths = batch
        .samples
        .par_iter()
        .map(|s| variational_sample(spec, &batch.grid, &s.transform, &s.traj, &spike))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalBundle { spike, paths })
}

fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// Per-sample direct value of the first-order cost expansion, with
/// left-point time quadrature.
pub fn hat_j_sample(
    spec: &SystemSpec,
    grid: &Grid,
    tr: &SampleTransform,
    traj: &Trajectory,
    var: &VariationalPaths,
    spike: &SpikeVariation,
) -> f64 {
    let (n, d) = (spec.n, spec.d);
    let steps = grid.steps();
    let h = grid.step();
    let gamma = &*tr.gamma;
    let ginv = gamma.inverses.as_ref().expect("Γ inverses");
    let v = spike_value(spec, spike);
    let xs = |k: usize| {
        let x1 = &ginv[k] * DVector::from_column_slice(&var.y1[k * n..(k + 1) * n]);
        let x2 = &ginv[k] * DVector::from_column_slice(&var.y2[k * n..(k + 1) * n]);
        (x1, x2)
    };
    let mut total = 0.0;
    for k in 0..steps {
        let t = grid.time(k);
        let x = traj.state(k, n);
        let u = traj.control(k, d);
        let (x1, x2) = xs(k);
        let fbar = spec.f_value(t, x, u);
        let fx = spec.f.jacobian(t, x, u).row(0).transpose();
        let fxx = spec.f.hessian(0, t, x, u);
        let mut inner = dot(&fx, &(&x1 + &x2)) + 0.5 * dot(&(&fxx * &x1), &x1);
        if spike.active(t) {
            inner += spec.f_value(t, x, &v) - fbar;
        }
        total += h * (traj.rho[k] * inner + (var.rho1[k] + var.rho2[k]) * fbar + var.rho1[k] * dot(&fx, &x1));
    }
    let x = traj.state(steps, n);
    let (x1, x2) = xs(steps);
    let phi = spec.phi_value(x);
    let px = spec.phi.jacobian(grid.horizon, x, &[]).row(0).transpose();
    let pxx = spec.phi.hessian(0, grid.horizon, x, &[]);
    let rb = traj.rho[steps];
    let (r1, r2) = (var.rho1[steps], var.rho2[steps]);
    total + rb * (dot(&px, &(&x1 + &x2)) + 0.5 * dot(&(&pxx * &x1), &x1)) + (r1 + r2) * phi + r1 * dot(&px, &x1)
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderEstimate {
    pub eps: Vec<f64>,
    pub means: Vec<f64>,
    /// `None` when the quantity vanishes identically.
    pub slope: Option<f64>,
    /// 95% bootstrap band.
    pub band: Option<(f64, f64)>,
}

const BOOTSTRAP: usize = 400;

/// Least-squares slope of `log E[Z]` against `log ε` where `samples[i]`
/// holds draws of `Z ≥ 0` at `eps[i]`. Draws at different `ε` with equal
/// counts are treated as paired (common random numbers) in the bootstrap.
pub fn estimate_order(samples: &[Vec<f64>], eps: &[f64], seed: u64) -> Result<OrderEstimate> {
    if eps.len() < 4 || samples.len() != eps.len() {
        return Err(Error::Config(format!("order estimation needs at least 4 ε values, got {}", eps.len())));
    }
    if let Some(s) = samples.iter().find(|s| s.len() < 1000) {
        return Err(Error::Config(format!("order estimation needs at least 1000 samples per ε, got {}", s.len())));
    }
    let means: Vec<f64> = samples.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    if means.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        return Ok(OrderEstimate { eps: eps.to_vec(), means, slope: None, band: None });
    }
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let slope_of = |ms: &[f64]| linear_fit(&lx, &ms.iter().map(|m| m.ln()).collect::<Vec<_>>()).0;
    let slope = slope_of(&means);
    let paired = samples.iter().all(|s| s.len() == samples[0].len());
    let mut rng = rng_for(seed, 0);
    let mut boots = Vec::with_capacity(BOOTSTRAP);
    for _ in 0..BOOTSTRAP {
        let ms: Vec<f64> = if paired {
            let m = samples[0].len();
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            samples.iter().map(|s| idx.iter().map(|&i| s[i]).sum::<f64>() / m as f64).collect()
        } else {
            samples
                .iter()
                .map(|s| (0..s.len()).map(|_| s[rng.random_range(0..s.len())]).sum::<f64>() / s.len() as f64)
                .collect()
        };
        if ms.iter().all(|m| *m > 0.0) {
            boots.push(slope_of(&ms));
        }
    }
    let band = (!boots.is_empty()).then(|| (quantile(&boots, 0.025), quantile(&boots, 0.975)));
    Ok(OrderEstimate { eps: eps.to_vec(), means, slope: Some(slope), band })
}

fn sup_norm_pow(v: &[f64], dim: usize, p: f64) -> f64 {
    v.chunks(dim).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max).powf(p)
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeSuite {
    pub tau: f64,
    pub value: Vec<f64>,
    pub p: f64,
    pub y1: OrderEstimate,
    pub y2: OrderEstimate,
    pub rho1: OrderEstimate,
    pub rho2: OrderEstimate,
}

/// `E[sup|·|^p]` of the four variational paths against `ε`, all spikes
/// starting at `τ` and sharing the base batch.
pub fn slope_suite(spec: &SystemSpec, batch: &Batch, tau: f64, value: &[f64], eps: &[f64], p: f64) -> Result<SlopeSuite> {
    let mut q: [Vec<Vec<f64>>; 4] = Default::default();
    for &e in eps {
        let spike = SpikeVariation::new(tau, e, value.to_vec(), batch.grid.horizon)?;
        let bundle = variational_paths(spec, batch, &spike)?;
        let n = spec.n;
        q[0].push(bundle.paths.iter().map(|v| sup_norm_pow(&v.y1, n, p)).collect());
        q[1].push(bundle.paths.iter().map(|v| sup_norm_pow(&v.y2, n, p)).collect());
        q[2].push(bundle.paths.iter().map(|v| sup_norm_pow(&v.rho1, 1, p)).collect());
        q[3].push(bundle.paths.iter().map(|v| sup_norm_pow(&v.rho2, 1, p)).collect());
    }
    let seed = batch.config.seed;
    Ok(SlopeSuite {
        tau,
        value: value.to_vec(),
        p,
        y1: estimate_order(&q[0], eps, seed)?,
        y2: estimate_order(&q[1], eps, seed)?,
        rho1: estimate_order(&q[2], eps, seed)?,
        rho2: estimate_order(&q[3], eps, seed)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionPoint {
    pub eps: f64,
    /// `J(uᵉ) − J(ū)` under common random numbers.
    pub delta_j: Estimate,
    pub hat_j: Estimate,
    pub residual: Estimate,
    /// Residual mean exceeds two standard errors.
    pub resolved: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub tau: f64,
    pub value: Vec<f64>,
    pub points: Vec<ExpansionPoint>,
    pub slope: Option<f64>,
    pub threshold: f64,
    pub verdict: Verdict,
}

pub const EXPANSION_SLOPE: f64 = 1.1;

/// Residual `|J(uᵉ) − J(ū) − Ĵ|` across `ε`, with the perturbed costs
/// re-simulated on the drivers of `batch`.
pub fn expansion_check(
    spec: &SystemSpec,
    batch: &Batch,
    base: &dyn Control,
    tau: f64,
    value: &[f64],
    eps: &[f64],
) -> Result<ExpansionReport> {
    require_reference(batch)?;
    let quad = Quadrature::LeftPoint;
    let base_costs = batch.costs(spec, quad);
    let transforms = batch.transforms();
    let mut points = Vec::with_capacity(eps.len());
    for &e in eps {
        let spike = SpikeVariation::new(tau, e, value.to_vec(), batch.grid.horizon)?;
        let ctl = SpikeControl { base, spike: spike.clone() };
        let pert = run_batch_with(spec, &batch.config, &ctl, Some(&transforms))?;
        let bundle = variational_paths(spec, batch, &spike)?;
        let rows: Vec<(f64, f64)> = batch
            .samples
            .par_iter()
            .zip(&pert.samples)
            .zip(&bundle.paths)
            .zip(&base_costs)
            .map(|(((s, ps), var), c0)| {
                let dj = sample_cost(spec, &batch.grid, &ps.traj, quad) - c0;
                (dj, hat_j_sample(spec, &batch.grid, &s.transform, &s.traj, var, &spike))
            })
            .collect();
        let dj: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let hj: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let res: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
        let residual = Estimate::from_samples(&res);
        points.push(ExpansionPoint {
            eps: e,
            delta_j: Estimate::from_samples(&dj),
            hat_j: Estimate::from_samples(&hj),
            resolved: residual.mean.abs() > 2.0 * residual.se,
            residual,
        });
    }
    let nonzero = points.iter().all(|p| p.residual.mean != 0.0);
    let slope = nonzero.then(|| {
        let lx: Vec<f64> = points.iter().map(|p| p.eps.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.residual.mean.abs().ln()).collect();
        linear_fit(&lx, &ly).0
    });
    let resolved = points.iter().filter(|p| p.resolved).count();
    let verdict = match slope {
        Some(s) if s > EXPANSION_SLOPE => Verdict::Pass,
        _ if 2 * resolved < points.len() => Verdict::Inconclusive,
        _ => Verdict::Fail,
    };
    Ok(ExpansionReport { tau, value: value.to_vec(), points, slope, threshold: EXPANSION_SLOPE, verdict })
}

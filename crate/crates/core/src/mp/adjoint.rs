//! Backward least-squares Monte Carlo for the adjoint equations, the
//! Hamiltonian, and the maximum-principle inequality check.
//!
//! Conditional expectations `E_k[·]` given the full filtration are fitted on
//! a quadratic basis of `(Y_k, ζ_k)` (plus `ρ̃_k` terms when the observation
//! drift is nonzero). Martingale integrands come from regressing increment
//! products: `q^r = E_k[p_{k+1} ΔW^r]/h`, `q̃ = E_k[p_{k+1} ΔW̄]/h`,
//! `β = E_k[α_{k+1} ΔW̄]/h`, `Q^r = E_k[P_{k+1} ΔW^r]/h`. The Hamiltonian at
//! step `k` is evaluated with `E_k[p_{k+1}]`, which makes the discrete
//! optimality condition exact for the Euler scheme. Martingales orthogonal
//! to `(W, W̄)` are taken to be zero.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::regress::fit;
use crate::sde::{Batch, Estimate, Grid, Measure, Sample};
use crate::system::SystemSpec;
use crate::util::linear_fit;

use super::spike::{variational_paths, SpikeVariation, VariationalPaths};
use super::Verdict;

/// Per-sample adjoint data at one step `k`, sample-major.
#[derive(Debug, Clone, Serialize)]
pub struct AdjointSlice {
    pub k: usize,
    /// `E_k[α_{k+1}]`.
    pub alpha: Vec<f64>,
    /// `β`, `k₂` per sample.
    pub beta: Vec<f64>,
    /// `E_k[p_{k+1}]`, `n` per sample.
    pub p: Vec<f64>,
    /// `q^r`, `k₁ × n` per sample.
    pub q: Vec<f64>,
    /// `q̃^r`, `k₂ × n` per sample.
    pub qt: Vec<f64>,
    /// `E_k[P_{k+1}]`, row-major `n × n` per sample.
    pub pp: Vec<f64>,
    /// `Q^r`, `k₁ × n × n` per sample.
    pub qq: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointSolution {
    pub level: u32,
    pub samples: usize,
    pub basis: Vec<String>,
    /// Cross-sample means of `α_k`, `p_k`, `P_k` for `k = 0..=N`.
    pub mean_alpha: Vec<f64>,
    pub mean_p: Vec<Vec<f64>>,
    pub mean_pp: Vec<Vec<f64>>,
    /// Cross-sample means of `β`, `q`, `q̃`, `Q` for `k = 0..N`.
    pub mean_beta: Vec<Vec<f64>>,
    pub mean_q: Vec<Vec<f64>>,
    pub mean_qt: Vec<Vec<f64>>,
    pub mean_qq: Vec<Vec<f64>>,
    /// Root-mean-square regression residual of `p_{k+1}` per step.
    pub residual_rms: Vec<f64>,
    /// Smallest regression rank over the sweep.
    pub min_rank: usize,
    /// `max_k ‖mean(P_k − P_kᵀ)‖_max`.
    pub symmetry_defect: f64,
    #[serde(skip)]
    pub slices: BTreeMap<usize, AdjointSlice>,
    /// Terminal values per sample: `α_N`, `p_N` (`n`), `P_N` (`n × n`).
    #[serde(skip)]
    pub terminal: (Vec<f64>, Vec<f64>, Vec<f64>),
}

/// Quadratic basis in the given coordinates.
fn quadratic(vars: &[f64], out: &mut Vec<f64>) {
    out.push(1.0);
    out.extend_from_slice(vars);
    for i in 0..vars.len() {
        for j in i..vars.len() {
            out.push(vars[i] * vars[j]);
        }
    }
}

fn quadratic_names(names: &[String]) -> Vec<String> {
    let mut out = vec!["1".to_string()];
    out.extend(names.iter().cloned());
    for i in 0..names.len() {
        for j in i..names.len() {
            out.push(format!("{}*{}", names[i], names[j]));
        }
    }
    out
}

fn state_vars(spec: &SystemSpec, s: &Sample, k: usize, with_rho: bool) -> Vec<f64> {
    let (n, k2) = (spec.n, spec.k2);
    let mut v = s.traj.y[k * n..(k + 1) * n].to_vec();
    v.extend_from_slice(&s.traj.zeta[k * k2..(k + 1) * k2]);
    if with_rho {
        v.push(s.traj.rho[k]);
    }
    v
}

fn state_names(spec: &SystemSpec, with_rho: bool) -> Vec<String> {
    let mut v: Vec<String> = (1..=spec.n).map(|i| format!("y{i}")).collect();
    v.extend((1..=spec.k2).map(|i| format!("zeta{i}")));
    if with_rho {
        v.push("rho".into());
    }
    quadratic_names(&v)
}

struct Local {
    t: f64,
    g: DMatrix<f64>,
    gi: DMatrix<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    rho: f64,
    dinv: DMatrix<f64>,
}

fn local(spec: &SystemSpec, grid: &Grid, s: &Sample, k: usize) -> Local {
    let t = grid.time(k);
    let gamma = &s.transform.gamma;
    let gi = gamma.inverses.as_ref().expect("Γ inverses")[k].clone();
    let dinv = spec.d_matrix(t).try_inverse().expect("D(t) invertible");
    let (n, d) = (spec.n, spec.d);
    let u = if k < grid.steps() { s.traj.control(k, d).to_vec() } else { s.traj.control(k - 1, d).to_vec() };
    Local { t, g: gamma.values[k].clone(), gi, x: s.traj.state(k, n).to_vec(), u, rho: s.traj.rho[k], dinv }
}

fn terminal_values(spec: &SystemSpec, grid: &Grid, s: &Sample) -> (f64, Vec<f64>, Vec<f64>) {
    let l = local(spec, grid, s, grid.steps());
    let phi = spec.phi_value(&l.x);
    let px = spec.phi.jacobian(grid.horizon, &l.x, &[]).row(0).transpose();
    let pxx = spec.phi.hessian(0, grid.horizon, &l.x, &[]);
    let p = l.gi.transpose() * px;
    let pp = (l.gi.transpose() * pxx * &l.gi) * l.rho;
    (phi, p.as_slice().to_vec(), pp.transpose().as_slice().to_vec())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

/// One backward step for sample `i` given regression predictions.
#[allow(clippy::too_many_arguments)]
fn backward_sample(
    spec: &SystemSpec,
    grid: &Grid,
    s: &Sample,
    k: usize,
    alpha_hat: f64,
    beta: &[f64],
    p_hat: &[f64],
    q: &[f64],
    qt: &[f64],
    pp_hat: &[f64],
    qq: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    let h = grid.step();
    let l = local(spec, grid, s, k);
    let (t, x, u) = (l.t, &l.x[..], &l.u[..]);
    let git = l.gi.transpose();
    let beta = DVector::from_column_slice(beta);
    let p_hat = DVector::from_column_slice(p_hat);
    let pp_hat = from_row_major(n, pp_hat);
    let f = spec.f_value(t, x, u);
    let fx = spec.f.jacobian(t, x, u).row(0).transpose();
    let fxx = spec.f.hessian(0, t, x, u);
    let bx = spec.b.jacobian(t, x, u);
    let ft = &l.g * &bx * &l.gi;
    let gbar = &l.dinv * spec.h.eval(t, x, u);
    let hx = spec.h.jacobian(t, x, u);
    let hh = &git * hx.transpose() * l.dinv.transpose();
    let alpha = alpha_hat + h * (f + gbar.dot(&beta));
    let mut dp = &git * &fx + ft.transpose() * &p_hat + &hh * &beta;
    for r2 in 0..k2 {
        dp += DVector::from_column_slice(&qt[r2 * n..(r2 + 1) * n]) * gbar[r2];
    }
    let gtp = l.g.transpose() * &p_hat;
    let mut curv = DMatrix::zeros(n, n);
    if !spec.b.is_affine_in_x() {
        for i in 0..n {
            curv += spec.b.hessian(i, t, x, u) * gtp[i];
        }
    }
    let mut dpp = &git * &fxx * &l.gi * l.rho + ft.transpose() * &pp_hat + &pp_hat * &ft;
    for r in 0..k1 {
        let sig = &spec.sigma[r];
        let st = &l.g * sig.jacobian(t, x, u) * &l.gi;
        let qr = DVector::from_column_slice(&q[r * n..(r + 1) * n]);
        let qqr = from_row_major(n, &qq[r * n * n..(r + 1) * n * n]);
        dp += st.transpose() * &qr;
        dpp += st.transpose() * &pp_hat * &st + st.transpose() * &qqr + &qqr * &st;
        if !sig.is_affine_in_x() {
            let gtq = l.g.transpose() * &qr;
            for i in 0..n {
                curv += sig.hessian(i, t, x, u) * gtq[i];
            }
        }
    }
    if !spec.h.is_affine_in_x() {
        let db = l.dinv.transpose() * &beta;
        for i in 0..k2 {
            curv += spec.h.hessian(i, t, x, u) * db[i];
        }
    }
    dpp += &git * curv * &l.gi * l.rho;
    for r2 in 0..k2 {
        let qtr = DVector::from_column_slice(&qt[r2 * n..(r2 + 1) * n]);
        let hc = hh.column(r2);
        dpp += (&qtr * hc.transpose() + hc * qtr.transpose()) * l.rho;
    }
    let p = &p_hat + dp * h;
    let pp = &pp_hat + dpp * h;
    (alpha, p.as_slice().to_vec(), row_major(&pp))
}

/// Backward sweep over the whole grid; per-sample slices are retained at
/// the steps in `keep`.
pub fn solve_adjoints_lsmc(spec: &SystemSpec, batch: &Batch, keep: &BTreeSet<usize>) -> Result<AdjointSolution> {
    if batch.config.measure != Measure::Reference {
        return Err(Error::Config("adjoint regression needs a batch simulated under the reference measure".into()));
    }
    let grid = batch.grid;
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    let ns = batch.len();
    let steps = grid.steps();
    let h = grid.step();
    let with_rho = !spec.h.is_zero();
    let basis = state_names(spec, with_rho);
    let nb = basis.len();

    let term: Vec<(f64, Vec<f64>, Vec<f64>)> =
        batch.samples.par_iter().map(|s| terminal_values(spec, &grid, s)).collect();
    let mut alpha: Vec<f64> = term.iter().map(|t| t.0).collect();
    let mut p: Vec<f64> = term.iter().flat_map(|t| t.1.clone()).collect();
    let mut pp: Vec<f64> = term.iter().flat_map(|t| t.2.clone()).collect();
    let terminal = (alpha.clone(), p.clone(), pp.clone());

    let mean_of = |v: &[f64], width: usize| -> Vec<f64> {
        let mut m = vec![0.0; width];
        for c in v.chunks(width) {
            for (a, b) in m.iter_mut().zip(c) {
                *a += b / ns as f64;
            }
        }
        m
    };
    let mut mean_alpha = vec![0.0; steps + 1];
    let mut mean_p = vec![vec![]; steps + 1];
    let mut mean_pp = vec![vec![]; steps + 1];
    let mut mean_beta = vec![vec![]; steps];
    let mut mean_q = vec![vec![]; steps];
    let mut mean_qt = vec![vec![]; steps];
    let mut mean_qq = vec![vec![]; steps];
    let mut residual_rms = vec![0.0; steps];
    let mut slices = BTreeMap::new();
    let mut min_rank = usize::MAX;
    let mut symmetry_defect = 0.0f64;
    mean_alpha[steps] = alpha.iter().sum::<f64>() / ns as f64;
    mean_p[steps] = mean_of(&p, n);
    mean_pp[steps] = mean_of(&pp, n * n);

    // Target layout: α, αΔW̄/h, p, pΔW/h, pΔW̄/h, P, PΔW/h.
    let (o_ab, o_p) = (1, 1 + k2);
    let o_q = o_p + n;
    let o_qt = o_q + k1 * n;
    let o_pp = o_qt + k2 * n;
    let o_qq = o_pp + n * n;
    let width = o_qq + k1 * n * n;

    for k in (0..steps).rev() {
        let mut design = DMatrix::zeros(ns, nb);
        let mut targets = DMatrix::zeros(ns, width);
        let mut row = Vec::with_capacity(nb);
        for (i, s) in batch.samples.iter().enumerate() {
            row.clear();
            quadratic(&state_vars(spec, s, k, with_rho), &mut row);
            for (j, v) in row.iter().enumerate() {
                design[(i, j)] = *v;
            }
            let dw = &s.traj.dw[k * k1..(k + 1) * k1];
            let dwb = &s.traj.dwbar[k * k2..(k + 1) * k2];
            targets[(i, 0)] = alpha[i];
            for r in 0..k2 {
                targets[(i, o_ab + r)] = alpha[i] * dwb[r] / h;
            }
            let pi = &p[i * n..(i + 1) * n];
            let ppi = &pp[i * n * n..(i + 1) * n * n];
            for c in 0..n {
                targets[(i, o_p + c)] = pi[c];
                for r in 0..k1 {
                    targets[(i, o_q + r * n + c)] = pi[c] * dw[r] / h;
                }
                for r in 0..k2 {
                    targets[(i, o_qt + r * n + c)] = pi[c] * dwb[r] / h;
                }
            }
            for c in 0..n * n {
                targets[(i, o_pp + c)] = ppi[c];
                for r in 0..k1 {
                    targets[(i, o_qq + r * n * n + c)] = ppi[c] * dw[r] / h;
                }
            }
        }
        let lf = fit(&design, &targets)?;
        min_rank = min_rank.min(lf.rank);
        residual_rms[k] = (lf.residual_var[o_p..o_p + n].iter().sum::<f64>() / n as f64).sqrt();
        let pred = lf.predict(&design);
        let cols = |i: usize, a: usize, len: usize| -> Vec<f64> { (a..a + len).map(|c| pred[(i, c)]).collect() };
        let per: Vec<_> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let s = &batch.samples[i];
                let beta = cols(i, o_ab, k2);
                let ph = cols(i, o_p, n);
                let q = cols(i, o_q, k1 * n);
                let qt = cols(i, o_qt, k2 * n);
                let pph = cols(i, o_pp, n * n);
                let qq = cols(i, o_qq, k1 * n * n);
                let next = backward_sample(spec, &grid, s, k, pred[(i, 0)], &beta, &ph, &q, &qt, &pph, &qq);
                (next, (beta, ph, q, qt, pph, qq))
            })
            .collect();
        let flat = |f: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
            per.iter().flat_map(|(_, r)| f(r).iter().copied()).collect()
        };
        let beta = flat(&|r| &r.0);
        let q = flat(&|r| &r.2);
        let qt = flat(&|r| &r.3);
        let qq = flat(&|r| &r.5);
        mean_beta[k] = mean_of(&beta, k2);
        mean_q[k] = mean_of(&q, k1 * n);
        mean_qt[k] = mean_of(&qt, k2 * n);
        mean_qq[k] = mean_of(&qq, k1 * n * n);
        if keep.contains(&k) {
            slices.insert(
                k,
                AdjointSlice {
                    k,
                    alpha: (0..ns).map(|i| pred[(i, 0)]).collect(),
                    beta,
                    p: flat(&|r| &r.1),
                    q,
                    qt,
                    pp: flat(&|r| &r.4),
                    qq,
                },
            );
        }
        for (i, (next, _)) in per.into_iter().enumerate() {
            alpha[i] = next.0;
            p[i * n..(i + 1) * n].copy_from_slice(&next.1);
            pp[i * n * n..(i + 1) * n * n].copy_from_slice(&next.2);
        }
        if p.iter().chain(&pp).chain(&alpha).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        mean_alpha[k] = alpha.iter().sum::<f64>() / ns as f64;
        mean_p[k] = mean_of(&p, n);
        mean_pp[k] = mean_of(&pp, n * n);
        let m = from_row_major(n, &mean_pp[k]);
        symmetry_defect = symmetry_defect.max((&m - m.transpose()).amax());
    }
    Ok(AdjointSolution {
        level: grid.level,
        samples: ns,
        basis,
        mean_alpha,
        mean_p,
        mean_pp,
        mean_beta,
        mean_q,
        mean_qt,
        mean_qq,
        residual_rms,
        min_rank,
        symmetry_defect,
        slices,
        terminal,
    })
}

/// `tr[qᵀΓσ] + ⟨β, D⁻¹h⟩ + ⟨p, Γb⟩ + f` at `(t, Γ⁻¹Y, u)`; `q` holds
/// `k₁` vectors of length `n`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    spec: &SystemSpec,
    t: f64,
    y: &[f64],
    gamma: &DMatrix<f64>,
    gamma_inv: &DMatrix<f64>,
    u: &[f64],
    p: &[f64],
    q: &[f64],
    beta: &[f64],
) -> f64 {
    let n = spec.n;
    let x = gamma_inv * DVector::from_column_slice(y);
    let x = x.as_slice();
    let mut v = spec.f_value(t, x, u);
    if p.iter().any(|c| *c != 0.0) {
        v += DVector::from_column_slice(p).dot(&(gamma * spec.b.eval(t, x, u)));
    }
    for (r, sig) in spec.sigma.iter().enumerate() {
        let qr = &q[r * n..(r + 1) * n];
        if qr.iter().any(|c| *c != 0.0) {
            v += DVector::from_column_slice(qr).dot(&(gamma * sig.eval(t, x, u)));
        }
    }
    if beta.iter().any(|c| *c != 0.0) {
        let dinv = spec.d_matrix(t).try_inverse().expect("D(t) invertible");
        v += DVector::from_column_slice(beta).dot(&(dinv * spec.h.eval(t, x, u)));
    }
    v
}

/// `ρ̃ δH + ½ Σ_r δσ_rᵀ Γᵀ P Γ δσ_r` for sample `i` at a retained step.
fn mp_integrand(spec: &SystemSpec, grid: &Grid, s: &Sample, sl: &AdjointSlice, i: usize, v: &[f64]) -> f64 {
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    let k = sl.k;
    let l = local(spec, grid, s, k);
    let y = &s.traj.y[k * n..(k + 1) * n];
    let p = &sl.p[i * n..(i + 1) * n];
    let q = &sl.q[i * k1 * n..(i + 1) * k1 * n];
    let beta = &sl.beta[i * k2..(i + 1) * k2];
    let h1 = hamiltonian(spec, l.t, y, &l.g, &l.gi, v, p, q, beta);
    let h0 = hamiltonian(spec, l.t, y, &l.g, &l.gi, &l.u, p, q, beta);
    let pp = from_row_major(n, &sl.pp[i * n * n..(i + 1) * n * n]);
    let gpg = l.g.transpose() * pp * &l.g;
    let mut second = 0.0;
    for sig in &spec.sigma {
        let ds = sig.eval(l.t, &l.x, v) - sig.eval(l.t, &l.x, &l.u);
        second += ds.dot(&(&gpg * &ds));
    }
    l.rho * (h1 - h0) + 0.5 * second
}

/// Observation features at step `k`: `1`, `ζ_k`, `ζ_k²`, and the mean of
/// `ζ` over the trailing quarter of the elapsed grid.
fn observation_features(spec: &SystemSpec, s: &Sample, k: usize) -> Vec<f64> {
    let k2 = spec.k2;
    let z = &s.traj.zeta;
    let w = (k / 4).max(1);
    let lo = k.saturating_sub(w);
    let mut f = vec![1.0];
    for c in 0..k2 {
        let cur = z[k * k2 + c];
        let avg = (lo..=k).map(|j| z[j * k2 + c]).sum::<f64>() / (k - lo + 1) as f64;
        f.extend([cur, cur * cur, avg]);
    }
    f
}

fn observation_feature_names(spec: &SystemSpec) -> Vec<String> {
    let mut v = vec!["1".to_string()];
    for c in 1..=spec.k2 {
        v.extend([format!("zeta{c}"), format!("zeta{c}^2"), format!("mean_window(zeta{c})")]);
    }
    v
}

#[derive(Debug, Clone, Serialize)]
pub struct MpConfig {
    pub times: usize,
    pub u_points: usize,
    /// Tolerance in regression standard errors.
    pub tol_factor: f64,
    /// Observation-state quantiles at which the conditional expectation is
    /// evaluated.
    pub quantiles: Vec<f64>,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self { times: 20, u_points: 20, tol_factor: 2.0, quantiles: vec![0.1, 0.5, 0.9] }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MpCell {
    pub k: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub quantile: f64,
    pub estimate: f64,
    pub se: f64,
    pub tol: f64,
}

impl MpCell {
    /// Amount by which the estimate falls below `−tol` (positive on
    /// violation).
    pub fn violation(&self) -> f64 {
        -self.estimate - self.tol
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MpReport {
    pub verdict: Verdict,
    pub steps: Vec<usize>,
    pub u_grid: Vec<Vec<f64>>,
    pub cells: Vec<MpCell>,
    pub worst: Option<MpCell>,
    pub feature_basis: Vec<String>,
    pub adjoint_basis: Vec<String>,
    pub adjoint_min_rank: usize,
    pub adjoint_residual_rms: f64,
    pub orthogonal_martingales: &'static str,
}

pub fn check_steps(grid: &Grid, count: usize) -> Vec<usize> {
    let last = grid.steps() - 1;
    if count <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..count).map(|j| (j * last + (count - 1) / 2) / (count - 1)).collect();
    v.dedup();
    v
}

pub fn control_grid(spec: &SystemSpec, points: usize) -> Vec<Vec<f64>> {
    let points = points.max(1);
    (0..points)
        .map(|j| {
            let s = if points == 1 { 0.5 } else { j as f64 / (points - 1) as f64 };
            spec.u_lower.iter().zip(&spec.u_upper).map(|(l, h)| l + s * (h - l)).collect()
        })
        .collect()
}

/// Estimates `E[ρ̃δH + ½tr{δσᵀΓᵀPΓδσ} | ℱ^ζ_t]` on the `(t, u)` grid for a
/// batch simulated under the candidate control.
pub fn mp_condition_check(spec: &SystemSpec, batch: &Batch, cfg: &MpConfig) -> Result<MpReport> {
    let grid = batch.grid;
    let steps = check_steps(&grid, cfg.times);
    let u_grid = control_grid(spec, cfg.u_points);
    let adj = solve_adjoints_lsmc(spec, batch, &steps.iter().copied().collect())?;
    mp_condition_with(spec, batch, &adj, &steps, &u_grid, cfg)
}

pub fn mp_condition_with(
    spec: &SystemSpec,
    batch: &Batch,
    adj: &AdjointSolution,
    steps: &[usize],
    u_grid: &[Vec<f64>],
    cfg: &MpConfig,
) -> Result<MpReport> {
    let grid = batch.grid;
    let ns = batch.len();
    let mut cells = Vec::new();
    for &k in steps {
        let sl = adj.slices.get(&k).ok_or_else(|| Error::Config(format!("adjoint slice for step {k} not retained")))?;
        let nf = observation_features(spec, &batch.samples[0], k).len();
        let design = DMatrix::from_fn(ns, nf, |i, j| observation_features(spec, &batch.samples[i], k)[j]);
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by(|&a, &b| {
            let za = batch.samples[a].traj.zeta[k * spec.k2];
            let zb = batch.samples[b].traj.zeta[k * spec.k2];
            za.total_cmp(&zb).then(a.cmp(&b))
        });
        let reps: Vec<(f64, usize)> = cfg
            .quantiles
            .iter()
            .map(|q| (*q, order[((q * (ns - 1) as f64).round() as usize).min(ns - 1)]))
            .collect();
        let targets = DMatrix::from_fn(ns, u_grid.len(), |_, _| 0.0);
        let mut targets = targets;
        let vals: Vec<Vec<f64>> = batch
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| u_grid.iter().map(|v| mp_integrand(spec, &grid, s, sl, i, v)).collect())
            .collect();
        for (i, row) in vals.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                targets[(i, j)] = *v;
            }
        }
        let lf = fit(&design, &targets)?;
        for (j, v) in u_grid.iter().enumerate() {
            for &(q, i) in &reps {
                let (estimate, se) = lf.predict_one(design.row(i).transpose().as_slice(), j);
                cells.push(MpCell { k, t: grid.time(k), u: v.clone(), quantile: q, estimate, se, tol: cfg.tol_factor * se });
            }
        }
    }
    let worst = cells.iter().max_by(|a, b| a.violation().total_cmp(&b.violation())).cloned();
    let verdict = match &worst {
        Some(w) if w.violation() > 0.0 => Verdict::Fail,
        _ => Verdict::Pass,
    };
    Ok(MpReport {
        verdict,
        steps: steps.to_vec(),
        u_grid: u_grid.to_vec(),
        cells,
        worst,
        feature_basis: observation_feature_names(spec),
        adjoint_basis: adj.basis.clone(),
        adjoint_min_rank: adj.min_rank,
        adjoint_residual_rms: adj.residual_rms.iter().sum::<f64>() / adj.residual_rms.len().max(1) as f64,
        orthogonal_martingales: "fixed to zero",
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub eps: f64,
    pub direct: Estimate,
    pub assembled: Estimate,
    pub difference: Estimate,
    pub agrees: bool,
}

/// Compares the directly simulated first-order expansion with its
/// adjoint-assembled form `Σ_{E_ε} h E[ρ̃δH + ½tr{δσᵀΓᵀPΓδσ}]`.
pub fn duality_check(spec: &SystemSpec, batch: &Batch, adj: &AdjointSolution, spike: &SpikeVariation) -> Result<DualityReport> {
    let grid = batch.grid;
    let h = grid.step();
    let ks = spike.steps(&grid);
    let bundle = variational_paths(spec, batch, spike)?;
    let mut v = spike.value.clone();
    spec.clamp_control(&mut v);
    let rows: Vec<Result<(f64, f64)>> = batch
        .samples
        .par_iter()
        .enumerate()
        .zip(&bundle.paths)
        .map(|((i, s), var)| {
            let direct = super::spike::hat_j_sample(spec, &grid, &s.transform, &s.traj, var, spike);
            let mut assembled = 0.0;
            for &k in &ks {
                let sl = adj.slices.get(&k).ok_or_else(|| Error::Config(format!("adjoint slice for step {k} not retained")))?;
                assembled += h * mp_integrand(spec, &grid, s, sl, i, &v);
            }
            Ok((direct, assembled))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let difference = Estimate::from_samples(&diff);
    Ok(DualityReport {
        eps: spike.eps,
        direct: Estimate::from_samples(&d),
        assembled: Estimate::from_samples(&a),
        agrees: difference.mean.abs() <= 3.0 * difference.se,
        difference,
    })
}

/// Per-sample sum over the spike of the terms asserted to be `o(ε)` in
/// the assembly of the expansion.
fn discard_sample(
    spec: &SystemSpec,
    grid: &Grid,
    s: &Sample,
    adj: &AdjointSolution,
    i: usize,
    var: &VariationalPaths,
    spike: &SpikeVariation,
    v: &[f64],
) -> Result<f64> {
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    let h = grid.step();
    let mut total = 0.0;
    for k in spike.steps(grid) {
        let sl = adj.slices.get(&k).ok_or_else(|| Error::Config(format!("adjoint slice for step {k} not retained")))?;
        let l = local(spec, grid, s, k);
        let (t, x, u) = (l.t, &l.x[..], &l.u[..]);
        let y1 = DVector::from_column_slice(&var.y1[k * n..(k + 1) * n]);
        let x1 = &l.gi * &y1;
        let (rho1, rb) = (var.rho1[k], l.rho);
        let pp = from_row_major(n, &sl.pp[i * n * n..(i + 1) * n * n]);
        let mut term = 0.0;
        let mut inner = DMatrix::zeros(n, n);
        for (r, sig) in spec.sigma.iter().enumerate() {
            let qr = DVector::from_column_slice(&sl.q[(i * k1 + r) * n..(i * k1 + r + 1) * n]);
            let qqr = from_row_major(n, &sl.qq[((i * k1 + r) * n * n)..((i * k1 + r + 1) * n * n)]);
            let sx = sig.jacobian(t, x, u);
            let dsx = sig.jacobian(t, x, v) - &sx;
            let ds = &l.g * (sig.eval(t, x, v) - sig.eval(t, x, u));
            term += rb * (&l.g * &dsx * &x1).dot(&qr);
            let a = &l.g * &sx * &x1;
            inner += &a * ds.transpose() + &ds * a.transpose();
            let qterm = &qqr * (&y1 * ds.transpose() + &ds * y1.transpose());
            term += 0.5 * qterm.trace();
            term += rho1 * ds.dot(&qr);
        }
        term += 0.5 * (&pp * inner).trace();
        if !spec.h.is_zero() {
            let dh = &l.dinv * (spec.h.eval(t, x, v) - spec.h.eval(t, x, u));
            let dhx = &l.dinv * (spec.h.jacobian(t, x, v) - spec.h.jacobian(t, x, u)) * &x1;
            for r2 in 0..k2 {
                let beta = sl.beta[i * k2 + r2];
                term += (rho1 * dh[r2] + rb * dhx[r2]) * beta;
                let qt = DVector::from_column_slice(&sl.qt[(i * k2 + r2) * n..(i * k2 + r2 + 1) * n]);
                term += rb * dh[r2] * y1.dot(&qt);
            }
        }
        total += h * term;
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscardReport {
    pub eps: Vec<f64>,
    pub values: Vec<Estimate>,
    pub slope: Option<f64>,
}

/// Magnitude of the discarded terms against `ε`; `adj` must retain slices
/// on the longest spike.
pub fn discard_study(
    spec: &SystemSpec,
    batch: &Batch,
    adj: &AdjointSolution,
    tau: f64,
    value: &[f64],
    eps: &[f64],
) -> Result<DiscardReport> {
    let mut values = Vec::with_capacity(eps.len());
    let mut v = value.to_vec();
    spec.clamp_control(&mut v);
    for &e in eps {
        let spike = SpikeVariation::new(tau, e, value.to_vec(), batch.grid.horizon)?;
        let bundle = variational_paths(spec, batch, &spike)?;
        let per = batch
            .samples
            .par_iter()
            .enumerate()
            .zip(&bundle.paths)
            .map(|((i, s), var)| discard_sample(spec, &batch.grid, s, adj, i, var, &spike, &v))
            .collect::<Result<Vec<f64>>>()?;
        values.push(Estimate::from_samples(&per));
    }
    let slope = values.iter().all(|e| e.mean != 0.0).then(|| {
        let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = values.iter().map(|e| e.mean.abs().ln()).collect();
        linear_fit(&lx, &ly).0
    });
    Ok(DiscardReport { eps: eps.to_vec(), values, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp::lq::lq_optimal;
    use crate::sde::{run_batch, BatchConfig, ConstantControl, ScheduleControl, ShiftedControl};
    use crate::transform::MatrixPath;

    #[test]
    fn zero_data_gives_zero_adjoints() {
        let src = crate::system::preset_source("fully_observed_lq")
            .unwrap()
            .replace("f = \"0.5*q*x[1]^2 + 0.5*r*u[1]^2\"", "f = \"0\"")
            .replace("phi = \"0.5*g*x[1]^2\"", "phi = \"0\"");
        let s = SystemSpec::from_toml(&src).unwrap();
        let b = run_batch(&s, &BatchConfig::new(50, 5, 3), &ConstantControl(vec![0.1])).unwrap();
        let adj = solve_adjoints_lsmc(&s, &b, &[0usize, 10].into_iter().collect()).unwrap();
        for k in 0..=b.grid.steps() {
            assert_eq!(adj.mean_alpha[k], 0.0);
            assert!(adj.mean_p[k].iter().chain(&adj.mean_pp[k]).all(|v| *v == 0.0));
        }
        assert!(adj.slices[&10].beta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn terminal_conditions_are_exact() {
        let s = SystemSpec::preset("lq_toy").unwrap();
        let b = run_batch(&s, &BatchConfig::new(40, 5, 4), &ConstantControl(vec![0.3])).unwrap();
        let adj = solve_adjoints_lsmc(&s, &b, &BTreeSet::new()).unwrap();
        let n = b.grid.steps();
        for (i, smp) in b.samples.iter().enumerate() {
            let x = smp.traj.state(n, 1)[0];
            assert_eq!(adj.terminal.0[i], 0.5 * x * x);
            assert_eq!(adj.terminal.1[i], x);
            assert_eq!(adj.terminal.2[i], smp.traj.rho[n]);
        }
    }

    #[test]
    fn hamiltonian_reduces_to_running_cost() {
        let s = SystemSpec::preset("partially_observed_lq").unwrap();
        let id = DMatrix::identity(2, 2);
        let h = hamiltonian(&s, 0.3, &[0.4, -0.2], &id, &id, &[0.5], &[0.0; 2], &[0.0; 2], &[0.0; 2]);
        assert!((h - s.f_value(0.3, &[0.4, -0.2], &[0.5])).abs() < 1e-15);
        let h2 = hamiltonian(&s, 0.3, &[0.4, -0.2], &id, &id, &[0.5], &[1.0, 0.0], &[0.0; 2], &[0.0; 2]);
        let b1 = -0.4 * 0.4 + 0.3 * -0.2;
        assert!((h2 - h - b1).abs() < 1e-15);
    }

    fn fully_observed(samples: usize, level: u32) -> (SystemSpec, ScheduleControl, crate::mp::lq::LqSolution) {
        let s = SystemSpec::preset("fully_observed_lq").unwrap();
        let grid = Grid::new(s.horizon, level);
        let sol = lq_optimal(&s, &grid, &MatrixPath::identity(grid.times(), 1)).unwrap();
        let _ = samples;
        (s.clone(), ScheduleControl::new(s.horizon, sol.controls.clone()), sol)
    }

    #[test]
    fn adjoint_mean_matches_riccati_costate() {
        let (s, ctl, sol) = fully_observed(2000, 7);
        let b = run_batch(&s, &BatchConfig::new(2000, 7, 8), &ctl).unwrap();
        let adj = solve_adjoints_lsmc(&s, &b, &BTreeSet::new()).unwrap();
        let num: f64 = adj.mean_p.iter().zip(&sol.costate).map(|(a, b)| (a[0] - b[0]).powi(2)).sum();
        let den: f64 = sol.costate.iter().map(|b| b[0] * b[0]).sum();
        assert!((num / den).sqrt() < 0.05, "relative L2 error {}", (num / den).sqrt());
    }

    #[test]
    fn expected_hamiltonian_is_minimized_at_optimum() {
        let (s, ctl, sol) = fully_observed(2000, 6);
        let b = run_batch(&s, &BatchConfig::new(2000, 6, 9), &ctl).unwrap();
        let k = 20;
        let adj = solve_adjoints_lsmc(&s, &b, &[k].into_iter().collect()).unwrap();
        let sl = &adj.slices[&k];
        let id = DMatrix::identity(1, 1);
        let us: Vec<f64> = (0..121).map(|j| -3.0 + 0.05 * j as f64).collect();
        let eh: Vec<f64> = us
            .iter()
            .map(|u| {
                (0..b.len())
                    .map(|i| {
                        let y = &b.samples[i].traj.y[k..k + 1];
                        hamiltonian(&s, b.grid.time(k), y, &id, &id, &[*u], &sl.p[i..i + 1], &sl.q[i..i + 1], &[0.0])
                    })
                    .sum::<f64>()
                    / b.len() as f64
            })
            .collect();
        let best = us[eh.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
        assert!((best - sol.controls[k][0]).abs() <= 0.05, "{best} vs {}", sol.controls[k][0]);
    }

    #[test]
    fn singleton_control_set_passes_vacuously() {
        let src = crate::system::preset_source("fully_observed_lq")
            .unwrap()
            .replace("lower = [-3.0]", "lower = [0.25]")
            .replace("upper = [3.0]", "upper = [0.25]");
        let s = SystemSpec::from_toml(&src).unwrap();
        let b = run_batch(&s, &BatchConfig::new(100, 5, 1), &ConstantControl(vec![0.25])).unwrap();
        let rep = mp_condition_check(&s, &b, &MpConfig { times: 4, u_points: 3, ..MpConfig::default() }).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(rep.cells.iter().all(|c| c.estimate.abs() < 1e-12));
    }

    #[test]
    fn shifted_control_is_flagged() {
        let (s, ctl, _) = fully_observed(1000, 6);
        let shifted = ShiftedControl { base: &ctl, shift: vec![0.5] };
        let b = run_batch(&s, &BatchConfig::new(1000, 6, 12), &shifted).unwrap();
        let rep = mp_condition_check(&s, &b, &MpConfig { times: 5, u_points: 7, ..MpConfig::default() }).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
    }
}

//! Exact moment propagation and the discrete Riccati solution for
//! linear-quadratic systems with deterministic controls, in the transformed
//! coordinates `Y = ΓX` for a fixed `Γ` path.
//!
//! Requirements: `b` affine in `(x, u)`, each `σ_r` affine in `u` and free
//! of `x`, `f` and `Φ` quadratic without `x·u` cross terms. The cost uses
//! left-point time quadrature, matching [`Quadrature::LeftPoint`].
//!
//! [`Quadrature::LeftPoint`]: crate::sde::Quadrature::LeftPoint

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sde::Grid;
use crate::system::SystemSpec;
use crate::transform::MatrixPath;

/// Coefficients at one time in original coordinates.
struct Slice {
    b0: DMatrix<f64>,
    b1: DMatrix<f64>,
    bc: DVector<f64>,
    /// Per Brownian component: constant column and `u`-Jacobian.
    s0: Vec<DVector<f64>>,
    s1: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    ql: DVector<f64>,
    r: DMatrix<f64>,
    rl: DVector<f64>,
    fc: f64,
}

fn probe_points(n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..3)
        .map(|k| {
            let x = (0..n).map(|i| 0.37 * (i + 1) as f64 - 0.61 * k as f64).collect();
            let u = (0..d).map(|i| 0.29 * (i + 2) as f64 * if k == 1 { -1.0 } else { 1.0 }).collect();
            (x, u)
        })
        .collect()
}

fn not_lq(what: &str) -> Error {
    Error::Config(format!("system is not linear-quadratic: {what}"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn slice(spec: &SystemSpec, t: f64) -> Result<Slice> {
    let (n, d) = (spec.n, spec.d);
    let (zx, zu) = (vec![0.0; n], vec![0.0; d]);
    let b0 = spec.b.jacobian(t, &zx, &zu);
    let b1 = spec.b.u_jacobian(t, &zx, &zu);
    let bc = spec.b.eval(t, &zx, &zu);
    let s0: Vec<DVector<f64>> = spec.sigma.iter().map(|s| s.eval(t, &zx, &zu)).collect();
    let s1: Vec<DMatrix<f64>> = spec.sigma.iter().map(|s| s.u_jacobian(t, &zx, &zu)).collect();
    let q = spec.f.hessian(0, t, &zx, &zu);
    let ql = spec.f.jacobian(t, &zx, &zu).row(0).transpose();
    let rl = spec.f.u_jacobian(t, &zx, &zu).row(0).transpose();
    let r = DMatrix::from_fn(d, d, |i, j| {
        let mut e = zu.clone();
        e[j] = 1.0;
        spec.f.u_jacobian(t, &zx, &e)[(0, i)] - rl[i]
    });
    let fc = spec.f_value(t, &zx, &zu);
    for (x, u) in probe_points(n, d) {
        let (xv, uv) = (DVector::from_column_slice(&x), DVector::from_column_slice(&u));
        let b = spec.b.eval(t, &x, &u);
        let bm = &b0 * &xv + &b1 * &uv + &bc;
        if b.iter().zip(bm.iter()).any(|(p, q)| !close(*p, *q)) {
            return Err(not_lq("drift is not affine in (x, u)"));
        }
        for (r, s) in spec.sigma.iter().enumerate() {
            let sv = s.eval(t, &x, &u);
            let sm = &s0[r] + &s1[r] * &uv;
            if sv.iter().zip(sm.iter()).any(|(p, q)| !close(*p, *q)) {
                return Err(not_lq("diffusion must be affine in u and free of x"));
            }
        }
        let f = spec.f_value(t, &x, &u);
        let fm = fc + 0.5 * xv.dot(&(&q * &xv)) + ql.dot(&xv) + 0.5 * uv.dot(&(&r * &uv)) + rl.dot(&uv);
        if !close(f, fm) {
            return Err(not_lq("running cost is not a separable quadratic"));
        }
    }
    Ok(Slice { b0, b1, bc, s0, s1, q, ql, r, rl, fc })
}

struct Terminal {
    g: DMatrix<f64>,
    gl: DVector<f64>,
    gc: f64,
}

fn terminal(spec: &SystemSpec) -> Result<Terminal> {
    let n = spec.n;
    let zx = vec![0.0; n];
    let g = spec.phi.hessian(0, spec.horizon, &zx, &[]);
    let gl = spec.phi.jacobian(spec.horizon, &zx, &[]).row(0).transpose();
    let gc = spec.phi_value(&zx);
    for (x, _) in probe_points(n, 0) {
        let xv = DVector::from_column_slice(&x);
        if !close(spec.phi_value(&x), gc + 0.5 * xv.dot(&(&g * &xv)) + gl.dot(&xv)) {
            return Err(not_lq("terminal cost is not quadratic"));
        }
    }
    Ok(Terminal { g, gl, gc })
}

/// Per-step data in `Y` coordinates.
struct Step {
    m: DMatrix<f64>,
    g: DMatrix<f64>,
    c: DVector<f64>,
    /// `Γσ` constant and `u` parts per Brownian component.
    s0: Vec<DVector<f64>>,
    s1: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    ql: DVector<f64>,
    r: DMatrix<f64>,
    rl: DVector<f64>,
    fc: f64,
}

struct Model {
    h: f64,
    steps: Vec<Step>,
    g: DMatrix<f64>,
    gl: DVector<f64>,
    gc: f64,
}

fn model(spec: &SystemSpec, grid: &Grid, gamma: &MatrixPath) -> Result<Model> {
    if gamma.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch(format!("Γ has {} points, grid {}", gamma.len(), grid.steps() + 1)));
    }
    let inv = gamma.inverses.as_ref().ok_or_else(|| Error::Config("Γ path without inverses".into()))?;
    let h = grid.step();
    let n = spec.n;
    let id = DMatrix::<f64>::identity(n, n);
    let mut steps = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let s = slice(spec, grid.time(k))?;
        let (gk, gi) = (&gamma.values[k], &inv[k]);
        steps.push(Step {
            m: &id + gk * &s.b0 * gi * h,
            g: gk * &s.b1,
            c: gk * &s.bc,
            s0: s.s0.iter().map(|v| gk * v).collect(),
            s1: s.s1.iter().map(|m| gk * m).collect(),
            q: gi.transpose() * &s.q * gi,
            ql: gi.transpose() * &s.ql,
            r: s.r,
            rl: s.rl,
            fc: s.fc,
        });
    }
    let t = terminal(spec)?;
    let gi = &inv[grid.steps()];
    Ok(Model { h, steps, g: gi.transpose() * &t.g * gi, gl: gi.transpose() * &t.gl, gc: t.gc })
}

/// Expected left-point cost of a deterministic control schedule (`N × d`).
pub fn lq_expected_cost(spec: &SystemSpec, grid: &Grid, gamma: &MatrixPath, controls: &[Vec<f64>]) -> Result<f64> {
    let md = model(spec, grid, gamma)?;
    let n = spec.n;
    let mut m = DVector::from_column_slice(&spec.x0);
    let mut v = DMatrix::<f64>::zeros(n, n);
    let mut total = 0.0;
    for (st, u) in md.steps.iter().zip(controls) {
        let u = DVector::from_column_slice(u);
        total += md.h
            * (0.5 * ((&st.q * (&v + &m * m.transpose())).trace()) + st.ql.dot(&m) + 0.5 * u.dot(&(&st.r * &u)) + st.rl.dot(&u) + st.fc);
        let mut vn = &st.m * &v * st.m.transpose();
        for (a, b) in st.s0.iter().zip(&st.s1) {
            let col = a + b * &u;
            vn += &col * col.transpose() * md.h;
        }
        m = &st.m * &m + (&st.g * &u + &st.c) * md.h;
        v = vn;
    }
    total += 0.5 * (&md.g * (&v + &m * m.transpose())).trace() + md.gl.dot(&m) + md.gc;
    Ok(total)
}

/// Discrete optimum over deterministic controls.
#[derive(Debug, Clone, Serialize)]
pub struct LqSolution {
    /// `ū_k`, one row per step.
    pub controls: Vec<Vec<f64>>,
    /// Mean of `Y_k`.
    pub mean: Vec<Vec<f64>>,
    /// Mean of the first-order adjoint, `E[p_k]`.
    pub costate: Vec<Vec<f64>>,
    pub expected_cost: f64,
    pub within_bounds: bool,
}

pub fn lq_optimal(spec: &SystemSpec, grid: &Grid, gamma: &MatrixPath) -> Result<LqSolution> {
    let md = model(spec, grid, gamma)?;
    let (n, h) = (spec.n, md.h);
    let steps = md.steps.len();
    let mut psi = md.g.clone();
    let mut s = md.g.clone();
    let mut sl = md.gl.clone();
    let mut gains = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); steps];
    for k in (0..steps).rev() {
        let st = &md.steps[k];
        let mut r = st.r.clone();
        let mut rl = st.rl.clone();
        for (a, b) in st.s0.iter().zip(&st.s1) {
            r += b.transpose() * &psi * b;
            rl += b.transpose() * &psi * a;
        }
        let w = &r + st.g.transpose() * &s * &st.g * h;
        let winv = w.clone().try_inverse().ok_or(Error::Singular(grid.time(k)))?;
        let affine = &rl + st.g.transpose() * (&s * &st.c * h + &sl);
        let gain = &winv * st.g.transpose() * &s * &st.m;
        let offset = &winv * &affine;
        let smg = st.m.transpose() * &s * &st.g;
        let s_next = &st.q * h + st.m.transpose() * &s * &st.m - &smg * &winv * smg.transpose() * h;
        let sl_next = &st.ql * h + st.m.transpose() * (&s * &st.c * h + &sl) - &smg * &winv * &affine * h;
        psi = &st.q * h + st.m.transpose() * &psi * &st.m;
        s = (&s_next + s_next.transpose()) * 0.5;
        sl = sl_next;
        gains[k] = (gain, offset);
    }
    let mut m = DVector::from_column_slice(&spec.x0);
    let mut mean = vec![m.as_slice().to_vec()];
    let mut controls = Vec::with_capacity(steps);
    for (st, (gain, offset)) in md.steps.iter().zip(&gains) {
        let u = -(gain * &m) - offset;
        m = &st.m * &m + (&st.g * &u + &st.c) * h;
        controls.push(u.as_slice().to_vec());
        mean.push(m.as_slice().to_vec());
    }
    let mut lam = &md.g * DVector::from_column_slice(&mean[steps]) + &md.gl;
    let mut costate = vec![vec![0.0; n]; steps + 1];
    costate[steps] = lam.as_slice().to_vec();
    for k in (0..steps).rev() {
        let st = &md.steps[k];
        let mk = DVector::from_column_slice(&mean[k]);
        lam = st.m.transpose() * &lam + (&st.q * &mk + &st.ql) * h;
        costate[k] = lam.as_slice().to_vec();
    }
    let within_bounds = controls
        .iter()
        .all(|u| u.iter().zip(&spec.u_lower).zip(&spec.u_upper).all(|((v, l), up)| *v >= *l - 1e-12 && *v <= *up + 1e-12));
    let expected_cost = lq_expected_cost(spec, grid, gamma, &controls)?;
    Ok(LqSolution { controls, mean, costate, expected_cost, within_bounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::rng_for;
    use crate::sde::{DriverFactory, transform_paths};
    use rand::Rng;

    fn check_stationary(spec: &SystemSpec, grid: &Grid, gamma: &MatrixPath) {
        let sol = lq_optimal(spec, grid, gamma).unwrap();
        let j0 = lq_expected_cost(spec, grid, gamma, &sol.controls).unwrap();
        assert!((j0 - sol.expected_cost).abs() < 1e-14);
        let mut rng = rng_for(7, 0);
        for _ in 0..20 {
            let mut c = sol.controls.clone();
            let k = rng.random_range(0..c.len());
            let delta = 0.5 * (rng.random::<f64>() - 0.5);
            c[k][0] += delta;
            let j = lq_expected_cost(spec, grid, gamma, &c).unwrap();
            assert!(j > j0, "perturbation lowered the cost");
            // Quadratic objective: the first variation vanishes.
            let mut c2 = sol.controls.clone();
            c2[k][0] -= delta;
            let j2 = lq_expected_cost(spec, grid, gamma, &c2).unwrap();
            assert!((j - j2).abs() < 1e-10 * (1.0 + j.abs()), "odd part {}", j - j2);
        }
    }

    #[test]
    fn optimum_is_stationary_for_presets() {
        for name in ["fully_observed_lq", "lq_toy"] {
            let s = SystemSpec::preset(name).unwrap();
            let grid = Grid::new(s.horizon, 6);
            check_stationary(&s, &grid, &MatrixPath::identity(grid.times(), s.n));
        }
        let s = SystemSpec::preset("rough_lq").unwrap();
        let grid = Grid::new(s.horizon, 6);
        let f = DriverFactory::new(&s, 1, 8, Some(3)).unwrap();
        let tr = transform_paths(&s, &f.drivers(0), &grid).unwrap();
        check_stationary(&s, &grid, &tr.gamma);
    }

    #[test]
    fn scalar_costate_matches_backward_recursion() {
        let s = SystemSpec::preset("fully_observed_lq").unwrap();
        let grid = Grid::new(s.horizon, 5);
        let sol = lq_optimal(&s, &grid, &MatrixPath::identity(grid.times(), 1)).unwrap();
        let h = grid.step();
        // Stationarity of the Hamiltonian: r ū_k + b1 λ_{k+1} = 0.
        for k in 0..grid.steps() {
            assert!((sol.controls[k][0] + sol.costate[k + 1][0]).abs() < 1e-12);
        }
        let n = grid.steps();
        assert!((sol.costate[n][0] - sol.mean[n][0]).abs() < 1e-14);
        assert!((sol.costate[0][0] - ((1.0 + 0.2 * h) * sol.costate[1][0] + h * sol.mean[0][0])).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonlinear_drift() {
        let src = crate::system::preset_source("lq_toy").unwrap().replace("b0*x[1] + b1*u[1]", "sin(x[1]) + u[1]");
        let s = SystemSpec::from_toml(&src).unwrap();
        let grid = Grid::new(1.0, 3);
        assert!(lq_optimal(&s, &grid, &MatrixPath::identity(grid.times(), 1)).is_err());
    }
}

//! Linear driver equations `dΓ = −Γ Σ_j A_j(t) dB^j`, solved by direct
//! Runge–Kutta quadrature and through the CBHD exponential, plus inversion
//! and Wong–Zakai refinement studies.

use log::debug;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::{dyadic_approx, SampledPath};
use crate::lie::{cbhd_log_at, matrix_exp, MatrixFamily};
use crate::lift::{lift_piecewise_linear, p_var_distance};
use crate::util::least_squares_slope;

#[derive(Debug, Clone)]
pub struct MatrixPath {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    pub inverses: Option<Vec<DMatrix<f64>>>,
}

impl MatrixPath {
    pub fn identity(times: Vec<f64>, size: usize) -> Self {
        let values = vec![DMatrix::identity(size, size); times.len()];
        Self { times, inverses: Some(values.clone()), values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn size(&self) -> usize {
        self.values.first().map(|m| m.nrows()).unwrap_or(0)
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().expect("non-empty path")
    }

    /// `max_t ‖Γ_t Γ_t⁻¹ − I‖_F` when inverses are stored.
    pub fn inverse_defect(&self) -> Option<f64> {
        let inv = self.inverses.as_ref()?;
        let id = DMatrix::identity(self.size(), self.size());
        Some(self.values.iter().zip(inv).map(|(g, gi)| (g * gi - &id).norm()).fold(0.0, f64::max))
    }

    /// `max_t ‖self_t − other_t‖_F` over common grid times.
    pub fn sup_distance(&self, other: &MatrixPath) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::GridMismatch(format!("{} vs {} matrix path points", self.len(), other.len())));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }
}

fn generator<F: MatrixFamily + ?Sized>(family: &F, t: f64, v: &[f64]) -> DMatrix<f64> {
    let n = family.size();
    let mut m = DMatrix::zeros(n, n);
    for (j, vj) in v.iter().enumerate() {
        if *vj != 0.0 {
            m += family.eval(j, t) * *vj;
        }
    }
    m
}

/// Classical RK4 for `Γ' = −Γ Σ_j A_j(t) v_j` with `v` the per-interval
/// driver velocity, `substeps` steps per grid interval.
pub fn solve_gamma_ode_direct<F: MatrixFamily + ?Sized>(
    family: &F,
    driver: &SampledPath,
    substeps: usize,
) -> Result<MatrixPath> {
    if driver.dim != family.count() {
        return Err(Error::GridMismatch(format!(
            "driver dimension {} but {} generators",
            driver.dim,
            family.count()
        )));
    }
    let n = family.size();
    let substeps = substeps.max(1);
    let mut g = DMatrix::identity(n, n);
    let mut values = Vec::with_capacity(driver.len());
    values.push(g.clone());
    let mut v = vec![0.0; driver.dim];
    for l in 0..driver.len() - 1 {
        driver.velocity(l, &mut v);
        let (a, b) = (driver.times[l], driver.times[l + 1]);
        let dt = (b - a) / substeps as f64;
        if v.iter().any(|x| *x != 0.0) {
            let rhs = |t: f64, y: &DMatrix<f64>| -(y * generator(family, t, &v));
            for s in 0..substeps {
                let t = a + s as f64 * dt;
                let k1 = rhs(t, &g);
                let k2 = rhs(t + 0.5 * dt, &(&g + &k1 * (0.5 * dt)));
                let k3 = rhs(t + 0.5 * dt, &(&g + &k2 * (0.5 * dt)));
                let k4 = rhs(t + dt, &(&g + &k3 * dt));
                g += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            }
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(l));
        }
        values.push(g.clone());
    }
    Ok(MatrixPath { times: driver.times.clone(), values, inverses: None })
}

/// `Γ_t = exp(K_t)` at the requested times, with `exp(−K_t)` as inverses.
pub fn solve_gamma_cbhd<F: MatrixFamily + ?Sized>(family: &F, driver: &SampledPath, times: &[f64]) -> Result<MatrixPath> {
    let ks = cbhd_log_at(family, driver, times)?;
    let hint = Some(family.size());
    let values = ks.iter().map(|k| matrix_exp(k, hint)).collect();
    let inverses = ks.iter().map(|k| matrix_exp(&-k, hint)).collect();
    Ok(MatrixPath { times: times.to_vec(), values, inverses: Some(inverses) })
}

/// 2-norm condition number.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), s| (a.max(*s), b.min(*s)));
    if mn == 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

/// Per-time LU inverses, ignoring any stored inverses.
pub fn lu_inverses(path: &MatrixPath) -> Result<Vec<DMatrix<f64>>> {
    path.values
        .iter()
        .zip(&path.times)
        .map(|(m, &t)| {
            let cond = condition_number(m);
            debug!("t = {t:.6}: condition number {cond:.3e}");
            if !cond.is_finite() || cond > 1e14 {
                return Err(Error::Singular(t));
            }
            m.clone().lu().try_inverse().ok_or(Error::Singular(t))
        })
        .collect()
}

/// The inverse path; uses stored exponential inverses when present.
pub fn invert_path(path: &MatrixPath) -> Result<MatrixPath> {
    let inv = match &path.inverses {
        Some(inv) => inv.clone(),
        None => lu_inverses(path)?,
    };
    Ok(MatrixPath { times: path.times.clone(), values: inv, inverses: Some(path.values.clone()) })
}

/// Attach LU inverses to a path that lacks them.
pub fn with_inverses(mut path: MatrixPath) -> Result<MatrixPath> {
    if path.inverses.is_none() {
        path.inverses = Some(lu_inverses(&path)?);
    }
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct WongZakaiReport {
    pub levels: Vec<u32>,
    pub finest: u32,
    pub sup_distances: Vec<f64>,
    pub fitted_slope: f64,
    pub strictly_decreasing: bool,
    /// Lift distances to the finest level, reported for `H < 1/2`.
    pub p_var: Option<Vec<f64>>,
    pub p: Option<f64>,
}

/// Solve `Γ^{ε_k}` for each level and compare with the finest level of the
/// sample on its full grid.
pub fn wong_zakai_study<F: MatrixFamily + ?Sized>(
    family: &F,
    raw: &SampledPath,
    levels: &[u32],
    hurst: f64,
    substeps: usize,
) -> Result<WongZakaiReport> {
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("levels must be strictly ascending".into()));
    }
    if let Some(&k) = levels.last() {
        if k > raw.levels {
            return Err(Error::Level { requested: k, available: raw.levels });
        }
    }
    let finest_driver = dyadic_approx(raw, raw.levels)?;
    let reference = solve_gamma_ode_direct(family, &finest_driver, substeps)?;
    let rough = hurst < 0.5;
    let p = 2.7;
    let finest_lift = rough.then(|| lift_piecewise_linear(&finest_driver.restrict(raw.levels).expect("own level")));
    let mut sup = Vec::with_capacity(levels.len());
    let mut pv = Vec::new();
    for &k in levels {
        let d = dyadic_approx(raw, k)?;
        let g = solve_gamma_ode_direct(family, &d, substeps)?;
        sup.push(g.sup_distance(&reference)?);
        if let Some(fl) = &finest_lift {
            pv.push(p_var_distance(&lift_piecewise_linear(&d), fl, p)?);
        }
    }
    let xs: Vec<f64> = levels.iter().map(|&k| k as f64).collect();
    let ys: Vec<f64> = sup.iter().map(|d| d.max(1e-300).log2()).collect();
    let fitted_slope = if levels.len() >= 2 { least_squares_slope(&xs, &ys) } else { f64::NAN };
    let strictly_decreasing = sup.windows(2).all(|w| w[1] < w[0]);
    Ok(WongZakaiReport {
        levels: levels.to_vec(),
        finest: raw.levels,
        sup_distances: sup,
        fitted_slope,
        strictly_decreasing,
        p_var: rough.then_some(pv),
        p: rough.then_some(p),
    })
}

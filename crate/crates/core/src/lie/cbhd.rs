//! Nilpotent CBHD log-series `K_t` with `Γ_t = exp(K_t)` for
//! `dΓ = −Γ Σ_j A_j(t) dB^j` driven by a piecewise-linear path.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::iterated::Segments;
use super::multiple::{contract_words, pl_segments, slot_tensor, Kernel};
use super::signature::PlSignature;
use super::{cbhd_coefficient, commutator_words, nest, permutations, verify_nilpotent, MatrixFamily};
use crate::error::{Error, Result};
use crate::fbm::SampledPath;

/// Largest series order evaluated without complaint.
pub const ORDER_GUARD: usize = 6;

#[derive(Debug, Clone, Serialize)]
pub struct CbhdTerm {
    pub order: usize,
    /// Generator/driver index of each integration slot (0-based).
    pub indices: Vec<usize>,
    /// Nesting order of the slots, a permutation of `1..=n`.
    pub permutation: Vec<usize>,
    pub coefficient: f64,
    /// Coefficient times the multiple integral of the nested commutator.
    pub value: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CbhdSeries {
    pub t: f64,
    pub order: usize,
    pub terms: Vec<CbhdTerm>,
    pub k: Vec<Vec<f64>>,
}

impl CbhdSeries {
    pub fn matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.k)
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn tuples(m: usize, n: usize) -> Vec<Vec<usize>> {
    (0..m.pow(n as u32))
        .map(|mut q| {
            let mut v = vec![0; n];
            for slot in (0..n).rev() {
                v[slot] = q % m;
                q /= m;
            }
            v
        })
        .collect()
}

fn check_family<F: MatrixFamily + ?Sized>(family: &F, order: usize) -> Result<()> {
    if order > ORDER_GUARD {
        return Err(Error::OrderGuard(order));
    }
    let rep = verify_nilpotent(family, 2000, 0x4e11);
    if !rep.ok {
        return Err(Error::Nilpotency(rep.worst));
    }
    Ok(())
}

/// Per-order, per-tuple, per-permutation contributions at each time.
/// `order` overrides the declared nilpotency order.
fn series_terms<F: MatrixFamily + ?Sized>(
    family: &F,
    driver: &SampledPath,
    times: &[f64],
    order: usize,
) -> Result<Vec<(usize, Vec<usize>, Vec<usize>, f64, Vec<DMatrix<f64>>)>> {
    let m = family.count();
    let d = family.size();
    if driver.dim != m {
        return Err(Error::GridMismatch(format!("driver dimension {} but {} generators", driver.dim, m)));
    }
    let seg: Segments = pl_segments(driver)?;
    let sig = if family.is_constant() { Some(PlSignature::new(&seg_path(driver)?, order)) } else { None };
    let mut jobs = Vec::new();
    for n in 1..=order {
        for idx in tuples(m, n) {
            jobs.push((n, idx));
        }
    }
    let per: Vec<Vec<_>> = jobs
        .par_iter()
        .map(|(n, idx)| {
            let n = *n;
            let perms = permutations(n);
            if let Some(sig) = &sig {
                let mats: Vec<DMatrix<f64>> = idx.iter().map(|&j| family.eval(j, 0.0)).collect();
                let words: Vec<f64> = times.iter().map(|&t| sig.word(idx, t)).collect();
                perms
                    .into_iter()
                    .map(|p| {
                        let c = cbhd_coefficient(&p).unwrap();
                        let nested = nest(&p.iter().map(|&k| mats[k - 1].clone()).collect::<Vec<_>>());
                        let vals = words.iter().map(|w| &nested * (c * w)).collect();
                        (n, idx.clone(), p, c, vals)
                    })
                    .collect()
            } else {
                let kernel = Kernel::nested(family, idx, &(0..n).collect::<Vec<_>>());
                let tensors = slot_tensor(&kernel, &seg, idx, times);
                perms
                    .into_iter()
                    .map(|p| {
                        let c = cbhd_coefficient(&p).unwrap();
                        let order: Vec<usize> = p.iter().map(|k| k - 1).collect();
                        let words = commutator_words(&order);
                        let vals = tensors.iter().map(|tt| contract_words(tt, d, n, &words) * c).collect();
                        (n, idx.clone(), p, c, vals)
                    })
                    .collect()
            }
        })
        .collect();
    Ok(per.into_iter().flatten().collect())
}

fn seg_path(driver: &SampledPath) -> Result<SampledPath> {
    match driver.kind {
        crate::fbm::PathKind::PiecewiseLinear { level } if level < driver.levels => driver.restrict(level),
        _ => Ok(driver.clone()),
    }
}

/// Full series dump at a single time, using the declared order.
pub fn cbhd_log<F: MatrixFamily + ?Sized>(family: &F, driver: &SampledPath, t: f64) -> Result<CbhdSeries> {
    cbhd_log_order(family, driver, t, family.nilpotency())
}

/// Series dump with an explicit truncation order (at most the guard).
pub fn cbhd_log_order<F: MatrixFamily + ?Sized>(
    family: &F,
    driver: &SampledPath,
    t: f64,
    order: usize,
) -> Result<CbhdSeries> {
    check_family(family, order)?;
    let d = family.size();
    let mut k = DMatrix::zeros(d, d);
    let mut terms = Vec::new();
    for (n, idx, p, c, vals) in series_terms(family, driver, &[t], order)? {
        k += &vals[0];
        terms.push(CbhdTerm { order: n, indices: idx, permutation: p, coefficient: c, value: matrix_rows(&vals[0]) });
    }
    Ok(CbhdSeries { t, order, terms, k: matrix_rows(&k) })
}

/// `K_t` at each requested time (ascending).
pub fn cbhd_log_at<F: MatrixFamily + ?Sized>(family: &F, driver: &SampledPath, times: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let order = family.nilpotency();
    check_family(family, order)?;
    let d = family.size();
    let mut ks = vec![DMatrix::zeros(d, d); times.len()];
    for (_, _, _, _, vals) in series_terms(family, driver, times, order)? {
        for (k, v) in ks.iter_mut().zip(vals) {
            *k += v;
        }
    }
    Ok(ks)
}

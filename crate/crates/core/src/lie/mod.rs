//! Nilpotent Lie-series machinery: matrix families, nested commutators,
//! descent numbers and CBHD coefficients, time-ordered multiple integrals
//! and the log-series of the driver ODE.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::rng_for;

pub mod cbhd;
pub mod iterated;
pub mod multiple;
pub mod signature;

pub use cbhd::{cbhd_log, cbhd_log_at, CbhdSeries, CbhdTerm};
pub use iterated::{iterated_integrals, Segments, Slot, Weight};
pub use multiple::{multiple_integral_pl, multiple_integral_rough, Kernel};
pub use signature::PlSignature;

/// Time-dependent coefficient matrices `A_j(t)`, `j = 0..count`, with a
/// declared nilpotency order.
pub trait MatrixFamily: Sync {
    fn count(&self) -> usize;
    fn size(&self) -> usize;
    fn nilpotency(&self) -> usize;
    fn eval(&self, j: usize, t: f64) -> DMatrix<f64>;
    fn deriv(&self, j: usize, t: f64) -> DMatrix<f64>;
    fn is_constant(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct ConstantFamily {
    pub size: usize,
    pub matrices: Vec<DMatrix<f64>>,
    pub order: usize,
}

impl ConstantFamily {
    pub fn new(matrices: Vec<DMatrix<f64>>, order: usize) -> Self {
        let size = matrices.first().map(|m| m.nrows()).unwrap_or(0);
        Self { size, matrices, order }
    }

    pub fn zero(size: usize, count: usize) -> Self {
        Self { size, matrices: vec![DMatrix::zeros(size, size); count], order: 1 }
    }
}

impl MatrixFamily for ConstantFamily {
    fn count(&self) -> usize {
        self.matrices.len()
    }
    fn size(&self) -> usize {
        self.size
    }
    fn nilpotency(&self) -> usize {
        self.order
    }
    fn eval(&self, j: usize, _t: f64) -> DMatrix<f64> {
        self.matrices[j].clone()
    }
    fn deriv(&self, _j: usize, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.size, self.size)
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// Family given by closures for values and time derivatives.
pub struct FnFamily<F, G> {
    pub count: usize,
    pub size: usize,
    pub order: usize,
    pub value: F,
    pub derivative: G,
}

impl<F, G> MatrixFamily for FnFamily<F, G>
where
    F: Fn(usize, f64) -> DMatrix<f64> + Sync,
    G: Fn(usize, f64) -> DMatrix<f64> + Sync,
{
    fn count(&self) -> usize {
        self.count
    }
    fn size(&self) -> usize {
        self.size
    }
    fn nilpotency(&self) -> usize {
        self.order
    }
    fn eval(&self, j: usize, t: f64) -> DMatrix<f64> {
        (self.value)(j, t)
    }
    fn deriv(&self, j: usize, t: f64) -> DMatrix<f64> {
        (self.derivative)(j, t)
    }
}

/// Elementary matrix `E_{ij}` (1-based indices).
pub fn elementary(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i - 1, j - 1)] = 1.0;
    m
}

pub fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// Left-nested commutator `[[…[M_1, M_2]…], M_n]`.
pub fn nest(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = ms[0].clone();
    for m in &ms[1..] {
        acc = commutator(&acc, m);
    }
    acc
}

/// `[[…[A_{i_1}(t_1), A_{i_2}(t_2)]…], A_{i_n}(t_n)]` with 0-based indices.
pub fn nested_commutator<F: MatrixFamily + ?Sized>(family: &F, indices: &[usize], times: &[f64]) -> DMatrix<f64> {
    let ms: Vec<DMatrix<f64>> = indices.iter().zip(times).map(|(&j, &t)| family.eval(j, t)).collect();
    nest(&ms)
}

/// Signed product orders of a left-nested commutator over slots `0..n`:
/// `[[…[Y_{o_1}, Y_{o_2}]…], Y_{o_n}] = Σ sign · Y_{w_1} ⋯ Y_{w_n}`.
pub fn commutator_words(order: &[usize]) -> Vec<(f64, Vec<usize>)> {
    let mut words = vec![(1.0, vec![order[0]])];
    for &y in &order[1..] {
        let mut next = Vec::with_capacity(2 * words.len());
        for (s, w) in &words {
            let mut right = w.clone();
            right.push(y);
            next.push((*s, right));
            let mut left = vec![y];
            left.extend_from_slice(w);
            next.push((-*s, left));
        }
        words = next;
    }
    words
}

#[derive(Debug, Clone, Serialize)]
pub struct NilpotencyReport {
    pub ok: bool,
    pub worst: f64,
    pub tuples_checked: usize,
}

/// Checks that commutators of length `N₀ + 1` vanish. Constant families with
/// few tuples are checked exhaustively, otherwise `budget` random tuples.
pub fn verify_nilpotent<F: MatrixFamily + ?Sized>(family: &F, budget: usize, seed: u64) -> NilpotencyReport {
    let m = family.count();
    let len = family.nilpotency() + 1;
    if m == 0 {
        return NilpotencyReport { ok: true, worst: 0.0, tuples_checked: 0 };
    }
    let horizon = 1.0;
    let mut rng = rng_for(seed, 0x1111);
    let total = m.checked_pow(len as u32).unwrap_or(usize::MAX);
    let exhaustive = family.is_constant() && total <= budget.max(1);
    let count = if exhaustive { total } else { budget.max(1) };
    let mut worst = 0.0f64;
    for q in 0..count {
        let idx: Vec<usize> = if exhaustive {
            let mut r = q;
            (0..len)
                .map(|_| {
                    let v = r % m;
                    r /= m;
                    v
                })
                .collect()
        } else {
            (0..len).map(|_| rng.random_range(0..m)).collect()
        };
        let ts: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..horizon)).collect();
        let ms: Vec<DMatrix<f64>> = idx.iter().zip(&ts).map(|(&j, &t)| family.eval(j, t)).collect();
        let scale: f64 = ms.iter().map(|a| a.norm().max(1.0)).product::<f64>() * (1u64 << (len - 1)) as f64;
        worst = worst.max(nest(&ms).norm() / scale);
    }
    NilpotencyReport { ok: worst <= 1e-12, worst, tuples_checked: count }
}

/// Number of descents `σ(j) > σ(j+1)` of a permutation of `{1..n}`.
pub fn descent_number(perm: &[usize]) -> Result<usize> {
    let n = perm.len();
    let mut seen = vec![false; n + 1];
    for &p in perm {
        if p == 0 || p > n || seen[p] {
            return Err(Error::Permutation(perm.to_vec()));
        }
        seen[p] = true;
    }
    Ok(perm.windows(2).filter(|w| w[0] > w[1]).count())
}

/// All permutations of `{1..n}` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (1..=n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `(−1)^{e(σ)+n} / (n² · C(n−1, e(σ)))`.
pub fn cbhd_coefficient(perm: &[usize]) -> Result<f64> {
    let n = perm.len();
    let e = descent_number(perm)?;
    let sign = if (e + n) % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign / ((n * n) as f64 * binomial(n - 1, e)))
}

/// Matrix exponential. With a nilpotency hint the finite Taylor sum is used
/// when it is exact; otherwise scaling and squaring.
pub fn matrix_exp(m: &DMatrix<f64>, hint: Option<usize>) -> DMatrix<f64> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    if let Some(order) = hint {
        let mut powers = vec![id.clone()];
        for k in 1..=order + 1 {
            powers.push(&powers[k - 1] * m);
        }
        let scale = 1.0 + m.norm().powi(order as i32 + 1);
        if powers[order + 1].norm() <= 1e-14 * scale {
            let mut acc = id.clone();
            let mut fact = 1.0;
            for (k, p) in powers.iter().enumerate().take(order + 1).skip(1) {
                fact *= k as f64;
                acc += p / fact;
            }
            return acc;
        }
    }
    let norm = m.norm();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(s);
    let mut acc = id.clone();
    let mut term = id;
    for k in 1..=20 {
        term = &term * &a / k as f64;
        acc += &term;
    }
    for _ in 0..s {
        acc = &acc * &acc;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e12_e23() -> ConstantFamily {
        ConstantFamily::new(vec![elementary(3, 1, 2), elementary(3, 2, 3)], 2)
    }

    #[test]
    fn nested_commutator_cases() {
        let f = e12_e23();
        assert_eq!(nested_commutator(&f, &[0], &[0.3]), elementary(3, 1, 2));
        assert_eq!(nested_commutator(&f, &[0, 1], &[0.1, 0.2]), elementary(3, 1, 3));
        let c = ConstantFamily::new(vec![elementary(3, 1, 2) * 2.0, elementary(3, 1, 2) * -1.0], 1);
        assert_eq!(nested_commutator(&c, &[0, 1], &[0.0, 0.0]).norm(), 0.0);
    }

    #[test]
    fn words_expand_commutators() {
        let ms = [elementary(3, 1, 2), elementary(3, 2, 3), elementary(3, 2, 1) + elementary(3, 3, 1) * 0.5];
        for order in permutations(3) {
            let o: Vec<usize> = order.iter().map(|x| x - 1).collect();
            let direct = nest(&o.iter().map(|&k| ms[k].clone()).collect::<Vec<_>>());
            let mut sum = DMatrix::zeros(3, 3);
            for (s, w) in commutator_words(&o) {
                let mut p = DMatrix::identity(3, 3);
                for k in w {
                    p = p * &ms[k];
                }
                sum += p * s;
            }
            assert!((direct - sum).norm() < 1e-14);
        }
    }

    #[test]
    fn nilpotency_checks() {
        let upper = ConstantFamily::new(
            vec![elementary(4, 1, 2), elementary(4, 2, 4) + elementary(4, 1, 3), elementary(4, 3, 4)],
            3,
        );
        assert!(verify_nilpotent(&upper, 1000, 1).ok);
        let bad = ConstantFamily::new(vec![elementary(2, 1, 2), elementary(2, 2, 1)], 1);
        assert!(!verify_nilpotent(&bad, 1000, 1).ok);
        let r = verify_nilpotent(&e12_e23(), 1000, 1);
        assert!(r.ok && r.worst < 1e-14 && r.tuples_checked == 8);
    }

    #[test]
    fn descents() {
        assert_eq!(descent_number(&[1, 2, 3, 4]).unwrap(), 0);
        assert_eq!(descent_number(&[4, 3, 2, 1]).unwrap(), 3);
        assert_eq!(descent_number(&[2, 1, 3]).unwrap(), 1);
        assert!(descent_number(&[1, 1, 3]).is_err());
        assert!(descent_number(&[0, 1]).is_err());
    }

    #[test]
    fn coefficient_table_matches_closed_form() {
        for n in 1..=4usize {
            let perms = permutations(n);
            assert_eq!(perms.len(), (1..=n).product::<usize>());
            for p in perms {
                let e = descent_number(&p).unwrap() as i32;
                let c = cbhd_coefficient(&p).unwrap();
                let expect = (-1f64).powi(e + n as i32) / ((n * n) as f64 * binomial(n - 1, e as usize));
                assert_eq!(c, expect);
            }
        }
        assert_eq!(cbhd_coefficient(&[1]).unwrap(), -1.0);
        assert_eq!(cbhd_coefficient(&[1, 2]).unwrap(), 0.25);
        assert_eq!(cbhd_coefficient(&[2, 1]).unwrap(), -0.25);
    }

    #[test]
    fn matrix_exp_cases() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exp(&z, Some(2)), DMatrix::identity(3, 3));
        let e = elementary(3, 1, 2);
        assert_eq!(matrix_exp(&e, Some(1)), DMatrix::identity(3, 3) + &e);
        let mut rng = rng_for(3, 0);
        let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut taylor = DMatrix::identity(4, 4);
        let mut term = DMatrix::identity(4, 4);
        for k in 1..60 {
            term = term * &m / k as f64;
            taylor += &term;
        }
        let got = matrix_exp(&m, None);
        assert!((got - &taylor).norm() < 1e-13 * taylor.norm());
        assert!((matrix_exp(&m, Some(2)) - taylor).norm() < 1e-12);
    }
}

//! Time-ordered multiple integrals of matrix kernels, evaluated directly
//! against a piecewise-linear driver or through the integration-by-parts
//! expansion against a lift.

use nalgebra::DMatrix;

use super::iterated::{iterated_integrals, outer, Segments, Slot, Weight};
use super::signature::PlSignature;
use super::{commutator_words, MatrixFamily};
use crate::error::{Error, Result};
use crate::fbm::{PathKind, SampledPath};
use crate::lift::Level2Lift;

type MatFn<'a> = Box<dyn Fn(f64) -> DMatrix<f64> + Sync + 'a>;

pub struct SlotMatrix<'a> {
    pub value: MatFn<'a>,
    pub deriv: MatFn<'a>,
}

/// `f(t_1,…,t_n) = Σ c · X_{w_1}(t_{w_1}) ⋯ X_{w_n}(t_{w_n})`, one matrix
/// function per integration slot.
pub struct Kernel<'a> {
    pub size: usize,
    pub slots: Vec<SlotMatrix<'a>>,
    pub words: Vec<(f64, Vec<usize>)>,
}

impl<'a> Kernel<'a> {
    pub fn n(&self) -> usize {
        self.slots.len()
    }

    /// Slot `k` carries `A_{indices[k]}`; the kernel is the left-nested
    /// commutator taken over slots in `order` (0-based).
    pub fn nested<F: MatrixFamily + ?Sized>(family: &'a F, indices: &[usize], order: &[usize]) -> Self {
        let slots = indices
            .iter()
            .map(|&j| SlotMatrix {
                value: Box::new(move |t| family.eval(j, t)) as MatFn<'a>,
                deriv: Box::new(move |t| family.deriv(j, t)) as MatFn<'a>,
            })
            .collect();
        Kernel { size: family.size(), slots, words: commutator_words(order) }
    }

    /// Ordered product `X_1(t_1) ⋯ X_n(t_n)`.
    pub fn product(size: usize, slots: Vec<SlotMatrix<'a>>) -> Self {
        let n = slots.len();
        Kernel { size, slots, words: vec![(1.0, (0..n).collect())] }
    }
}

fn flatten(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
}

/// Contract a slot tensor of `n` matrices of size `d` along the word products.
pub fn contract_words(tensor: &[f64], d: usize, n: usize, words: &[(f64, Vec<usize>)]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    let d2 = d * d;
    let mut rows = vec![0usize; n];
    let mut cols = vec![0usize; n];
    for (idx, v) in tensor.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let mut r = idx;
        for k in (0..n).rev() {
            let e = r % d2;
            r /= d2;
            rows[k] = e / d;
            cols[k] = e % d;
        }
        for (c, w) in words {
            if w.windows(2).all(|p| cols[p[0]] == rows[p[1]]) {
                out[(rows[w[0]], cols[w[n - 1]])] += c * v;
            }
        }
    }
    out
}

/// Segmentation of a piecewise-linear driver on its own coarse level.
pub fn pl_segments(driver: &SampledPath) -> Result<Segments> {
    match driver.kind {
        PathKind::PiecewiseLinear { level } if level < driver.levels => Ok(Segments::from_path(&driver.restrict(level)?)),
        _ => Ok(Segments::from_path(driver)),
    }
}

/// `∫_{0<t_1<…<t_n<t} X_1(t_1)⊗…⊗X_n(t_n) dB^{j_1}…dB^{j_n}` at each time.
pub fn slot_tensor(kernel: &Kernel, seg: &Segments, indices: &[usize], times: &[f64]) -> Vec<Vec<f64>> {
    let d2 = kernel.size * kernel.size;
    let slots: Vec<Slot> = kernel
        .slots
        .iter()
        .zip(indices)
        .map(|(s, &j)| Slot {
            dim: d2,
            weight: Weight::Driver(j),
            f: Box::new(move |t, o: &mut [f64]| flatten(&(s.value)(t), o)),
        })
        .collect();
    iterated_integrals(&slots, seg, times)
}

fn check_indices(kernel: &Kernel, indices: &[usize], m: usize) -> Result<()> {
    if indices.len() != kernel.n() {
        return Err(Error::Config(format!("{} indices for a kernel with {} slots", indices.len(), kernel.n())));
    }
    if let Some(j) = indices.iter().find(|&&j| j >= m) {
        return Err(Error::Config(format!("driver index {j} out of range for dimension {m}")));
    }
    Ok(())
}

/// Direct evaluation against the piecewise-linear driver.
pub fn multiple_integral_pl(kernel: &Kernel, driver: &SampledPath, indices: &[usize], t: f64) -> Result<DMatrix<f64>> {
    check_indices(kernel, indices, driver.dim)?;
    let seg = pl_segments(driver)?;
    let tensor = slot_tensor(kernel, &seg, indices, &[t]);
    Ok(contract_words(&tensor[0], kernel.size, kernel.n(), &kernel.words))
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    end: usize,
    deriv: Option<usize>,
}

#[derive(Debug, Clone)]
struct Term {
    sign: f64,
    groups: Vec<Vec<Block>>,
    last: Option<usize>,
}

/// Integration-by-parts expansion of the `n`-fold iterated integral.
fn expansion(n: usize) -> Vec<Term> {
    let mut terms = vec![Term { sign: 1.0, groups: Vec::new(), last: None }];
    for k in 0..n {
        let mut next = Vec::new();
        for term in &terms {
            let a = term.last.unwrap_or(k);
            next.push(Term { last: Some(a), ..term.clone() });
            for r in a..=k {
                let mut g = term.groups.clone();
                g.push(vec![Block { start: a, end: k, deriv: Some(r) }]);
                next.push(Term { sign: -term.sign, groups: g, last: None });
            }
            if !term.groups.is_empty() {
                let mut g = term.groups.clone();
                g.last_mut().unwrap().push(Block { start: a, end: k, deriv: None });
                next.push(Term { sign: -term.sign, groups: g, last: None });
            }
        }
        terms = next;
    }
    terms
}

struct Iterated<'a> {
    lift: &'a Level2Lift,
    sig: Option<PlSignature>,
}

impl Iterated<'_> {
    fn word(&self, w: &[usize], tau: f64) -> f64 {
        let m = self.lift.dim;
        match w.len() {
            1 => self.lift.prefix_at(tau).0[w[0]],
            2 => self.lift.prefix_at(tau).1[w[0] * m + w[1]],
            _ => self.sig.as_ref().expect("depth checked").word(w, tau),
        }
    }
}

/// Evaluation through the integration-by-parts expansion: boundary terms
/// use the lift's iterated monomials `B^{(a..b)}`, interior terms are plain
/// time integrals of kernel derivatives. Blocks of length three or more need
/// the piecewise-linear driver itself.
pub fn multiple_integral_rough(
    kernel: &Kernel,
    lift: &Level2Lift,
    pl_driver: Option<&SampledPath>,
    indices: &[usize],
    t: f64,
) -> Result<DMatrix<f64>> {
    let n = kernel.n();
    check_indices(kernel, indices, lift.dim)?;
    let sig = if n > 2 {
        let p = pl_driver.ok_or(Error::Depth(n))?;
        Some(PlSignature::new(p, n))
    } else {
        None
    };
    let it = Iterated { lift, sig };
    let d = kernel.size;
    let d2 = d * d;
    let seg = Segments::time_only(lift.times.clone());
    let mut total = vec![0.0; d2.pow(n as u32)];
    for term in expansion(n) {
        let slots: Vec<Slot> = term
            .groups
            .iter()
            .map(|g| {
                let nslots: usize = g.iter().map(|b| b.end - b.start + 1).sum();
                let g = g.clone();
                let it = &it;
                Slot {
                    dim: d2.pow(nslots as u32),
                    weight: Weight::Time,
                    f: Box::new(move |tau, o: &mut [f64]| {
                        let mut scalar = 1.0;
                        let mut acc = vec![1.0];
                        let mut buf = vec![0.0; d2];
                        for b in &g {
                            scalar *= it.word(&indices[b.start..=b.end], tau);
                            for r in b.start..=b.end {
                                let s = &kernel.slots[r];
                                let m = if b.deriv == Some(r) { (s.deriv)(tau) } else { (s.value)(tau) };
                                flatten(&m, &mut buf);
                                acc = outer(&acc, &buf);
                            }
                        }
                        for (x, v) in o.iter_mut().zip(&acc) {
                            *x = scalar * v;
                        }
                    }),
                }
            })
            .collect();
        let head = iterated_integrals(&slots, &seg, &[t]).pop().unwrap();
        let tail = match term.last {
            Some(a) => {
                let scalar = it.word(&indices[a..n], t);
                let mut acc = vec![scalar];
                let mut buf = vec![0.0; d2];
                for s in &kernel.slots[a..n] {
                    flatten(&(s.value)(t), &mut buf);
                    acc = outer(&acc, &buf);
                }
                acc
            }
            None => vec![1.0],
        };
        let full = outer(&head, &tail);
        for (x, v) in total.iter_mut().zip(&full) {
            *x += term.sign * v;
        }
    }
    Ok(contract_words(&total, d, n, &kernel.words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{dyadic_approx, sample_fbm, FbmConfig};
    use crate::lie::{elementary, FnFamily};
    use crate::lift::lift_piecewise_linear;

    fn driver(h: f64, m: usize, level: u32, seed: u64) -> SampledPath {
        let raw = sample_fbm(&FbmConfig { hurst: h, dimension: m, horizon: 1.0, levels: 10, seed }).unwrap();
        dyadic_approx(&raw, level).unwrap().restrict(level).unwrap()
    }

    fn scalar_slot<'a>(f: impl Fn(f64) -> f64 + Sync + 'a, df: impl Fn(f64) -> f64 + Sync + 'a) -> SlotMatrix<'a> {
        SlotMatrix {
            value: Box::new(move |t| DMatrix::from_element(1, 1, f(t))),
            deriv: Box::new(move |t| DMatrix::from_element(1, 1, df(t))),
        }
    }

    fn e12_e23_varying() -> impl MatrixFamily {
        FnFamily {
            count: 2,
            size: 3,
            order: 2,
            value: |j, t: f64| {
                if j == 0 {
                    elementary(3, 1, 2) * (1.0 + 0.5 * t.sin())
                } else {
                    elementary(3, 2, 3) * (2.0 - t * t) + elementary(3, 1, 3) * t
                }
            },
            derivative: |j, t: f64| {
                if j == 0 {
                    elementary(3, 1, 2) * (0.5 * t.cos())
                } else {
                    elementary(3, 2, 3) * (-2.0 * t) + elementary(3, 1, 3)
                }
            },
        }
    }

    #[test]
    fn first_order_identity_kernel() {
        let b = driver(0.7, 1, 8, 1);
        let k = Kernel::product(1, vec![scalar_slot(|_| 1.0, |_| 0.0)]);
        let v = multiple_integral_pl(&k, &b, &[0], 0.6).unwrap();
        let mut x = [0.0];
        b.eval(0.6, &mut x);
        assert!((v[(0, 0)] - x[0]).abs() < 1e-13);
        let lift = lift_piecewise_linear(&b);
        let c = Kernel::product(1, vec![scalar_slot(|_| 2.5, |_| 0.0)]);
        let r = multiple_integral_rough(&c, &lift, None, &[0], 0.6).unwrap();
        assert!((r[(0, 0)] - 2.5 * x[0]).abs() < 1e-13);
    }

    #[test]
    fn second_order_same_index_is_half_square() {
        let b = driver(0.4, 1, 8, 2);
        let one = || scalar_slot(|_| 1.0, |_| 0.0);
        let k = Kernel::product(1, vec![one(), one()]);
        let v = multiple_integral_pl(&k, &b, &[0, 0], 1.0).unwrap();
        let bt = b.at(b.len() - 1)[0];
        assert!((v[(0, 0)] - 0.5 * bt * bt).abs() < 1e-10);
    }

    #[test]
    fn first_order_integration_by_parts() {
        let b = driver(0.4, 1, 8, 5);
        let lift = lift_piecewise_linear(&b);
        let k = Kernel::product(1, vec![scalar_slot(|t| (2.0 * t).cos(), |t| -2.0 * (2.0 * t).sin())]);
        let rough = multiple_integral_rough(&k, &lift, None, &[0], 1.0).unwrap()[(0, 0)];
        // f(t)B_t − ∫ f′(s) B_s ds with a fine trapezoid for the last integral.
        let n = 1 << 16;
        let h = 1.0 / n as f64;
        let mut x = [0.0];
        let mut integral = 0.0;
        for i in 0..=n {
            let s = i as f64 * h;
            b.eval(s, &mut x);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * h * (-2.0 * (2.0 * s).sin()) * x[0];
        }
        let bt = b.at(b.len() - 1)[0];
        let expect = 2f64.cos() * bt - integral;
        assert!((rough - expect).abs() < 1e-8, "{}", rough - expect);
        let pl = multiple_integral_pl(&k, &b, &[0], 1.0).unwrap()[(0, 0)];
        assert!((rough - pl).abs() < 1e-12);
    }

    /// Brute-force left-point Riemann sum of `[a(s), c(t)] dB^{i}_s dB^{j}_t`
    /// over the simplex, Richardson-extrapolated twice from meshes `2^k`,
    /// `2^{k−1}` and `2^{k−2}`.
    fn riemann_commutator(
        a: &dyn Fn(f64) -> DMatrix<f64>,
        c: &dyn Fn(f64) -> DMatrix<f64>,
        b: &SampledPath,
        idx: [usize; 2],
        level: u32,
    ) -> DMatrix<f64> {
        let sum = |lv: u32| {
            let n = 1usize << lv;
            let h = b.horizon() / n as f64;
            let (mut x0, mut x1) = (vec![0.0; b.dim], vec![0.0; b.dim]);
            let mut acc = DMatrix::zeros(3, 3);
            let mut inner = DMatrix::zeros(3, 3);
            for j in 0..n {
                let t = j as f64 * h;
                b.eval(t, &mut x0);
                b.eval(t + h, &mut x1);
                let (d0, d1) = (x1[idx[0]] - x0[idx[0]], x1[idx[1]] - x0[idx[1]]);
                let (at, ct) = (a(t), c(t));
                let diag = &inner + &at * (0.5 * d0);
                acc += (&diag * &ct - &ct * &diag) * d1;
                inner += at * d0;
            }
            acc
        };
        let (s0, s1, s2) = (sum(level), sum(level - 1), sum(level - 2));
        let r0 = &s0 * 2.0 - &s1;
        let r1 = &s1 * 2.0 - &s2;
        (r0 * 4.0 - r1) / 3.0
    }

    #[test]
    fn second_order_matches_simplex_riemann_oracle() {
        let fam = e12_e23_varying();
        let b = driver(0.7, 2, 6, 7);
        let k = Kernel::nested(&fam, &[0, 1], &[0, 1]);
        let v = multiple_integral_pl(&k, &b, &[0, 1], 1.0).unwrap();
        let oracle = riemann_commutator(&|s| fam.eval(0, s), &|t| fam.eval(1, t), &b, [0, 1], 14);
        assert!((&v - &oracle).norm() < 1e-8, "{}", (&v - &oracle).norm());
    }

    #[test]
    fn routes_agree_up_to_third_order() {
        let fam = e12_e23_varying();
        for (h, seed) in [(0.7, 3u64), (0.4, 4)] {
            let b = driver(h, 2, 8, seed);
            let lift = lift_piecewise_linear(&b);
            for idx in [vec![0usize, 1], vec![1, 1], vec![0, 1, 0], vec![1, 0, 1]] {
                let order: Vec<usize> = (0..idx.len()).collect();
                let k = Kernel::nested(&fam, &idx, &order);
                let pl = multiple_integral_pl(&k, &b, &idx, 0.75).unwrap();
                let rough = multiple_integral_rough(&k, &lift, Some(&b), &idx, 0.75).unwrap();
                let tol = if idx.len() <= 2 { 1e-8 } else { 1e-6 };
                assert!((&pl - &rough).norm() < tol, "{idx:?}: {}", (&pl - &rough).norm());
            }
        }
    }

    #[test]
    fn third_order_without_driver_is_a_depth_error() {
        let fam = e12_e23_varying();
        let b = driver(0.4, 2, 5, 1);
        let lift = lift_piecewise_linear(&b);
        let k = Kernel::nested(&fam, &[0, 1, 1], &[0, 1, 2]);
        assert!(matches!(multiple_integral_rough(&k, &lift, None, &[0, 1, 1], 1.0), Err(Error::Depth(3))));
    }

    #[test]
    fn expansion_term_counts() {
        assert_eq!(expansion(1).len(), 2);
        // Signs of a constant kernel sum to the boundary term alone.
        for n in 1..=3 {
            let boundary: Vec<_> = expansion(n).into_iter().filter(|t| t.groups.is_empty()).collect();
            assert_eq!(boundary.len(), 1);
            assert_eq!(boundary[0].last, Some(0));
        }
    }
}

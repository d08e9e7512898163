//! Level-2 lifts of piecewise-linear paths and the two-parameter increment
//! calculus built on Chen's identity.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fbm::SampledPath;

/// First and second level iterated integrals of a piecewise-linear path.
///
/// Only adjacent-pair data is authoritative; longer windows are composed
/// segment by segment through Chen's identity. Prefix values from time 0 are
/// cached for evaluation at arbitrary times.
#[derive(Debug, Clone)]
pub struct Level2Lift {
    pub times: Vec<f64>,
    pub dim: usize,
    pub levels: u32,
    /// Path values relative to `X_0`, time-major.
    x: Vec<f64>,
    /// Second level over each adjacent pair, row-major `dim x dim`.
    seg: Vec<f64>,
    /// `𝕏_{0,t_i}` at each grid point.
    prefix: Vec<f64>,
}

pub fn lift_piecewise_linear(path: &SampledPath) -> Level2Lift {
    let m = path.dim;
    let n = path.len();
    let x0 = path.at(0).to_vec();
    let mut x = vec![0.0; n * m];
    for i in 0..n {
        for c in 0..m {
            x[i * m + c] = path.at(i)[c] - x0[c];
        }
    }
    let mut seg = vec![0.0; (n - 1) * m * m];
    let mut prefix = vec![0.0; n * m * m];
    for l in 0..n - 1 {
        let d: Vec<f64> = (0..m).map(|c| x[(l + 1) * m + c] - x[l * m + c]).collect();
        for i in 0..m {
            for j in 0..m {
                let s = 0.5 * d[i] * d[j];
                seg[l * m * m + i * m + j] = s;
                prefix[(l + 1) * m * m + i * m + j] = prefix[l * m * m + i * m + j] + s + x[l * m + i] * d[j];
            }
        }
    }
    Level2Lift { times: path.times.clone(), dim: m, levels: path.levels, x, seg, prefix }
}

impl Level2Lift {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn step(&self) -> f64 {
        self.horizon() / (self.len() - 1) as f64
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.step();
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.len() {
            Ok(i as usize)
        } else {
            Err(Error::NotOnGrid(t))
        }
    }

    /// `δX_{s,t}` between grid indices.
    pub fn first(&self, s: usize, t: usize) -> Vec<f64> {
        let m = self.dim;
        (0..m).map(|c| self.x[t * m + c] - self.x[s * m + c]).collect()
    }

    /// `𝕏_{s,t}` between grid indices, composed from adjacent pairs.
    pub fn second(&self, s: usize, t: usize) -> DMatrix<f64> {
        let m = self.dim;
        let mut acc = vec![0.0; m * m];
        for l in s..t {
            self.compose_segment(s, l, &mut acc);
        }
        DMatrix::from_row_slice(m, m, &acc)
    }

    /// Extend `acc = 𝕏_{s,t_l}` to `𝕏_{s,t_{l+1}}`.
    fn compose_segment(&self, s: usize, l: usize, acc: &mut [f64]) {
        let m = self.dim;
        for i in 0..m {
            let a = self.x[l * m + i] - self.x[s * m + i];
            for j in 0..m {
                let d = self.x[(l + 1) * m + j] - self.x[l * m + j];
                acc[i * m + j] += self.seg[l * m * m + i * m + j] + a * d;
            }
        }
    }

    /// `(X_τ − X_0, 𝕏_{0,τ})` at an arbitrary time, flattened row-major.
    pub fn prefix_at(&self, tau: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.dim;
        let h = self.step();
        let n = self.len() - 1;
        let (l, r) = if tau >= self.horizon() {
            (n - 1, 1.0)
        } else if tau <= 0.0 {
            (0, 0.0)
        } else {
            let l = ((tau / h).floor() as usize).min(n - 1);
            (l, (tau - self.times[l]) / h)
        };
        let d: Vec<f64> = (0..m).map(|c| r * (self.x[(l + 1) * m + c] - self.x[l * m + c])).collect();
        let x: Vec<f64> = (0..m).map(|c| self.x[l * m + c] + d[c]).collect();
        let mut a = self.prefix[l * m * m..(l + 1) * m * m].to_vec();
        for i in 0..m {
            for j in 0..m {
                a[i * m + j] += 0.5 * d[i] * d[j] + self.x[l * m + i] * d[j];
            }
        }
        (x, a)
    }

    fn check_same_grid(&self, other: &Level2Lift) -> Result<()> {
        if self.len() != other.len() || self.dim != other.dim || (self.horizon() - other.horizon()).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "{} points / dim {} vs {} points / dim {}",
                self.len(),
                self.dim,
                other.len(),
                other.dim
            )));
        }
        Ok(())
    }

    /// Inhomogeneous α-Hölder rough norm `‖δX‖_α + ‖𝕏‖_{2α}^{1/2}` over grid pairs.
    pub fn rough_holder_norm(&self, alpha: f64) -> f64 {
        let m = self.dim;
        let n = self.len();
        let mut h1 = 0.0f64;
        let mut h2 = 0.0f64;
        let mut acc = vec![0.0; m * m];
        for s in 0..n {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for l in s..n - 1 {
                self.compose_segment(s, l, &mut acc);
                let t = l + 1;
                let dt = self.times[t] - self.times[s];
                let d1 = self.first(s, t).iter().map(|v| v * v).sum::<f64>().sqrt();
                let d2 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
                h1 = h1.max(d1 / dt.powf(alpha));
                h2 = h2.max(d2 / dt.powf(2.0 * alpha));
            }
        }
        h1 + h2.sqrt()
    }
}

/// `𝕏_{s,t} − 𝕏_{s,u} − 𝕏_{u,t} − δX_{s,u} ⊗ δX_{u,t}` at grid times.
pub fn chen_defect(lift: &Level2Lift, s: f64, u: f64, t: f64) -> Result<DMatrix<f64>> {
    let (si, ui, ti) = (lift.index_of(s)?, lift.index_of(u)?, lift.index_of(t)?);
    if !(si <= ui && ui <= ti) {
        return Err(Error::Config(format!("need s <= u <= t, got {s}, {u}, {t}")));
    }
    let a = lift.first(si, ui);
    let b = lift.first(ui, ti);
    let m = lift.dim;
    let outer = DMatrix::from_fn(m, m, |i, j| a[i] * b[j]);
    Ok(lift.second(si, ti) - lift.second(si, ui) - lift.second(ui, ti) - outer)
}

/// Inhomogeneous p-variation distance restricted to the dyadic partitions of
/// the common grid.
pub fn p_var_distance(a: &Level2Lift, b: &Level2Lift, p: f64) -> Result<f64> {
    if !(p > 2.0 && p < 3.0) {
        return Err(Error::Config(format!("p = {p} must lie in (2, 3)")));
    }
    a.check_same_grid(b)?;
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    for j in 0..=a.levels {
        let stride = 1usize << (a.levels - j);
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for l in 0..(1usize << j) {
            let (s, t) = (l * stride, (l + 1) * stride);
            let fa = a.first(s, t);
            let fb = b.first(s, t);
            l1 += fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt().powf(p);
            l2 += (a.second(s, t) - b.second(s, t)).norm().powf(p / 2.0);
        }
        s1 = s1.max(l1);
        s2 = s2.max(l2);
    }
    Ok(s1.powf(1.0 / p).max(s2.powf(2.0 / p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{dyadic_approx, sample_fbm, FbmConfig, PathKind};
    use proptest::prelude::*;

    fn fbm(h: f64, levels: u32, dim: usize, seed: u64) -> SampledPath {
        sample_fbm(&FbmConfig { hurst: h, dimension: dim, horizon: 1.0, levels, seed }).unwrap()
    }

    #[test]
    fn single_segment_is_symmetric_half_square() {
        let p = SampledPath::new(2.0, 0, 2, vec![0.0, 0.0, 1.5, -0.5], PathKind::Raw).unwrap();
        let l = lift_piecewise_linear(&p);
        let x = l.second(0, 1);
        let d = [1.5, -0.5];
        for i in 0..2 {
            for j in 0..2 {
                assert!((x[(i, j)] - 0.5 * d[i] * d[j]).abs() < 1e-15);
            }
        }
    }

    /// Left-point Riemann sums on meshes `M` and `2M` extrapolated to zero mesh;
    /// the leading error is exactly linear in `1/M` on a piecewise-linear path.
    fn riemann_second(p: &SampledPath, refine: usize) -> DMatrix<f64> {
        let sum = |r: usize| {
            let m = p.dim;
            let k = (p.len() - 1) * r;
            let h = p.horizon() / k as f64;
            let mut acc = DMatrix::zeros(m, m);
            let mut a = vec![0.0; m];
            let mut b = vec![0.0; m];
            let x0 = p.at(0).to_vec();
            for q in 0..k {
                p.eval(q as f64 * h, &mut a);
                p.eval((q + 1) as f64 * h, &mut b);
                for i in 0..m {
                    for j in 0..m {
                        acc[(i, j)] += (a[i] - x0[i]) * (b[j] - a[j]);
                    }
                }
            }
            acc
        };
        sum(refine) * 2.0 - sum(refine / 2)
    }

    #[test]
    fn two_segment_lift_matches_riemann_oracle() {
        let p = SampledPath::new(1.0, 1, 2, vec![0.0, 0.0, 1.0, 0.3, 0.2, 1.4], PathKind::Raw).unwrap();
        let l = lift_piecewise_linear(&p);
        let oracle = riemann_second(&p, 1 << 10);
        assert!((l.second(0, 2) - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn chen_defect_degenerate_and_random() {
        let p = fbm(0.4, 8, 2, 7);
        let l = lift_piecewise_linear(&p);
        let h = p.step();
        assert!(chen_defect(&l, 10.0 * h, 10.0 * h, 40.0 * h).unwrap().abs().max() == 0.0);
        assert!(chen_defect(&l, 10.0 * h, 40.0 * h, 40.0 * h).unwrap().abs().max() < 1e-15);
        let scale = p.sup_norm().powi(2);
        for (s, u, t) in [(0, 100, 256), (3, 77, 200), (50, 51, 52)] {
            let d = chen_defect(&l, s as f64 * h, u as f64 * h, t as f64 * h).unwrap();
            assert!(d.abs().max() < 1e-12 * scale);
        }
        assert!(chen_defect(&l, 0.5 * h, h, 2.0 * h).is_err());
    }

    #[test]
    fn prefix_matches_composition_at_grid_points() {
        let p = fbm(0.7, 6, 3, 1);
        let l = lift_piecewise_linear(&p);
        for t in [0usize, 1, 17, 64] {
            let (_, a) = l.prefix_at(l.times[t]);
            let b = l.second(0, t);
            let b: Vec<f64> = (0..9).map(|k| b[(k / 3, k % 3)]).collect();
            for k in 0..9 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_area_vanishes() {
        let p = fbm(0.4, 8, 1, 3);
        let l = lift_piecewise_linear(&p);
        let x = l.second(0, 256);
        let d = l.first(0, 256)[0];
        assert!((x[(0, 0)] - 0.5 * d * d).abs() < 1e-12);
    }

    #[test]
    fn p_var_distance_basic_properties() {
        let p = fbm(0.4, 8, 2, 5);
        let a = lift_piecewise_linear(&dyadic_approx(&p, 4).unwrap());
        let b = lift_piecewise_linear(&dyadic_approx(&p, 6).unwrap());
        assert_eq!(p_var_distance(&a, &a, 2.7).unwrap(), 0.0);
        let ab = p_var_distance(&a, &b, 2.7).unwrap();
        let ba = p_var_distance(&b, &a, 2.7).unwrap();
        assert!((ab - ba).abs() < 1e-14 && ab > 0.0);
        assert!(p_var_distance(&a, &b, 2.0).is_err());
    }

    #[test]
    fn p_var_distance_to_finer_levels_decreases() {
        let p = fbm(0.4, 10, 2, 12);
        let top = lift_piecewise_linear(&dyadic_approx(&p, 9).unwrap());
        let d: Vec<f64> = (3..9)
            .map(|k| p_var_distance(&lift_piecewise_linear(&dyadic_approx(&p, k).unwrap()), &top, 2.7).unwrap())
            .collect();
        for w in d.windows(2) {
            assert!(w[1] < w[0], "{d:?}");
        }
    }

    #[test]
    fn rough_norm_stable_under_refinement() {
        let p = fbm(0.7, 9, 2, 2);
        let coarse = lift_piecewise_linear(&p.restrict(7).unwrap());
        let fine = lift_piecewise_linear(&p.restrict(9).unwrap());
        let a = coarse.rough_holder_norm(0.4);
        let b = fine.rough_holder_norm(0.4);
        assert!(b >= a * 0.999 && b < 2.0 * a, "{a} {b}");
    }

    proptest! {
        #[test]
        fn chen_identity_holds_on_random_paths(vals in proptest::collection::vec(-2.0f64..2.0, 34), s in 0usize..17, w in 0usize..17, v in 0usize..17) {
            let mut vals = vals;
            vals[0] = 0.0;
            vals[1] = 0.0;
            let p = SampledPath::new(1.0, 4, 2, vals, PathKind::Raw).unwrap();
            let l = lift_piecewise_linear(&p);
            let mut idx = [s, w, v];
            idx.sort();
            let h = p.step();
            let d = chen_defect(&l, idx[0] as f64 * h, idx[1] as f64 * h, idx[2] as f64 * h).unwrap();
            prop_assert!(d.abs().max() < 1e-12);
            let x = l.second(idx[0], idx[2]);
            let f = l.first(idx[0], idx[2]);
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((0.5 * (x[(i, j)] + x[(j, i)]) - 0.5 * f[i] * f[j]).abs() < 1e-12);
                }
            }
        }
    }
}

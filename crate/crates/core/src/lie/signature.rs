//! Truncated signatures of piecewise-linear paths, evaluable at any time.

use crate::fbm::SampledPath;

#[derive(Debug, Clone)]
pub struct PlSignature {
    pub depth: usize,
    pub dim: usize,
    times: Vec<f64>,
    /// Segment increments, time-major.
    inc: Vec<f64>,
    /// Per grid point, levels `1..=depth` concatenated.
    prefix: Vec<Vec<f64>>,
}

fn word_index(w: &[usize], m: usize) -> usize {
    w.iter().fold(0, |acc, &c| acc * m + c)
}

fn level_offset(k: usize, m: usize) -> usize {
    (1..k).map(|j| m.pow(j as u32)).sum()
}

impl PlSignature {
    pub fn new(path: &SampledPath, depth: usize) -> Self {
        let m = path.dim;
        let n = path.len();
        let size: usize = (1..=depth).map(|k| m.pow(k as u32)).sum();
        let mut inc = vec![0.0; (n - 1) * m];
        for l in 0..n - 1 {
            for c in 0..m {
                inc[l * m + c] = path.at(l + 1)[c] - path.at(l)[c];
            }
        }
        let mut sig = Self { depth, dim: m, times: path.times.clone(), inc, prefix: Vec::with_capacity(n) };
        sig.prefix.push(vec![0.0; size]);
        for l in 0..n - 1 {
            let mut next = vec![0.0; size];
            for k in 1..=depth {
                let off = level_offset(k, m);
                let mut w = vec![0usize; k];
                for idx in 0..m.pow(k as u32) {
                    let mut r = idx;
                    for slot in (0..k).rev() {
                        w[slot] = r % m;
                        r /= m;
                    }
                    next[off + idx] = sig.extend(&sig.prefix[l], l, &w, 1.0);
                }
            }
            sig.prefix.push(next);
        }
        sig
    }

    /// Coefficient of word `w` for the prefix `base` (at `t_l`) extended by a
    /// fraction `x` of segment `l`.
    fn extend(&self, base: &[f64], l: usize, w: &[usize], x: f64) -> f64 {
        let m = self.dim;
        let r = w.len();
        let mut total = 0.0;
        let mut tail = 1.0;
        let mut fact = 1.0;
        for i in (0..=r).rev() {
            let head = if i == 0 { 1.0 } else { base[level_offset(i, m) + word_index(&w[..i], m)] };
            total += head * tail / fact;
            if i > 0 {
                tail *= x * self.inc[l * m + w[i - 1]];
                fact *= (r - i + 1) as f64;
            }
        }
        total
    }

    /// Iterated integral `∫_{0<s_1<…<s_r<τ} dX^{w_1}…dX^{w_r}`.
    pub fn word(&self, w: &[usize], tau: f64) -> f64 {
        assert!(w.len() <= self.depth, "word longer than signature depth");
        if w.is_empty() {
            return 1.0;
        }
        let n = self.times.len() - 1;
        let h = self.times[n] / n as f64;
        let (l, x) = if tau >= self.times[n] {
            (n - 1, 1.0)
        } else if tau <= 0.0 {
            (0, 0.0)
        } else {
            let l = ((tau / h).floor() as usize).min(n - 1);
            (l, (tau - self.times[l]) / h)
        };
        self.extend(&self.prefix[l], l, w, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{sample_fbm, FbmConfig};
    use crate::lift::lift_piecewise_linear;

    #[test]
    fn low_levels_match_lift() {
        let p = sample_fbm(&FbmConfig { hurst: 0.4, dimension: 2, horizon: 1.0, levels: 6, seed: 3 }).unwrap();
        let sig = PlSignature::new(&p, 3);
        let lift = lift_piecewise_linear(&p);
        for tau in [0.0, 0.13, 0.5, 1.0] {
            let (x, a) = lift.prefix_at(tau);
            for i in 0..2 {
                assert!((sig.word(&[i], tau) - x[i]).abs() < 1e-13);
                for j in 0..2 {
                    assert!((sig.word(&[i, j], tau) - a[i * 2 + j]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn one_dimensional_levels_are_powers() {
        let p = sample_fbm(&FbmConfig { hurst: 0.7, dimension: 1, horizon: 1.0, levels: 5, seed: 1 }).unwrap();
        let sig = PlSignature::new(&p, 4);
        let x = p.at(32)[0];
        assert!((sig.word(&[0, 0, 0], 1.0) - x.powi(3) / 6.0).abs() < 1e-13);
        assert!((sig.word(&[0, 0, 0, 0], 1.0) - x.powi(4) / 24.0).abs() < 1e-13);
    }
}

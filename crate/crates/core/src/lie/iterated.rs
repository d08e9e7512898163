//! Time-ordered iterated integrals of tensor-valued slot functions against a
//! piecewise-linear driver (or plain time), by segment-wise Gauss–Legendre
//! interpolation and Chen's relation across segments.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::fbm::SampledPath;

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const Q: usize = GL_NODES.len();

fn unit_nodes() -> [f64; Q] {
    GL_NODES.map(|x| 0.5 * (1.0 + x))
}

/// Inverse Vandermonde matrix mapping node values to monomial coefficients
/// in the centred coordinate `y = 2x − 1 ∈ [−1, 1]`.
fn vandermonde_inverse() -> &'static DMatrix<f64> {
    static V: OnceLock<DMatrix<f64>> = OnceLock::new();
    V.get_or_init(|| {
        let v = DMatrix::from_fn(Q, Q, |g, k| GL_NODES[g].powi(k as i32));
        v.try_inverse().expect("Gauss nodes are distinct")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weight {
    /// Integrate against `dX^j` of the segment driver.
    Driver(usize),
    /// Integrate against `dt`.
    Time,
}

pub struct Slot<'a> {
    pub dim: usize,
    pub weight: Weight,
    pub f: Box<dyn Fn(f64, &mut [f64]) + Sync + 'a>,
}

/// Grid segments with constant driver velocities.
#[derive(Debug, Clone)]
pub struct Segments {
    pub times: Vec<f64>,
    pub dim: usize,
    velocities: Vec<f64>,
}

impl Segments {
    pub fn from_path(p: &SampledPath) -> Self {
        let mut velocities = vec![0.0; (p.len() - 1) * p.dim];
        for l in 0..p.len() - 1 {
            p.velocity(l, &mut velocities[l * p.dim..(l + 1) * p.dim]);
        }
        Self { times: p.times.clone(), dim: p.dim, velocities }
    }

    pub fn time_only(times: Vec<f64>) -> Self {
        Self { times, dim: 0, velocities: Vec::new() }
    }

    pub fn velocity(&self, l: usize, j: usize) -> f64 {
        self.velocities[l * self.dim + j]
    }
}

/// Polynomial in the centred local coordinate with flat tensor coefficients.
#[derive(Clone)]
struct TPoly {
    dim: usize,
    coef: Vec<f64>,
}

impl TPoly {
    fn degree_count(&self) -> usize {
        self.coef.len() / self.dim
    }

    /// Antiderivative vanishing at `y = −1`.
    fn integrate(&self) -> TPoly {
        let n = self.degree_count();
        let mut coef = vec![0.0; (n + 1) * self.dim];
        for k in 0..n {
            let s = 1.0 / (k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            for e in 0..self.dim {
                let c = self.coef[k * self.dim + e] * s;
                coef[(k + 1) * self.dim + e] = c;
                coef[e] += sign * c;
            }
        }
        TPoly { dim: self.dim, coef }
    }

    fn outer(&self, other: &TPoly) -> TPoly {
        let (na, nb) = (self.degree_count(), other.degree_count());
        let dim = self.dim * other.dim;
        let mut coef = vec![0.0; (na + nb - 1) * dim];
        for i in 0..na {
            let a = &self.coef[i * self.dim..(i + 1) * self.dim];
            for j in 0..nb {
                let b = &other.coef[j * other.dim..(j + 1) * other.dim];
                let dst = &mut coef[(i + j) * dim..(i + j + 1) * dim];
                for (x, av) in a.iter().enumerate() {
                    if *av == 0.0 {
                        continue;
                    }
                    let row = &mut dst[x * other.dim..(x + 1) * other.dim];
                    for (r, bv) in row.iter_mut().zip(b) {
                        *r += av * bv;
                    }
                }
            }
        }
        TPoly { dim, coef }
    }

    fn eval(&self, x: f64) -> Vec<f64> {
        let n = self.degree_count();
        let mut out = vec![0.0; self.dim];
        for k in (0..n).rev() {
            for e in 0..self.dim {
                out[e] = out[e] * x + self.coef[k * self.dim + e];
            }
        }
        out
    }
}

pub fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

fn add_outer(dst: &mut [f64], a: &[f64], b: &[f64]) {
    let nb = b.len();
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (d, y) in dst[i * nb..(i + 1) * nb].iter_mut().zip(b) {
            *d += x * y;
        }
    }
}

/// `∫_{0<τ_1<…<τ_r<t} f_1(τ_1)⊗…⊗f_r(τ_r) w_1 … w_r` at each requested
/// time (ascending). Slot functions must be smooth on every segment.
pub fn iterated_integrals(slots: &[Slot], seg: &Segments, times: &[f64]) -> Vec<Vec<f64>> {
    let r = slots.len();
    let total: usize = slots.iter().map(|s| s.dim).product();
    if r == 0 {
        return vec![vec![1.0]; times.len()];
    }
    let dims_prefix: Vec<usize> = (0..=r).map(|k| slots[..k].iter().map(|s| s.dim).product()).collect();
    let mut prefix: Vec<Vec<f64>> = (0..=r).map(|k| vec![0.0; dims_prefix[k]]).collect();
    prefix[0][0] = 1.0;
    let mut out = Vec::with_capacity(times.len());
    let mut ti = 0;
    while ti < times.len() && times[ti] <= seg.times[0] {
        out.push(vec![0.0; total]);
        ti += 1;
    }
    let nodes = unit_nodes();
    let vinv = vandermonde_inverse();
    let nseg = seg.times.len() - 1;
    for l in 0..nseg {
        if ti >= times.len() {
            break;
        }
        let (a, b) = (seg.times[l], seg.times[l + 1]);
        let eps = b - a;
        let polys: Vec<TPoly> = slots
            .iter()
            .map(|s| {
                let w = match s.weight {
                    Weight::Driver(j) => seg.velocity(l, j),
                    Weight::Time => 1.0,
                } * eps
                    * 0.5;
                let mut vals = DMatrix::zeros(Q, s.dim);
                let mut buf = vec![0.0; s.dim];
                if w != 0.0 {
                    for (g, x) in nodes.iter().enumerate() {
                        (s.f)(a + eps * x, &mut buf);
                        for e in 0..s.dim {
                            vals[(g, e)] = buf[e] * w;
                        }
                    }
                }
                let c = vinv * vals;
                let mut coef = vec![0.0; Q * s.dim];
                for k in 0..Q {
                    for e in 0..s.dim {
                        coef[k * s.dim + e] = c[(k, e)];
                    }
                }
                TPoly { dim: s.dim, coef }
            })
            .collect();
        // seg_int[i][j - i] = in-segment integral over slots i..=j.
        let mut seg_int: Vec<Vec<TPoly>> = Vec::with_capacity(r);
        for i in 0..r {
            let mut row = Vec::with_capacity(r - i);
            let mut cur = polys[i].integrate();
            row.push(cur.clone());
            for p in &polys[i + 1..] {
                cur = cur.outer(p).integrate();
                row.push(cur.clone());
            }
            seg_int.push(row);
        }
        let combine = |prefix: &Vec<Vec<f64>>, k: usize, x: f64| -> Vec<f64> {
            let mut v = prefix[k].clone();
            for i in 0..k {
                let s = seg_int[i][k - 1 - i].eval(x);
                add_outer(&mut v, &prefix[i], &s);
            }
            v
        };
        while ti < times.len() && times[ti] < b - 1e-14 * b.abs().max(1.0) {
            let x = 2.0 * (times[ti] - a) / eps - 1.0;
            out.push(combine(&prefix, r, x));
            ti += 1;
        }
        let next: Vec<Vec<f64>> = (0..=r).map(|k| if k == 0 { vec![1.0] } else { combine(&prefix, k, 1.0) }).collect();
        prefix = next;
        while ti < times.len() && (times[ti] <= b + 1e-14 * b.abs().max(1.0) || l + 1 == nseg) {
            out.push(prefix[r].clone());
            ti += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::PathKind;

    fn path2() -> SampledPath {
        SampledPath::new(1.0, 2, 2, vec![0.0, 0.0, 0.4, -0.3, 0.1, 0.5, 0.9, 0.2, 0.6, 1.0], PathKind::Raw).unwrap()
    }

    #[test]
    fn one_slot_driver_integral_is_increment() {
        let p = path2();
        let slot = Slot { dim: 1, weight: Weight::Driver(1), f: Box::new(|_, o| o[0] = 1.0) };
        let v = iterated_integrals(&[slot], &Segments::from_path(&p), &[0.0, 0.3, 1.0]);
        assert_eq!(v[0][0], 0.0);
        let mut x = [0.0; 2];
        p.eval(0.3, &mut x);
        assert!((v[1][0] - x[1]).abs() < 1e-14);
        assert!((v[2][0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn smooth_functions_against_time() {
        let seg = Segments::time_only((0..=4).map(|i| i as f64 * 0.25).collect());
        let s1 = Slot { dim: 1, weight: Weight::Time, f: Box::new(|t, o| o[0] = t.cos()) };
        let s2 = Slot { dim: 1, weight: Weight::Time, f: Box::new(|t, o| o[0] = t.exp()) };
        // ∫_0^1 ∫_0^{t2} cos t1 dt1 e^{t2} dt2 = ∫ sin(t) e^t dt
        let v = iterated_integrals(&[s1, s2], &seg, &[1.0]);
        let exact = 0.5 * (1f64.exp() * (1f64.sin() - 1f64.cos()) + 1.0);
        assert!((v[0][0] - exact).abs() < 1e-13, "{}", v[0][0] - exact);
    }

    #[test]
    fn two_slot_constant_is_signature() {
        let p = path2();
        let slots: Vec<Slot> =
            (0..2).map(|j| Slot { dim: 1, weight: Weight::Driver(j), f: Box::new(|_, o: &mut [f64]| o[0] = 1.0) }).collect();
        let v = iterated_integrals(&slots, &Segments::from_path(&p), &[1.0]);
        let lift = crate::lift::lift_piecewise_linear(&p);
        assert!((v[0][0] - lift.second(0, 4)[(0, 1)]).abs() < 1e-14);
    }
}

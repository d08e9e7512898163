//! Grid-constructive sewing: compensated Riemann sums over dyadic
//! refinements, Young integrals and rough integrals against level-2 lifts.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::{empirical_holder_exponent, rng_for, PathKind, SampledPath};
use crate::lift::Level2Lift;
use crate::util::{linear_fit, median, order_median};

/// A two-parameter germ `(s, t) ↦ A_{s,t}`.
pub trait Germ: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, s: f64, t: f64, out: &mut [f64]);
}

pub struct FnGerm<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, f64, &mut [f64]) + Sync> FnGerm<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, f64, &mut [f64]) + Sync> Germ for FnGerm<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) {
        (self.f)(s, t, out)
    }
}

#[derive(Debug, Clone)]
pub struct SewOptions {
    pub horizon: f64,
    /// Finest dyadic refinement level.
    pub level: u32,
    pub check_defect: bool,
    pub defect_triples: usize,
    /// Defect slopes must exceed `1 + defect_tolerance`.
    pub defect_tolerance: f64,
    /// Accelerate the limit with the measured geometric contraction when the
    /// Cauchy differences are in their asymptotic regime.
    pub extrapolate: bool,
    pub seed: u64,
}

impl SewOptions {
    pub fn new(horizon: f64, level: u32) -> Self {
        Self {
            horizon,
            level,
            check_defect: true,
            defect_triples: 500,
            defect_tolerance: 0.0,
            extrapolate: true,
            seed: 0x5e11,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SewingReport {
    pub levels: Vec<u32>,
    /// Compensated sum over `[0, T]` at each level.
    pub totals: Vec<Vec<f64>>,
    /// `sup_t |S_{j+1}(t) − S_j(t)|` over level-`j` points, for `j < L`.
    pub cauchy: Vec<f64>,
    /// Sewing exponent estimated from the Cauchy differences, `1 − slope`.
    pub fitted_rate: f64,
    pub contraction: f64,
    pub converged: bool,
    pub extrapolated: bool,
    pub defect_slope: Option<f64>,
    /// Slope of the local remainder `|I_{s,t} − A_{s,t}|` against `|t − s|`.
    pub local_slope: Option<f64>,
    /// Empirical Hölder exponents of integrand and driver, when known.
    pub exponents: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SewResult {
    /// Limit estimate on the finest grid.
    pub path: SampledPath,
    /// Raw compensated sums at the finest level.
    pub finest: SampledPath,
    pub report: SewingReport,
}

impl SewResult {
    pub fn terminal(&self) -> &[f64] {
        self.path.at(self.path.len() - 1)
    }
}

/// Log-log slope of the median defect `|δA_{s,u,t}|` on random dyadic triples.
pub fn defect_slope<G: Germ + ?Sized>(germ: &G, horizon: f64, level: u32, triples: usize, seed: u64) -> Option<f64> {
    let d = germ.dim();
    let hi = level.max(2) - 1;
    let lo = hi.saturating_sub(7);
    let nlev = (hi - lo + 1) as usize;
    let mut rng = rng_for(seed, 0xdef);
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); nlev];
    let (mut a, mut b, mut c) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for q in 0..triples {
        let j = lo + (q % nlev) as u32;
        let h = horizon / (1u64 << (j + 1)) as f64;
        let l = rng.random_range(0..(1u64 << j));
        let s = 2.0 * l as f64 * h;
        germ.eval(s, s + 2.0 * h, &mut a);
        germ.eval(s, s + h, &mut b);
        germ.eval(s + h, s + 2.0 * h, &mut c);
        let norm = (0..d).map(|k| (a[k] - b[k] - c[k]).powi(2)).sum::<f64>().sqrt();
        per[(j - lo) as usize].push(norm);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, v) in per.iter().enumerate() {
        let m = median(v);
        let scale = v.iter().fold(0.0f64, |x, y| x.max(*y));
        if m > 1e-15 * scale.max(1e-300) && m > 0.0 {
            let h = horizon / (1u64 << (lo + i as u32 + 1)) as f64;
            xs.push(h.ln());
            ys.push(m.ln());
        }
    }
    if xs.len() < 2 {
        return None;
    }
    Some(linear_fit(&xs, &ys).0)
}

pub fn sew<G: Germ + ?Sized>(germ: &G, opts: &SewOptions) -> Result<SewResult> {
    let d = germ.dim();
    let big_l = opts.level;
    let horizon = opts.horizon;
    let mut defect = None;
    if opts.check_defect {
        defect = defect_slope(germ, horizon, big_l, opts.defect_triples, opts.seed);
        if let Some(s) = defect {
            if s < 1.0 + opts.defect_tolerance {
                return Err(Error::SewingPrecondition { slope: s, threshold: 1.0 + opts.defect_tolerance });
            }
        }
    }
    let mut buf = vec![0.0; d];
    // Cumulative sums at each level's own points.
    let sums: Vec<Vec<f64>> = (0..=big_l)
        .map(|j| {
            let n = 1usize << j;
            let h = horizon / n as f64;
            let mut s = vec![0.0; (n + 1) * d];
            for l in 0..n {
                let t1 = if l + 1 == n { horizon } else { (l + 1) as f64 * h };
                germ.eval(l as f64 * h, t1, &mut buf);
                for k in 0..d {
                    s[(l + 1) * d + k] = s[l * d + k] + buf[k];
                }
            }
            s
        })
        .collect();
    let cauchy: Vec<f64> = (0..big_l as usize)
        .map(|j| {
            let n = 1usize << j;
            (0..=n)
                .map(|i| {
                    (0..d).map(|k| (sums[j + 1][2 * i * d + k] - sums[j][i * d + k]).powi(2)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let totals = (0..=big_l as usize).map(|j| sums[j][(1usize << j) * d..].to_vec()).collect();

    let scale = cauchy.iter().fold(0.0f64, |a, b| a.max(*b));
    let tail: Vec<(f64, f64)> = cauchy
        .iter()
        .enumerate()
        .skip(cauchy.len().saturating_sub(4))
        .filter(|(_, c)| **c > 1e-14 * scale.max(1e-300) && **c > 0.0)
        .map(|(j, c)| (j as f64, c.log2()))
        .collect();
    let (fitted_rate, contraction, converged) = if scale == 0.0 || tail.len() < 2 {
        (f64::INFINITY, 0.0, true)
    } else {
        let xs: Vec<f64> = tail.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = tail.iter().map(|p| p.1).collect();
        let slope = linear_fit(&xs, &ys).0;
        (1.0 - slope, 2f64.powf(slope), slope < 0.0)
    };
    if !converged {
        log::warn!("compensated sums fail to contract (ratio {contraction:.3})");
    }

    let n = 1usize << big_l;
    let finest_vals = sums[big_l as usize].clone();
    let mut limit = finest_vals.clone();
    let mut extrapolated = false;
    if opts.extrapolate && big_l >= 3 && converged && scale > 0.0 {
        let c = &cauchy;
        let k = c.len();
        let r1 = c[k - 1] / c[k - 2];
        let r2 = c[k - 2] / c[k - 3];
        if r1.is_finite() && r2.is_finite() && r1 < 0.9 && (r1 - r2).abs() < 0.05 * r1.max(r2) {
            let h = horizon / n as f64;
            let coarse = &sums[big_l as usize - 1];
            let w = r1 / (1.0 - r1);
            for i in 0..=n {
                for k in 0..d {
                    let prev = if i % 2 == 0 {
                        coarse[(i / 2) * d + k]
                    } else {
                        germ.eval((i - 1) as f64 * h, i as f64 * h, &mut buf);
                        coarse[(i / 2) * d + k] + buf[k]
                    };
                    limit[i * d + k] += w * (finest_vals[i * d + k] - prev);
                }
            }
            extrapolated = true;
        }
    }
    let kind = PathKind::Raw;
    let report = SewingReport {
        levels: (0..=big_l).collect(),
        totals,
        cauchy,
        fitted_rate,
        contraction,
        converged,
        extrapolated,
        defect_slope: defect,
        local_slope: None,
        exponents: None,
    };
    Ok(SewResult {
        path: SampledPath::new(horizon, big_l, d, limit, kind)?,
        finest: SampledPath::new(horizon, big_l, d, finest_vals, kind)?,
        report,
    })
}

/// Slope of the median `|I_{s,t} − A_{s,t}|` against `|t − s|` over grid
/// levels `lo..=hi` of the integral path.
pub fn local_bound_slope<G: Germ + ?Sized>(germ: &G, integral: &SampledPath, lo: u32, hi: u32) -> Option<f64> {
    let d = germ.dim();
    let mut buf = vec![0.0; d];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in lo..=hi.min(integral.levels) {
        let stride = 1usize << (integral.levels - j);
        let rem: Vec<f64> = (0..(1usize << j))
            .map(|l| {
                let (s, t) = (l * stride, (l + 1) * stride);
                germ.eval(integral.times[s], integral.times[t], &mut buf);
                (0..d).map(|k| (integral.at(t)[k] - integral.at(s)[k] - buf[k]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let m = order_median(&rem);
        if m > 0.0 {
            xs.push((integral.horizon() / (1u64 << j) as f64).ln());
            ys.push(m.ln());
        }
    }
    (xs.len() >= 2).then(|| linear_fit(&xs, &ys).0)
}

/// Dyadic levels on which a path carries its roughness.
fn rough_levels(p: &SampledPath) -> (u32, u32) {
    let hi = match p.kind {
        PathKind::PiecewiseLinear { level } => level,
        PathKind::Raw => p.levels,
    }
    .max(1);
    (hi.saturating_sub(6).max(1).min(hi), hi)
}

/// `∫₀^· Z dX` for a matrix-valued integrand stored row-major with
/// `z.dim = n · x.dim`; the result has dimension `n`.
pub fn young_integral(z: &SampledPath, x: &SampledPath, opts: &SewOptions) -> Result<SewResult> {
    let dx = x.dim;
    if z.dim % dx != 0 {
        return Err(Error::GridMismatch(format!("integrand dimension {} is not a multiple of {}", z.dim, dx)));
    }
    let n = z.dim / dx;
    let (lo, hi) = rough_levels(x);
    let (zlo, zhi) = rough_levels(z);
    let alpha = empirical_holder_exponent(z, zlo, zhi).min(1.0);
    let beta = empirical_holder_exponent(x, lo, hi).min(1.0);
    if alpha + beta <= 1.0 {
        return Err(Error::SewingPrecondition { slope: alpha + beta, threshold: 1.0 });
    }
    let germ = FnGerm::new(n, |s: f64, t: f64, out: &mut [f64]| {
        let mut zs = vec![0.0; z.dim];
        let mut xs = vec![0.0; dx];
        let mut xt = vec![0.0; dx];
        z.eval(s, &mut zs);
        x.eval(s, &mut xs);
        x.eval(t, &mut xt);
        for a in 0..n {
            out[a] = (0..dx).map(|j| zs[a * dx + j] * (xt[j] - xs[j])).sum();
        }
    });
    let mut res = sew(&germ, opts)?;
    res.report.exponents = Some((alpha, beta));
    res.report.local_slope = local_bound_slope(&germ, &res.path, lo.min(opts.level), hi.min(opts.level));
    Ok(res)
}

/// Integrand with a Gubinelli derivative, evaluable at arbitrary times.
///
/// `z(t)` is an `n × d` matrix (row-major), `zprime(t)` is `n × d × d` with
/// `Z_t − Z_s ≈ Σ_k Z′_s[.., .., k] δX^k_{s,t}`.
pub struct ControlledPath<'a> {
    pub n: usize,
    pub d: usize,
    pub z: Box<dyn Fn(f64, &mut [f64]) + Sync + 'a>,
    pub zprime: Box<dyn Fn(f64, &mut [f64]) + Sync + 'a>,
}

impl<'a> ControlledPath<'a> {
    /// Linear interpolation of grid samples.
    pub fn from_samples(z: &'a SampledPath, zprime: &'a SampledPath, d: usize) -> Result<Self> {
        if z.dim % d != 0 || zprime.dim != z.dim * d {
            return Err(Error::GridMismatch("controlled path shapes do not conform".into()));
        }
        Ok(Self {
            n: z.dim / d,
            d,
            z: Box::new(move |t, o| z.eval(t, o)),
            zprime: Box::new(move |t, o| zprime.eval(t, o)),
        })
    }
}

/// Germ `Z_s δX_{s,t} + Z′_s 𝕏_{s,t}` against a level-2 lift.
pub fn rough_germ<'a>(z: &'a ControlledPath<'a>, x: &'a Level2Lift) -> impl Germ + 'a {
    let (n, d) = (z.n, z.d);
    FnGerm::new(n, move |s: f64, t: f64, out: &mut [f64]| {
        let mut zs = vec![0.0; n * d];
        let mut zp = vec![0.0; n * d * d];
        (z.z)(s, &mut zs);
        (z.zprime)(s, &mut zp);
        let (xs, as_) = x.prefix_at(s);
        let (xt, at) = x.prefix_at(t);
        for a in 0..n {
            let mut v = 0.0;
            for j in 0..d {
                let dxj = xt[j] - xs[j];
                v += zs[a * d + j] * dxj;
                for k in 0..d {
                    let area = at[k * d + j] - as_[k * d + j] - xs[k] * dxj;
                    v += zp[a * d * d + j * d + k] * area;
                }
            }
            out[a] = v;
        }
    })
}

pub fn rough_integral(z: &ControlledPath, x: &Level2Lift, opts: &SewOptions) -> Result<SewResult> {
    if z.d != x.dim {
        return Err(Error::GridMismatch(format!("integrand expects dimension {}, lift has {}", z.d, x.dim)));
    }
    let germ = rough_germ(z, x);
    let mut res = sew(&germ, opts)?;
    let hi = x.levels.min(opts.level).max(1);
    res.report.local_slope = local_bound_slope(&germ, &res.path, hi.saturating_sub(6).max(1), hi);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{dyadic_approx, sample_fbm, FbmConfig};
    use crate::lift::lift_piecewise_linear;

    fn fbm1(h: f64, levels: u32, seed: u64) -> SampledPath {
        sample_fbm(&FbmConfig { hurst: h, dimension: 1, horizon: 1.0, levels, seed }).unwrap()
    }

    #[test]
    fn additive_germ_is_exact_at_every_level() {
        let f = |t: f64| (3.0 * t).sin() + t * t;
        let g = FnGerm::new(1, |s: f64, t: f64, o: &mut [f64]| o[0] = f(t) - f(s));
        let r = sew(&g, &SewOptions::new(1.0, 8)).unwrap();
        for (i, t) in r.path.times.iter().enumerate() {
            assert!((r.path.at(i)[0] - (f(*t) - f(0.0))).abs() < 1e-12);
        }
        assert!(r.report.totals.iter().all(|v| (v[0] - (f(1.0) - f(0.0))).abs() < 1e-12));
        assert!(r.report.converged);
    }

    #[test]
    fn constant_integrand_gives_increment() {
        let x = fbm1(0.7, 8, 1);
        let z = SampledPath::from_fn(1.0, 8, 1, |_, o| o[0] = 2.5);
        let r = young_integral(&z, &x, &SewOptions::new(1.0, 8)).unwrap();
        assert!((r.terminal()[0] - 2.5 * x.at(256)[0]).abs() < 1e-12);
    }

    #[test]
    fn classical_integral_of_t_dt() {
        let z = SampledPath::from_fn(1.0, 4, 1, |t, o| o[0] = t);
        let r = young_integral(&z, &z, &SewOptions::new(1.0, 12)).unwrap();
        assert!((r.terminal()[0] - 0.5).abs() < 1e-10, "{}", r.terminal()[0]);
    }

    #[test]
    fn chain_rule_on_piecewise_linear_driver() {
        let x = SampledPath::new(1.0, 2, 1, vec![0.3, 1.1, -0.4, 0.9, 0.2], PathKind::Raw).unwrap();
        let g = FnGerm::new(1, |s: f64, t: f64, o: &mut [f64]| {
            let (mut a, mut b) = ([0.0], [0.0]);
            x.eval(s, &mut a);
            x.eval(t, &mut b);
            o[0] = a[0] * (b[0] - a[0]);
        });
        let r = sew(&g, &SewOptions::new(1.0, 12)).unwrap();
        let exact = 0.5 * (0.2f64 * 0.2 - 0.3 * 0.3);
        assert!((r.terminal()[0] - exact).abs() < 1e-8, "{}", r.terminal()[0] - exact);
        assert!(r.report.extrapolated);
    }

    #[test]
    fn young_chain_rule_on_fbm() {
        let raw = fbm1(0.7, 12, 21);
        let b = dyadic_approx(&raw, 8).unwrap();
        let r = young_integral(&b, &b, &SewOptions::new(1.0, 12)).unwrap();
        let bt = b.at(b.len() - 1)[0];
        assert!((r.terminal()[0] - 0.5 * bt * bt).abs() < 1e-6);
        let (a, be) = r.report.exponents.unwrap();
        assert!(r.report.local_slope.unwrap() >= a + be - 0.1, "{:?}", r.report);
    }

    #[test]
    fn rejects_germ_with_flat_defect() {
        // A_{s,t} = |t − s|^{0.6} has defect of order 0.6.
        let g = FnGerm::new(1, |s: f64, t: f64, o: &mut [f64]| o[0] = (t - s).powf(0.6));
        assert!(matches!(sew(&g, &SewOptions::new(1.0, 10)), Err(Error::SewingPrecondition { .. })));
    }

    #[test]
    fn rough_integral_constant_and_identity() {
        let raw = fbm1(0.4, 8, 4);
        let lift = lift_piecewise_linear(&raw);
        let c = ControlledPath {
            n: 1,
            d: 1,
            z: Box::new(|_, o| o[0] = 1.5),
            zprime: Box::new(|_, o| o[0] = 0.0),
        };
        let r = rough_integral(&c, &lift, &SewOptions::new(1.0, 8)).unwrap();
        assert!((r.terminal()[0] - 1.5 * raw.at(256)[0]).abs() < 1e-12);
        let id = ControlledPath {
            n: 1,
            d: 1,
            z: Box::new(|t, o| raw.eval(t, o)),
            zprime: Box::new(|_, o| o[0] = 1.0),
        };
        let r = rough_integral(&id, &lift, &SewOptions::new(1.0, 8)).unwrap();
        let xt = raw.at(256)[0];
        assert!((r.terminal()[0] - 0.5 * xt * xt).abs() < 1e-8);
    }

    /// Left-point Riemann sums at meshes `2^level` and `2^{level−1}`, extrapolated.
    fn riemann_sin(x: &SampledPath, level: u32) -> f64 {
        let sum = |lv: u32| {
            let n = 1usize << lv;
            let h = x.horizon() / n as f64;
            let (mut a, mut b) = ([0.0], [0.0]);
            (0..n)
                .map(|i| {
                    x.eval(i as f64 * h, &mut a);
                    x.eval((i + 1) as f64 * h, &mut b);
                    a[0].sin() * (b[0] - a[0])
                })
                .sum::<f64>()
        };
        2.0 * sum(level) - sum(level - 1)
    }

    #[test]
    fn rough_integral_of_sine_matches_dense_riemann() {
        let raw = fbm1(0.4, 6, 9);
        let lift = lift_piecewise_linear(&raw);
        let z = ControlledPath {
            n: 1,
            d: 1,
            z: Box::new(|t, o| {
                raw.eval(t, o);
                o[0] = o[0].sin();
            }),
            zprime: Box::new(|t, o| {
                raw.eval(t, o);
                o[0] = o[0].cos();
            }),
        };
        let r = rough_integral(&z, &lift, &SewOptions::new(1.0, 12)).unwrap();
        let oracle = riemann_sin(&raw, 14);
        let v = r.terminal()[0];
        assert!(((v - oracle) / oracle).abs() < 1e-5, "{v} {oracle}");
        let xt = raw.at(raw.len() - 1)[0];
        assert!((v - (1.0 - xt.cos())).abs() < 1e-7, "{}", v - (1.0 - xt.cos()));
    }

    #[test]
    fn young_and_rough_agree_on_smooth_regime() {
        let raw = fbm1(0.7, 10, 13);
        let b = dyadic_approx(&raw, 7).unwrap();
        let lift = lift_piecewise_linear(&b);
        let y = young_integral(&b, &b, &SewOptions::new(1.0, 12)).unwrap();
        let id = ControlledPath { n: 1, d: 1, z: Box::new(|t, o| b.eval(t, o)), zprime: Box::new(|_, o| o[0] = 1.0) };
        let r = rough_integral(&id, &lift, &SewOptions::new(1.0, 12)).unwrap();
        assert!((y.terminal()[0] - r.terminal()[0]).abs() < 1e-8);
    }

    #[test]
    fn integral_is_linear_in_integrand() {
        let x = dyadic_approx(&fbm1(0.7, 10, 2), 6).unwrap();
        let z1 = SampledPath::from_fn(1.0, 10, 1, |t, o| o[0] = t.cos());
        let z2 = SampledPath::from_fn(1.0, 10, 1, |t, o| o[0] = t * t);
        let z3 = SampledPath::from_fn(1.0, 10, 1, |t, o| o[0] = 2.0 * t.cos() - 3.0 * t * t);
        let o = SewOptions { extrapolate: false, ..SewOptions::new(1.0, 10) };
        let i1 = young_integral(&z1, &x, &o).unwrap();
        let i2 = young_integral(&z2, &x, &o).unwrap();
        let i3 = young_integral(&z3, &x, &o).unwrap();
        for i in 0..x.len() {
            assert!((i3.path.at(i)[0] - 2.0 * i1.path.at(i)[0] + 3.0 * i2.path.at(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn cauchy_rate_meets_sewing_exponent() {
        let raw = fbm1(0.7, 12, 5);
        let r = young_integral(&raw, &raw, &SewOptions::new(1.0, 12)).unwrap();
        let (a, b) = r.report.exponents.unwrap();
        assert!(r.report.fitted_rate >= a + b - 0.1, "{:?}", r.report);
    }
}

//! Controlled-system description loaded from TOML, with symbolic derivative
//! tables and assumption validators.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Scope, Var};
use crate::fbm::{rng_for, validate_hurst};
use crate::lie::{verify_nilpotent, MatrixFamily, NilpotencyReport};
use crate::util::hash_hex;

/// Vector of expressions in `(t, x, u)` with first and second `x`-derivatives.
#[derive(Debug, Clone)]
pub struct Field {
    pub exprs: Vec<Expr>,
    jac: Vec<Vec<Expr>>,
    hess: Vec<Vec<Vec<Expr>>>,
    ujac: Vec<Vec<Expr>>,
}

impl Field {
    pub fn new(exprs: Vec<Expr>, n: usize, d: usize) -> Self {
        let jac: Vec<Vec<Expr>> = exprs.iter().map(|e| (0..n).map(|k| e.diff(Var::X(k))).collect()).collect();
        let hess = jac
            .iter()
            .map(|row| row.iter().map(|e| (0..n).map(|l| e.diff(Var::X(l))).collect()).collect())
            .collect();
        let ujac = exprs.iter().map(|e| (0..d).map(|k| e.diff(Var::U(k))).collect()).collect();
        Self { exprs, jac, hess, ujac }
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.exprs.iter().map(|e| e.eval(t, x, u)))
    }

    /// `∂_x` as a `len × n` matrix.
    pub fn jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        DMatrix::from_fn(self.len(), n, |i, k| self.jac[i][k].eval(t, x, u))
    }

    /// `∂_u` as a `len × d` matrix.
    pub fn u_jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), u.len(), |i, k| self.ujac[i][k].eval(t, x, u))
    }

    /// Hessian of component `i`.
    pub fn hessian(&self, i: usize, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        DMatrix::from_fn(n, n, |k, l| self.hess[i][k][l].eval(t, x, u))
    }

    pub fn depends_on_x(&self) -> bool {
        self.exprs.iter().any(|e| e.depends_on_x())
    }

    pub fn depends_on_u(&self) -> bool {
        self.exprs.iter().any(|e| e.depends_on_u())
    }

    pub fn is_zero(&self) -> bool {
        self.exprs.iter().all(|e| e.is_zero())
    }

    /// All second derivatives vanish identically.
    pub fn is_affine_in_x(&self) -> bool {
        self.hess.iter().flatten().flatten().all(|e| e.is_zero())
    }
}

/// Matrix family whose entries are expressions in `t`.
#[derive(Debug, Clone)]
pub struct ExprFamily {
    pub size: usize,
    pub order: usize,
    entries: Vec<Vec<Expr>>,
    derivs: Vec<Vec<Expr>>,
}

impl ExprFamily {
    pub fn new(size: usize, order: usize, entries: Vec<Vec<Expr>>) -> Self {
        let derivs = entries.iter().map(|m| m.iter().map(|e| e.diff(Var::T)).collect()).collect();
        Self { size, order, entries, derivs }
    }

    fn matrix(&self, es: &[Expr], t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| es[i * self.size + j].eval(t, &[], &[]))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().flatten().all(|e| e.is_zero())
    }
}

impl MatrixFamily for ExprFamily {
    fn count(&self) -> usize {
        self.entries.len()
    }
    fn size(&self) -> usize {
        self.size
    }
    fn nilpotency(&self) -> usize {
        self.order
    }
    fn eval(&self, j: usize, t: f64) -> DMatrix<f64> {
        self.matrix(&self.entries[j], t)
    }
    fn deriv(&self, j: usize, t: f64) -> DMatrix<f64> {
        self.matrix(&self.derivs[j], t)
    }
    fn is_constant(&self) -> bool {
        self.entries.iter().flatten().all(|e| !e.depends_on_t())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    n: usize,
    d: usize,
    k1: usize,
    k2: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    b: Vec<String>,
    sigma: Vec<Vec<String>>,
    h: Vec<String>,
    #[serde(rename = "D")]
    d: Vec<Vec<String>>,
    f: String,
    phi: String,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawFbm {
    #[serde(rename = "A", default)]
    a: Vec<Vec<Vec<String>>>,
    #[serde(rename = "A_order", default = "one")]
    a_order: usize,
    #[serde(rename = "C", default)]
    c: Vec<Vec<Vec<String>>>,
    #[serde(rename = "C_order", default = "one")]
    c_order: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    #[serde(default = "ten")]
    d_bound: f64,
    #[serde(default = "hundred")]
    growth: f64,
}

fn ten() -> f64 {
    10.0
}

fn hundred() -> f64 {
    100.0
}

impl Default for RawBounds {
    fn default() -> Self {
        Self { d_bound: ten(), growth: hundred() }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    hurst: f64,
    horizon: f64,
    x0: Vec<f64>,
    dims: RawDims,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    coefficients: RawCoefficients,
    #[serde(default)]
    fbm: RawFbm,
    control: RawControl,
    #[serde(default)]
    bounds: RawBounds,
}

/// The controlled system: state `(x)`, observation `(xi)` and cost.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
    pub hurst: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub b: Field,
    /// One field of length `n` per Brownian component `W^r`.
    pub sigma: Vec<Field>,
    pub h: Field,
    /// `D(t)` entries; column `j` is `D_j`.
    dmat: Vec<Expr>,
    pub f: Field,
    pub phi: Field,
    pub a: ExprFamily,
    pub c: ExprFamily,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub d_bound: f64,
    pub growth_bound: f64,
    source_hash: String,
}

fn parse_all(src: &[String], scope: &Scope, key: &str) -> Result<Vec<Expr>> {
    src.iter()
        .map(|s| Expr::parse(s, scope).map_err(|e| Error::Config(format!("key `{key}`: {e}"))))
        .collect()
}

fn family(raw: &[Vec<Vec<String>>], size: usize, order: usize, scope: &Scope, key: &str) -> Result<ExprFamily> {
    let mut entries = Vec::with_capacity(raw.len());
    for (j, m) in raw.iter().enumerate() {
        if m.len() != size || m.iter().any(|r| r.len() != size) {
            return Err(Error::Config(format!("key `{key}[{}]`: expected a {size}×{size} matrix", j + 1)));
        }
        let flat: Vec<String> = m.iter().flatten().cloned().collect();
        entries.push(parse_all(&flat, scope, key)?);
    }
    for e in entries.iter().flatten() {
        if e.depends_on_x() || e.depends_on_u() {
            return Err(Error::Config(format!("key `{key}`: entries may depend on t only")));
        }
    }
    Ok(ExprFamily::new(size, order, entries))
}

impl SystemSpec {
    pub fn from_toml(src: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        let hash = hash_hex(src.as_bytes());
        Self::build(raw, hash)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// A bundled preset by name (file stem).
    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml(src)
    }

    fn build(raw: RawSpec, source_hash: String) -> Result<Self> {
        validate_hurst(raw.hurst)?;
        if !(raw.horizon > 0.0) {
            return Err(Error::Config("key `horizon`: must be positive".into()));
        }
        let RawDims { n, d, k1, k2 } = raw.dims;
        if n == 0 || d == 0 || k2 == 0 {
            return Err(Error::Config("key `dims`: n, d and k2 must be positive".into()));
        }
        if raw.x0.len() != n {
            return Err(Error::Config(format!("key `x0`: expected {n} entries")));
        }
        let mut scope = Scope::new(n, d);
        scope.params = raw.params.iter().map(|(k, v)| (k.clone(), *v)).collect::<HashMap<_, _>>();
        let co = &raw.coefficients;
        if co.b.len() != n {
            return Err(Error::Config(format!("key `coefficients.b`: expected {n} expressions")));
        }
        if co.sigma.len() != k1 || co.sigma.iter().any(|s| s.len() != n) {
            return Err(Error::Config(format!("key `coefficients.sigma`: expected {k1} lists of {n} expressions")));
        }
        if co.h.len() != k2 {
            return Err(Error::Config(format!("key `coefficients.h`: expected {k2} expressions")));
        }
        if co.d.len() != k2 || co.d.iter().any(|r| r.len() != k2) {
            return Err(Error::Config(format!("key `coefficients.D`: expected a {k2}×{k2} matrix")));
        }
        let b = Field::new(parse_all(&co.b, &scope, "coefficients.b")?, n, d);
        let sigma = co
            .sigma
            .iter()
            .map(|s| parse_all(s, &scope, "coefficients.sigma").map(|e| Field::new(e, n, d)))
            .collect::<Result<Vec<_>>>()?;
        let h = Field::new(parse_all(&co.h, &scope, "coefficients.h")?, n, d);
        let flat_d: Vec<String> = co.d.iter().flatten().cloned().collect();
        let dmat = parse_all(&flat_d, &scope, "coefficients.D")?;
        if dmat.iter().any(|e| e.depends_on_x() || e.depends_on_u()) {
            return Err(Error::Config("key `coefficients.D`: entries may depend on t only".into()));
        }
        let f = Field::new(parse_all(std::slice::from_ref(&co.f), &scope, "coefficients.f")?, n, d);
        let phi = Field::new(parse_all(std::slice::from_ref(&co.phi), &scope, "coefficients.phi")?, n, d);
        if phi.depends_on_u() {
            return Err(Error::Config("key `coefficients.phi`: may depend on x only".into()));
        }
        let a = family(&raw.fbm.a, n, raw.fbm.a_order, &scope, "fbm.A")?;
        let c = family(&raw.fbm.c, k2, raw.fbm.c_order, &scope, "fbm.C")?;
        if raw.control.lower.len() != d || raw.control.upper.len() != d {
            return Err(Error::Config(format!("key `control`: lower and upper need {d} entries")));
        }
        if raw.control.lower.iter().zip(&raw.control.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("key `control`: lower must not exceed upper".into()));
        }
        Ok(Self {
            name: raw.name,
            n,
            d,
            k1,
            k2,
            hurst: raw.hurst,
            horizon: raw.horizon,
            x0: raw.x0,
            b,
            sigma,
            h,
            dmat,
            f,
            phi,
            a,
            c,
            u_lower: raw.control.lower,
            u_upper: raw.control.upper,
            d_bound: raw.bounds.d_bound,
            growth_bound: raw.bounds.growth,
            source_hash,
        })
    }

    pub fn m1(&self) -> usize {
        self.a.count()
    }

    pub fn m2(&self) -> usize {
        self.c.count()
    }

    pub fn config_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn d_matrix(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.k2, self.k2, |i, j| self.dmat[i * self.k2 + j].eval(t, &[], &[]))
    }

    /// `σ(t,x,u)` as an `n × k1` matrix, column `r` is `σ_r`.
    pub fn sigma_matrix(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.k1);
        for (r, s) in self.sigma.iter().enumerate() {
            m.set_column(r, &s.eval(t, x, u));
        }
        m
    }

    pub fn f_value(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        self.f.exprs[0].eval(t, x, u)
    }

    pub fn phi_value(&self, x: &[f64]) -> f64 {
        self.phi.exprs[0].eval(0.0, x, &[])
    }

    pub fn clamp_control(&self, u: &mut [f64]) {
        for ((v, l), h) in u.iter_mut().zip(&self.u_lower).zip(&self.u_upper) {
            *v = v.clamp(*l, *h);
        }
    }

    /// `(H1)`: invertible, bounded `D` on sampled times and nilpotent `A`, `C`.
    pub fn check_h1(&self) -> AssumptionReport {
        let mut issues = Vec::new();
        for i in 0..=16 {
            let t = self.horizon * i as f64 / 16.0;
            let dm = self.d_matrix(t);
            match dm.clone().try_inverse() {
                Some(inv) => {
                    let (a, b) = (dm.norm(), inv.norm());
                    if a > self.d_bound || b > self.d_bound {
                        issues.push(format!("t = {t}: |D| = {a:.3e}, |D^-1| = {b:.3e} exceed bound {}", self.d_bound));
                    }
                }
                None => issues.push(format!("t = {t}: D is singular")),
            }
        }
        let na = verify_nilpotent(&self.a, 4000, 1);
        let nc = verify_nilpotent(&self.c, 4000, 2);
        for (name, r) in [("A", &na), ("C", &nc)] {
            if !r.ok {
                issues.push(format!("{name}: nested commutators beyond the declared order reach {:.3e}", r.worst));
            }
        }
        AssumptionReport { ok: issues.is_empty(), issues, nilpotency: Some((na, nc)) }
    }

    /// `(H2)` spot checks: finite, bounded derivatives and linear growth of
    /// `b`, `σ`, `h` at random points of a box.
    pub fn check_h2(&self, points: usize, seed: u64) -> AssumptionReport {
        let mut rng = rng_for(seed, 0x4832);
        let mut issues = Vec::new();
        let mut worst_growth: f64 = 0.0;
        for _ in 0..points {
            let t = rng.random::<f64>() * self.horizon;
            let x: Vec<f64> = (0..self.n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let u: Vec<f64> = (0..self.d).map(|k| rng.random_range(self.u_lower[k]..=self.u_upper[k])).collect();
            let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt() + u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut fields: Vec<(&str, &Field)> = vec![("b", &self.b), ("h", &self.h)];
            fields.extend(self.sigma.iter().map(|s| ("sigma", s)));
            for (name, fld) in fields {
                let v = fld.eval(t, &x, &u);
                let j = fld.jacobian(t, &x, &u);
                if v.iter().chain(j.iter()).any(|z| !z.is_finite()) {
                    issues.push(format!("{name}: non-finite value or derivative at t = {t:.3}"));
                    continue;
                }
                worst_growth = worst_growth.max(v.norm() / scale);
                if j.norm() > self.growth_bound {
                    issues.push(format!("{name}: |∂x| = {:.3e} exceeds bound {}", j.norm(), self.growth_bound));
                }
            }
        }
        if worst_growth > self.growth_bound {
            issues.push(format!("growth ratio {worst_growth:.3e} exceeds bound {}", self.growth_bound));
        }
        issues.dedup();
        AssumptionReport { ok: issues.is_empty(), issues, nilpotency: None }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.check_h1(), self.check_h2(256, 7)] {
            if !r.ok {
                return Err(Error::Config(r.issues.join("; ")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub ok: bool,
    pub issues: Vec<String>,
    pub nilpotency: Option<(NilpotencyReport, NilpotencyReport)>,
}

const PRESETS: [(&str, &str); 6] = [
    ("commuting", include_str!("../presets/commuting.toml")),
    ("nilpotent_e12e23", include_str!("../presets/nilpotent_e12e23.toml")),
    ("lq_toy", include_str!("../presets/lq_toy.toml")),
    ("partially_observed_lq", include_str!("../presets/partially_observed_lq.toml")),
    ("fully_observed_lq", include_str!("../presets/fully_observed_lq.toml")),
    ("rough_lq", include_str!("../presets/rough_lq.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load_and_validate() {
        for name in preset_names() {
            let s = SystemSpec::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        let s = SystemSpec::preset("nilpotent_e12e23").unwrap();
        assert_eq!((s.n, s.m1()), (3, 2));
        assert!(s.a.is_constant());
    }

    #[test]
    fn malformed_configs_name_the_key() {
        let good = preset_source("lq_toy").unwrap();
        let missing = good.replace("phi =", "psi =");
        let msg = SystemSpec::from_toml(&missing).unwrap_err().to_string();
        assert!(msg.contains("phi") || msg.contains("psi"), "{msg}");
        let bad_expr = good.replace("tanh(x[1])", "tanh(x[2])");
        let msg = SystemSpec::from_toml(&bad_expr).unwrap_err().to_string();
        assert!(msg.contains("coefficients.h") && msg.contains("out of range"), "{msg}");
        let syntax = format!("{good}\n[dims\n");
        let msg = SystemSpec::from_toml(&syntax).unwrap_err().to_string();
        assert!(msg.contains("line"), "{msg}");
        let half = good.replace("hurst = 0.7", "hurst = 0.5");
        assert!(SystemSpec::from_toml(&half).is_err());
    }

    #[test]
    fn derivative_tables() {
        let s = SystemSpec::preset("lq_toy").unwrap();
        let (x, u) = ([0.4], [0.3]);
        let hx = s.h.jacobian(0.0, &x, &u)[(0, 0)];
        assert!((hx - (1.0 - 0.4f64.tanh().powi(2))).abs() < 1e-14);
        let hxx = s.h.hessian(0, 0.0, &x, &u)[(0, 0)];
        let th = 0.4f64.tanh();
        assert!((hxx + 2.0 * th * (1.0 - th * th)).abs() < 1e-14);
        assert!(s.b.is_affine_in_x());
        assert!(s.sigma[0].depends_on_u() && !s.sigma[0].depends_on_x());
    }

    #[test]
    fn h1_flags_singular_d_and_bad_nilpotency() {
        let src = preset_source("lq_toy").unwrap().replace("D = [[\"1\"]]", "D = [[\"0\"]]");
        let s = SystemSpec::from_toml(&src).unwrap();
        assert!(!s.check_h1().ok);
        let src = preset_source("nilpotent_e12e23").unwrap().replace("A_order = 2", "A_order = 1");
        let s = SystemSpec::from_toml(&src).unwrap();
        let r = s.check_h1();
        assert!(!r.ok && r.issues.iter().any(|i| i.starts_with("A")));
    }
}

//! Command-line front end. Every subcommand writes a deterministic set of
//! artifacts into the output directory and returns an exit status:
//! 0 on PASS, 1 on a detected violation, 2 on inconclusive results or
//! errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbm::{
    cache_dir, dyadic_approx, empirical_holder_exponent, sample_fbm, sample_fbm_cached, FbmConfig, FbmSampler,
    CACHE_ENV,
};
use crate::lie::{cbhd_log, matrix_exp, MatrixFamily};
use crate::lift::{chen_defect, lift_piecewise_linear};
use crate::mp::{
    check_steps, control_grid, expansion_check, lq_optimal, mp_condition_with, solve_adjoints_lsmc, ExpansionReport,
    MpConfig, MpReport, Verdict,
};
use crate::report::{heatmap_svg, loglog_svg, num, Artifacts, Envelope};
use crate::sde::{
    consistency_check, run_batch, BatchConfig, Control, Estimate, ExprControl, FbmScheme, Grid, Measure, Quadrature,
    ScheduleControl,
};
use crate::sewing::{rough_integral, young_integral, ControlledPath, SewOptions, SewingReport};
use crate::system::{preset_names, SystemSpec};
use crate::transform::{solve_gamma_ode_direct, wong_zakai_study, MatrixPath, WongZakaiReport};
use crate::util::hash_hex;

#[derive(Debug, Parser)]
#[command(name = "fracctl", version, about = "fBm-driven partially observed control: numerics and maximum-principle checks")]
pub struct Cli {
    /// Print the JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "fracctl-out")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fractional Brownian motion on a dyadic grid.
    Sample(SampleArgs),
    /// Level-2 lift of a piecewise-linear fBm sample.
    Lift(LiftArgs),
    /// Sewing-lemma integral of a driver against itself.
    Integrate(IntegrateArgs),
    /// CBHD log-series for the fBm part of a system.
    Cbhd(CbhdArgs),
    /// Wong–Zakai convergence of the transformation matrix.
    Wongzakai(WongZakaiArgs),
    /// Batch simulation of the transformed system.
    Simulate(SimulateArgs),
    /// Maximum-principle check for a candidate control.
    MpCheck(MpCheckArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub hurst: f64,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub levels: u32,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also emit the piecewise-linear approximation at this level.
    #[arg(long)]
    pub approx: Option<u32>,
    /// Use the exact Cholesky sampler.
    #[arg(long)]
    pub cholesky: bool,
    /// Read/write the binary cache (directory from the cache environment variable).
    #[arg(long)]
    pub cache: bool,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub hurst: f64,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub levels: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Window `s,t`; repeatable. Defaults to the whole horizon.
    #[arg(long, value_parser = parse_pair)]
    pub window: Vec<(f64, f64)>,
}

#[derive(Debug, Args)]
pub struct IntegrateArgs {
    #[arg(long)]
    pub hurst: f64,
    /// Level of the raw fBm sample.
    #[arg(long, default_value_t = 12)]
    pub levels: u32,
    /// Level of the piecewise-linear driver.
    #[arg(long, default_value_t = 8)]
    pub driver_level: u32,
    /// Finest sewing level.
    #[arg(long, default_value_t = 12)]
    pub sew_level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// System file, or the name of a bundled preset.
    #[arg(long)]
    pub spec: String,
}

#[derive(Debug, Args)]
pub struct CbhdArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Overrides the Hurst index of the system.
    #[arg(long)]
    pub hurst: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub levels: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation time (defaults to the horizon).
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct WongZakaiArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub hurst: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub min_level: u32,
    #[arg(long, default_value_t = 10)]
    pub max_level: u32,
    /// Level of the reference solution.
    #[arg(long, default_value_t = 12)]
    pub finest: u32,
    #[arg(long, default_value_t = 1)]
    pub substeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureArg {
    Physical,
    Reference,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Control: `lq-optimal`, a file, or `;`-separated expressions in t and z[i].
    #[arg(long)]
    pub control: String,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = MeasureArg::Physical)]
    pub measure: MeasureArg,
    /// Also simulate the original system and report the consistency defect.
    #[arg(long)]
    pub with_original: bool,
    #[arg(long)]
    pub fix_omega2: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Young,
    Rough,
}

#[derive(Debug, Args)]
pub struct MpCheckArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Control: `lq-optimal`, a file, or `;`-separated expressions in t and z[i].
    #[arg(long)]
    pub control: String,
    /// Shift added to the control (diagnostic suboptimality witness).
    #[arg(long, allow_hyphen_values = true)]
    pub shift: Option<f64>,
    /// Spike widths for the expansion check: `a..b` for 2^-a..2^-b, or a
    /// comma-separated list.
    #[arg(long)]
    pub eps_grid: Option<String>,
    #[arg(long, default_value_t = 2000)]
    pub batch: usize,
    /// Tolerance in regression standard errors.
    #[arg(long, default_value_t = 2.0)]
    pub tol: f64,
    #[arg(long, value_enum)]
    pub hurst_regime: Option<Regime>,
    #[arg(long)]
    pub fix_omega2: Option<u64>,
    #[arg(long, default_value_t = 6)]
    pub level: u32,
    /// Simulation level of the expansion check.
    #[arg(long, default_value_t = 11)]
    pub expansion_level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub times: usize,
    #[arg(long, default_value_t = 20)]
    pub u_points: usize,
    /// Spike start (defaults to a quarter of the horizon).
    #[arg(long)]
    pub spike_tau: Option<f64>,
    /// Spike value, one entry per control component (defaults to the upper bound).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub spike_value: Option<Vec<f64>>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `s,t`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Parses `a..b` (exponents of 2⁻¹) or a comma-separated list of widths.
pub fn parse_eps_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::Config(format!("key `eps-grid`: {m}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|e| bad(format!("{e}")))?;
        let b: u32 = b.trim().parse().map_err(|e| bad(format!("{e}")))?;
        if a > b || b > 30 {
            return Err(bad(format!("invalid exponent range {a}..{b}")));
        }
        return Ok((a..=b).map(|k| 0.5f64.powi(k as i32)).collect());
    }
    s.split(',')
        .map(|v| {
            let x: f64 = v.trim().parse().map_err(|e| bad(format!("`{v}`: {e}")))?;
            if x > 0.0 {
                Ok(x)
            } else {
                Err(bad(format!("width `{v}` must be positive")))
            }
        })
        .collect()
}

pub fn load_spec(src: &str) -> Result<SystemSpec> {
    let p = Path::new(src);
    if p.exists() {
        return SystemSpec::from_file(p);
    }
    if preset_names().contains(&src) {
        return SystemSpec::preset(src);
    }
    Err(Error::Config(format!(
        "key `spec`: `{src}` is neither a file nor a preset ({})",
        preset_names().join(", ")
    )))
}

/// A control source: the LQ oracle, a file of expressions or a CSV
/// schedule, or inline expressions.
pub enum ControlSpec {
    Schedule(ScheduleControl),
    Expr(ExprControl),
}

impl ControlSpec {
    pub fn as_control(&self) -> &dyn Control {
        match self {
            ControlSpec::Schedule(s) => s,
            ControlSpec::Expr(e) => e,
        }
    }
}

fn schedule_from_csv(path: &Path, spec: &SystemSpec, grid: &Grid) -> Result<ScheduleControl> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("key `control`: `{v}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != spec.d + 1 {
            return Err(Error::Config(format!("key `control`: rows need t and {} values", spec.d)));
        }
        rows.push((vals[0], vals[1..].to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::Config("key `control`: empty schedule".into()));
    }
    let values = (0..grid.steps())
        .map(|k| {
            let t = grid.time(k);
            let i = rows.iter().rposition(|r| r.0 <= t + 1e-12).unwrap_or(0);
            rows[i].1.clone()
        })
        .collect();
    Ok(ScheduleControl::new(spec.horizon, values))
}

pub fn load_control(src: &str, spec: &SystemSpec, grid: &Grid, gamma: &MatrixPath) -> Result<ControlSpec> {
    if src == "lq-optimal" {
        let sol = lq_optimal(spec, grid, gamma)?;
        return Ok(ControlSpec::Schedule(ScheduleControl::new(spec.horizon, sol.controls)));
    }
    let p = Path::new(src);
    if p.is_file() {
        if p.extension().is_some_and(|e| e == "csv") {
            return schedule_from_csv(p, spec, grid).map(ControlSpec::Schedule);
        }
        let text = std::fs::read_to_string(p)?;
        let lines: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
        return ExprControl::parse(&lines, spec).map(ControlSpec::Expr);
    }
    let parts: Vec<String> = src.split(';').map(|s| s.trim().to_string()).collect();
    ExprControl::parse(&parts, spec)
        .map(ControlSpec::Expr)
        .map_err(|e| Error::Config(format!("key `control`: {e}")))
}

struct Shifted<'a> {
    base: &'a dyn Control,
    shift: f64,
    spec: &'a SystemSpec,
}

impl Control for Shifted<'_> {
    fn value(&self, obs: &crate::sde::History, out: &mut [f64]) {
        self.base.value(obs, out);
        for v in out.iter_mut() {
            *v += self.shift;
        }
        self.spec.clamp_control(out);
    }
}

fn run_hash(parts: &[String]) -> String {
    hash_hex(parts.join(";").as_bytes())
}

struct Outcome {
    json: String,
    code: i32,
}

fn finish<T: Serialize>(
    art: &mut Artifacts,
    command: &str,
    hash: String,
    checks: Vec<&str>,
    verdict: Option<Verdict>,
    result: &T,
) -> Result<Outcome> {
    let env = Envelope::new(command, hash, checks, verdict.map(Verdict::as_str), result);
    let json = env.to_json()?;
    art.text("summary.json", &json)?;
    Ok(Outcome { json, code: verdict.map_or(0, Verdict::exit_code) })
}

#[derive(Serialize)]
struct SampleSummary {
    config: FbmConfig,
    method: &'static str,
    points: usize,
    sup_norm: f64,
    holder_exponent: f64,
    approx_level: Option<u32>,
    cached: bool,
}

fn cmd_sample(a: &SampleArgs, art: &mut Artifacts) -> Result<Outcome> {
    let cfg = FbmConfig { hurst: a.hurst, dimension: a.dim, horizon: a.horizon, levels: a.levels, seed: a.seed };
    cfg.validate()?;
    let (path, method) = if a.cholesky {
        let s = FbmSampler::new_cholesky(a.hurst, a.levels)?;
        (s.sample(a.horizon, a.dim, &mut crate::fbm::rng_for(a.seed, 0)), "cholesky")
    } else if a.cache {
        let s = FbmSampler::new(a.hurst, a.levels)?;
        (sample_fbm_cached(&cfg, &cache_dir())?, if s.uses_circulant() { "circulant" } else { "cholesky" })
    } else {
        let s = FbmSampler::new(a.hurst, a.levels)?;
        (sample_fbm(&cfg)?, if s.uses_circulant() { "circulant" } else { "cholesky" })
    };
    let mut buf = Vec::new();
    path.write_csv(&mut buf)?;
    art.text("sample.csv", std::str::from_utf8(&buf).expect("csv is utf-8"))?;
    if let Some(k) = a.approx {
        let d = dyadic_approx(&path, k)?.restrict(k)?;
        let mut buf = Vec::new();
        d.write_csv(&mut buf)?;
        art.text(&format!("approx_level{k}.csv"), std::str::from_utf8(&buf).expect("csv is utf-8"))?;
    }
    let summary = SampleSummary {
        config: cfg,
        method,
        points: path.len(),
        sup_norm: path.sup_norm(),
        holder_exponent: empirical_holder_exponent(&path, a.levels.saturating_sub(6).max(1), a.levels),
        approx_level: a.approx,
        cached: a.cache,
    };
    let hash = run_hash(&[cfg.hash(), format!("{method};{:?}", a.approx)]);
    finish(art, "sample", hash, vec!["fbm-sampling"], None, &summary)
}

#[derive(Serialize)]
struct LiftWindow {
    s: f64,
    t: f64,
    first: Vec<f64>,
    second: Vec<Vec<f64>>,
    chen_defect_at_midpoint: f64,
}

#[derive(Serialize)]
struct LiftSummary {
    config: FbmConfig,
    windows: Vec<LiftWindow>,
}

fn cmd_lift(a: &LiftArgs, art: &mut Artifacts) -> Result<Outcome> {
    let cfg = FbmConfig { hurst: a.hurst, dimension: a.dim, horizon: 1.0, levels: a.levels, seed: a.seed };
    let path = sample_fbm(&cfg)?;
    let lift = lift_piecewise_linear(&path);
    let windows = if a.window.is_empty() { vec![(0.0, 1.0)] } else { a.window.clone() };
    let mut out = Vec::new();
    for (s, t) in windows {
        let (i, j) = (lift.index_of(s)?, lift.index_of(t)?);
        if i > j {
            return Err(Error::Config(format!("key `window`: {s} > {t}")));
        }
        let mid = lift.times[(i + j) / 2];
        let m = lift.second(i, j);
        out.push(LiftWindow {
            s,
            t,
            first: lift.first(i, j),
            second: (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect(),
            chen_defect_at_midpoint: chen_defect(&lift, s, mid, t)?.amax(),
        });
    }
    let summary = LiftSummary { config: cfg, windows: out };
    let json = serde_json::to_string_pretty(&summary.windows)?;
    art.text("lift.json", &(json + "\n"))?;
    finish(art, "lift", run_hash(&[cfg.hash(), format!("{:?}", a.window)]), vec!["level-2-lift", "chen-identity"], None, &summary)
}

#[derive(Serialize)]
struct IntegrateSummary {
    config: FbmConfig,
    driver_level: u32,
    mode: &'static str,
    terminal: f64,
    reference: f64,
    error: f64,
    tol: f64,
    sewing: SewingReport,
}

fn cmd_integrate(a: &IntegrateArgs, art: &mut Artifacts) -> Result<Outcome> {
    let cfg = FbmConfig { hurst: a.hurst, dimension: 1, horizon: 1.0, levels: a.levels, seed: a.seed };
    let raw = sample_fbm(&cfg)?;
    let b = dyadic_approx(&raw, a.driver_level)?;
    let opts = SewOptions::new(1.0, a.sew_level);
    let (res, mode) = if a.hurst > 0.5 {
        (young_integral(&b, &b, &opts)?, "young")
    } else {
        let pl = b.restrict(a.driver_level)?;
        let lift = lift_piecewise_linear(&pl);
        let id = ControlledPath { n: 1, d: 1, z: Box::new(|t, o| pl.eval(t, o)), zprime: Box::new(|_, o| o[0] = 1.0) };
        (rough_integral(&id, &lift, &opts)?, "rough")
    };
    let bt = b.at(b.len() - 1)[0];
    let terminal = res.terminal()[0];
    let reference = 0.5 * bt * bt;
    let error = (terminal - reference).abs();
    let verdict = if error < a.tol { Verdict::Pass } else { Verdict::Fail };
    let rows = res.path.times.iter().enumerate().map(|(i, t)| vec![num(*t), num(res.path.at(i)[0])]);
    art.csv("integral.csv", &["t".into(), "integral".into()], rows)?;
    let summary = IntegrateSummary {
        config: cfg,
        driver_level: a.driver_level,
        mode,
        terminal,
        reference,
        error,
        tol: a.tol,
        sewing: res.report,
    };
    let hash = run_hash(&[cfg.hash(), format!("{};{};{:?}", a.driver_level, a.sew_level, a.tol)]);
    finish(art, "integrate", hash, vec!["sewing-limit", "chain-rule"], Some(verdict), &summary)
}

fn with_hurst(spec: &SystemSpec, h: Option<f64>) -> Result<f64> {
    let h = h.unwrap_or(spec.hurst);
    crate::fbm::validate_hurst(h)?;
    Ok(h)
}

#[derive(Serialize)]
struct CbhdSummary {
    system: String,
    hurst: f64,
    levels: u32,
    seed: u64,
    series: crate::lie::CbhdSeries,
    direct: Vec<Vec<f64>>,
    relative_error: f64,
    tol: f64,
}

fn cmd_cbhd(a: &CbhdArgs, art: &mut Artifacts) -> Result<Outcome> {
    let spec = load_spec(&a.spec.spec)?;
    let hurst = with_hurst(&spec, a.hurst)?;
    let fam = &spec.a;
    if fam.count() == 0 {
        return Err(Error::Config("key `fbm.A`: the system has no fBm part".into()));
    }
    let cfg = FbmConfig { hurst, dimension: fam.count(), horizon: spec.horizon, levels: a.levels, seed: a.seed };
    let b = sample_fbm(&cfg)?;
    let t = a.t.unwrap_or(spec.horizon);
    let series = cbhd_log(fam, &b, t)?;
    let direct = solve_gamma_ode_direct(fam, &b, 8)?;
    let idx = b.index_of(t).ok_or(Error::NotOnGrid(t))?;
    let g = &direct.values[idx];
    let relative_error = (matrix_exp(&series.matrix(), Some(fam.size())) - g).norm() / g.norm();
    let verdict = if relative_error < a.tol { Verdict::Pass } else { Verdict::Fail };
    let summary = CbhdSummary {
        system: spec.name.clone(),
        hurst,
        levels: a.levels,
        seed: a.seed,
        direct: crate::lie::cbhd::matrix_rows(g),
        series,
        relative_error,
        tol: a.tol,
    };
    let hash = run_hash(&[spec.config_hash().to_string(), cfg.hash(), format!("{t:?};{:?}", a.tol)]);
    finish(art, "cbhd", hash, vec!["cbhd-log-series", "matrix-ode-oracle"], Some(verdict), &summary)
}

#[derive(Serialize)]
struct WzSummary {
    system: String,
    hurst: f64,
    seed: u64,
    report: WongZakaiReport,
}

fn cmd_wongzakai(a: &WongZakaiArgs, art: &mut Artifacts) -> Result<Outcome> {
    let spec = load_spec(&a.spec.spec)?;
    let hurst = with_hurst(&spec, a.hurst)?;
    let fam = &spec.a;
    if fam.count() == 0 {
        return Err(Error::Config("key `fbm.A`: the system has no fBm part".into()));
    }
    if a.min_level > a.max_level || a.max_level > a.finest {
        return Err(Error::Config("key `levels`: need min-level ≤ max-level ≤ finest".into()));
    }
    let cfg = FbmConfig { hurst, dimension: fam.count(), horizon: spec.horizon, levels: a.finest, seed: a.seed };
    let raw = sample_fbm(&cfg)?;
    let levels: Vec<u32> = (a.min_level..=a.max_level).collect();
    let report = wong_zakai_study(fam, &raw, &levels, hurst, a.substeps)?;
    let verdict = if report.strictly_decreasing { Verdict::Pass } else { Verdict::Fail };
    let pts: Vec<(f64, f64)> = levels.iter().zip(&report.sup_distances).map(|(k, d)| ((1u64 << k) as f64, *d)).collect();
    art.text("wongzakai.svg", &loglog_svg("Wong–Zakai convergence", "grid points", "sup distance to finest", &[("sup |Γ^k − Γ|", pts)]))?;
    let summary = WzSummary { system: spec.name.clone(), hurst, seed: a.seed, report };
    let hash = run_hash(&[spec.config_hash().to_string(), cfg.hash(), format!("{levels:?};{}", a.substeps)]);
    finish(art, "wongzakai", hash, vec!["wong-zakai-convergence"], Some(verdict), &summary)
}

fn regime_scheme(spec: &SystemSpec, regime: Option<Regime>) -> Result<Option<FbmScheme>> {
    match regime {
        None => Ok(None),
        Some(Regime::Young) if spec.hurst > 0.5 => Ok(Some(FbmScheme::Young)),
        Some(Regime::Rough) if spec.hurst < 0.5 => Ok(Some(FbmScheme::SecondOrder)),
        Some(r) => Err(Error::Config(format!("key `hurst-regime`: {r:?} does not match hurst = {}", spec.hurst))),
    }
}

/// Γ on the simulation grid as seen by the LQ oracle: identity without an
/// fBm part, the fixed sample's path when ω₂ is fixed.
pub fn oracle_gamma(spec: &SystemSpec, cfg: &BatchConfig) -> Result<MatrixPath> {
    let grid = Grid::new(spec.horizon, cfg.level);
    if spec.a.count() == 0 || spec.a.is_zero() {
        return Ok(MatrixPath::identity(grid.times(), spec.n));
    }
    if cfg.fix_omega2.is_none() {
        return Err(Error::Config(
            "key `control`: lq-optimal with an fBm part needs a fixed ω₂ (`--fix-omega2`)".into(),
        ));
    }
    let zero = ScheduleControl::new(spec.horizon, vec![vec![0.0; spec.d]]);
    let probe = run_batch(spec, &BatchConfig { samples: 1, ..cfg.clone() }, &zero)?;
    Ok((*probe.samples[0].transform.gamma).clone())
}

#[derive(Serialize)]
struct SimulateSummary {
    system: String,
    config: BatchConfig,
    cost_trapezoid: Estimate,
    cost_left_point: Estimate,
    terminal_density: Estimate,
    consistency_median: Option<f64>,
    consistency_max: Option<f64>,
}

fn cmd_simulate(a: &SimulateArgs, art: &mut Artifacts) -> Result<Outcome> {
    let spec = load_spec(&a.spec.spec)?;
    let mut cfg = BatchConfig::new(a.batch, a.level, a.seed);
    cfg.measure = match a.measure {
        MeasureArg::Physical => Measure::Physical,
        MeasureArg::Reference => Measure::Reference,
    };
    cfg.with_original = a.with_original;
    cfg.fix_omega2 = a.fix_omega2;
    let grid = Grid::new(spec.horizon, a.level);
    let gamma = if a.control == "lq-optimal" { oracle_gamma(&spec, &cfg)? } else { MatrixPath::identity(vec![], spec.n) };
    let ctl = load_control(&a.control, &spec, &grid, &gamma)?;
    let batch = run_batch(&spec, &cfg, ctl.as_control())?;
    let (n, d, k2) = (spec.n, spec.d, spec.k2);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("y{i}")));
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=k2).map(|i| format!("zeta{i}")));
    header.push("rho".into());
    header.extend((1..=d).map(|i| format!("u{i}")));
    std::fs::create_dir_all(art.path("samples"))?;
    for s in &batch.samples {
        let rows = (0..=grid.steps()).map(|k| {
            let mut r = vec![num(grid.time(k))];
            r.extend(s.traj.y[k * n..(k + 1) * n].iter().map(|v| num(*v)));
            r.extend(s.traj.state(k, n).iter().map(|v| num(*v)));
            r.extend(s.traj.zeta[k * k2..(k + 1) * k2].iter().map(|v| num(*v)));
            r.push(num(s.traj.rho[k]));
            let kk = k.min(grid.steps() - 1);
            r.extend(s.traj.control(kk, d).iter().map(|v| num(*v)));
            r
        });
        art.csv(&format!("samples/sample_{:05}.csv", s.index), &header, rows)?;
    }
    let cons = if a.with_original { Some(consistency_check(&spec, &batch)?) } else { None };
    let summary = SimulateSummary {
        system: spec.name.clone(),
        config: cfg.clone(),
        cost_trapezoid: batch.cost(&spec, Quadrature::Trapezoid),
        cost_left_point: batch.cost(&spec, Quadrature::LeftPoint),
        terminal_density: batch.terminal_density(),
        consistency_median: cons.as_ref().map(|c| c.median),
        consistency_max: cons.as_ref().map(|c| c.max),
    };
    let hash = run_hash(&[spec.config_hash().to_string(), serde_json::to_string(&cfg)?, a.control.clone()]);
    finish(art, "simulate", hash, vec!["transformed-simulation", "reference-density"], None, &summary)
}

#[derive(Serialize)]
struct MpSummary {
    system: String,
    config: BatchConfig,
    control: String,
    shift: Option<f64>,
    regime: Regime,
    tol_factor: f64,
    verdict: Verdict,
    maximum_principle: MpReport,
    expansion: Option<ExpansionReport>,
}

fn cmd_mp_check(a: &MpCheckArgs, art: &mut Artifacts) -> Result<Outcome> {
    let spec = load_spec(&a.spec.spec)?;
    let scheme = regime_scheme(&spec, a.hurst_regime)?;
    let regime = if spec.hurst > 0.5 { Regime::Young } else { Regime::Rough };
    if !(a.tol > 0.0) {
        return Err(Error::Config("key `tol`: must be positive".into()));
    }
    let mut cfg = BatchConfig::new(a.batch, a.level, a.seed);
    cfg.scheme = scheme;
    cfg.fix_omega2 = match (regime, a.fix_omega2) {
        (Regime::Rough, None) if spec.m1() + spec.m2() > 0 => Some(0),
        (_, f) => f,
    };
    let grid = Grid::new(spec.horizon, a.level);
    let gamma = if a.control == "lq-optimal" { oracle_gamma(&spec, &cfg)? } else { MatrixPath::identity(vec![], spec.n) };
    let base = load_control(&a.control, &spec, &grid, &gamma)?;
    let shifted;
    let ctl: &dyn Control = match a.shift {
        Some(s) => {
            shifted = Shifted { base: base.as_control(), shift: s, spec: &spec };
            &shifted
        }
        None => base.as_control(),
    };
    let mcfg = MpConfig { times: a.times, u_points: a.u_points, tol_factor: a.tol, ..MpConfig::default() };
    let batch = run_batch(&spec, &cfg, ctl)?;
    let steps = check_steps(&grid, mcfg.times);
    let u_grid = control_grid(&spec, mcfg.u_points);
    let adj = solve_adjoints_lsmc(&spec, &batch, &steps.iter().copied().collect::<BTreeSet<_>>())?;
    let mp = mp_condition_with(&spec, &batch, &adj, &steps, &u_grid, &mcfg)?;

    let mut header = vec!["k".to_string(), "t".into()];
    header.extend((1..=spec.d).map(|i| format!("u{i}")));
    header.extend(["quantile", "estimate", "se", "tol"].map(String::from));
    let rows = mp.cells.iter().map(|c| {
        let mut r = vec![c.k.to_string(), num(c.t)];
        r.extend(c.u.iter().map(|v| num(*v)));
        r.extend([num(c.quantile), num(c.estimate), num(c.se), num(c.tol)]);
        r
    });
    art.csv("mp_estimates.csv", &header, rows)?;
    let median_q = mcfg.quantiles.get(mcfg.quantiles.len() / 2).copied().unwrap_or(0.5);
    let surface: Vec<Vec<f64>> = steps
        .iter()
        .map(|k| {
            u_grid
                .iter()
                .map(|u| {
                    mp.cells
                        .iter()
                        .find(|c| c.k == *k && c.quantile == median_q && &c.u == u)
                        .map_or(f64::NAN, |c| c.estimate)
                })
                .collect()
        })
        .collect();
    let us: Vec<f64> = u_grid.iter().map(|u| u[0]).collect();
    let ts: Vec<f64> = steps.iter().map(|k| grid.time(*k)).collect();
    art.text("mp_surface.svg", &heatmap_svg("conditional expectation of the MP integrand", "u", "t", &us, &ts, &surface))?;

    let expansion = match &a.eps_grid {
        Some(g) => {
            let eps = parse_eps_grid(g)?;
            let mut ecfg = cfg.clone();
            ecfg.level = a.expansion_level;
            ecfg.driver_level = ecfg.driver_level.max(a.expansion_level);
            let eb = run_batch(&spec, &ecfg, ctl)?;
            let tau = a.spike_tau.unwrap_or(spec.horizon / 4.0);
            let value = a.spike_value.clone().unwrap_or_else(|| spec.u_upper.clone());
            Some(expansion_check(&spec, &eb, ctl, tau, &value, &eps)?)
        }
        None => None,
    };
    let verdict = match (&mp.verdict, expansion.as_ref().map(|e| e.verdict)) {
        (Verdict::Fail, _) | (_, Some(Verdict::Fail)) => Verdict::Fail,
        (Verdict::Inconclusive, _) | (_, Some(Verdict::Inconclusive)) => Verdict::Inconclusive,
        _ => Verdict::Pass,
    };
    let mut checks = vec!["maximum-principle-inequality", "adjoint-regression"];
    if expansion.is_some() {
        checks.push("cost-expansion");
    }
    let summary = MpSummary {
        system: spec.name.clone(),
        config: cfg.clone(),
        control: a.control.clone(),
        shift: a.shift,
        regime,
        tol_factor: a.tol,
        verdict,
        maximum_principle: mp,
        expansion,
    };
    let hash = run_hash(&[
        spec.config_hash().to_string(),
        serde_json::to_string(&cfg)?,
        a.control.clone(),
        format!("{:?};{:?};{};{};{};{:?};{:?}", a.shift, a.eps_grid, a.tol, a.times, a.u_points, a.spike_tau, a.spike_value),
    ]);
    finish(art, "mp-check", hash, checks, Some(verdict), &summary)
}

/// Runs a parsed command line; returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let res = Artifacts::new(&cli.out).and_then(|mut art| match &cli.command {
        Command::Sample(a) => cmd_sample(a, &mut art),
        Command::Lift(a) => cmd_lift(a, &mut art),
        Command::Integrate(a) => cmd_integrate(a, &mut art),
        Command::Cbhd(a) => cmd_cbhd(a, &mut art),
        Command::Wongzakai(a) => cmd_wongzakai(a, &mut art),
        Command::Simulate(a) => cmd_simulate(a, &mut art),
        Command::MpCheck(a) => cmd_mp_check(a, &mut art),
    });
    match res {
        Ok(o) => {
            if cli.json {
                print!("{}", o.json);
            }
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point used by the binary; clap usage errors also exit with 2.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

/// Directory reported for the binary sample cache.
pub fn cache_location() -> (String, PathBuf) {
    (CACHE_ENV.to_string(), cache_dir())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_grid_forms() {
        assert_eq!(parse_eps_grid("4..6").unwrap(), vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]);
        assert_eq!(parse_eps_grid("0.5, 0.25").unwrap(), vec![0.5, 0.25]);
        assert!(parse_eps_grid("6..4").is_err());
        assert!(parse_eps_grid("0.5,-1").is_err());
    }

    #[test]
    fn unknown_spec_names_the_key() {
        let e = load_spec("no-such-system").unwrap_err().to_string();
        assert!(e.contains("`spec`"), "{e}");
    }

    #[test]
    fn inline_and_csv_controls() {
        let spec = SystemSpec::preset("lq_toy").unwrap();
        let grid = Grid::new(spec.horizon, 3);
        let id = MatrixPath::identity(grid.times(), 1);
        assert!(matches!(load_control("0.5*t + z[1]", &spec, &grid, &id).unwrap(), ControlSpec::Expr(_)));
        assert!(load_control("x[1]", &spec, &grid, &id).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        std::fs::write(&p, "t,u1\n0,1.0\n0.5,-1.0\n").unwrap();
        let ControlSpec::Schedule(s) = load_control(p.to_str().unwrap(), &spec, &grid, &id).unwrap() else {
            panic!("expected a schedule")
        };
        assert_eq!(s.values.len(), 8);
        assert_eq!(s.values[3], vec![1.0]);
        assert_eq!(s.values[4], vec![-1.0]);
    }

    #[test]
    fn regime_must_match_hurst() {
        let spec = SystemSpec::preset("lq_toy").unwrap();
        assert!(regime_scheme(&spec, Some(Regime::Rough)).is_err());
        assert_eq!(regime_scheme(&spec, Some(Regime::Young)).unwrap(), Some(FbmScheme::Young));
    }
}

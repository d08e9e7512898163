//! C ABI over `fracctl`.
//!
//! Objects are opaque handles created by `frac_*_new`/`frac_*_from_*` and
//! released with the matching `frac_*_free`. Every fallible call returns a
//! [`FracStatus`]; on failure the message is available through
//! [`frac_last_error`] on the same thread. Array outputs use
//! caller-provided buffers with an explicit capacity: when the capacity is
//! too small the call returns `FRAC_STATUS_BUFFER_TOO_SMALL` and writes the
//! required length to `*len` when `len` is non-null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fracctl::fbm::{sample_fbm, FbmConfig, SampledPath};
use fracctl::cli::oracle_gamma;
use fracctl::error::Error;
use fracctl::lie::{cbhd_log, matrix_exp, MatrixFamily};
use fracctl::lift::{chen_defect, lift_piecewise_linear, Level2Lift};
use fracctl::mp::{lq_optimal, mp_condition_check, MpConfig, Verdict};
use fracctl::sde::{run_batch, BatchConfig, Grid, Measure, Quadrature, ScheduleControl, ShiftedControl};
use fracctl::system::SystemSpec;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FracStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FracVerdict {
    Pass = 0,
    Fail = 1,
    Inconclusive = 2,
}

impl From<Verdict> for FracVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Pass => FracVerdict::Pass,
            Verdict::Fail => FracVerdict::Fail,
            Verdict::Inconclusive => FracVerdict::Inconclusive,
        }
    }
}

/// Sampled path on a dyadic grid.
pub struct FracPath(SampledPath);

/// Level-2 lift of a piecewise-linear path.
pub struct FracLift(Level2Lift);

/// Parsed controlled system.
pub struct FracSystem(SystemSpec);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FracStatus {
    match e {
        Error::Config(_) | Error::Expr(_) | Error::Json(_) | Error::Io(_) | Error::Csv(_) => FracStatus::Config,
        Error::Singular(..) | Error::NonFinite(_) | Error::Regression(_) | Error::SewingPrecondition { .. } => {
            FracStatus::Numerical
        }
        _ => FracStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FracStatus, String)>) -> FracStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FracStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {m}"));
            FracStatus::Panic
        }
    }
}

fn lib<T>(r: fracctl::error::Result<T>) -> Result<T, (FracStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (FracStatus, String) {
    (FracStatus::NullPointer, "null pointer argument".into())
}

fn invalid(m: impl Into<String>) -> (FracStatus, String) {
    (FracStatus::InvalidArgument, m.into())
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, (FracStatus, String)> {
    p.as_ref().ok_or_else(null)
}

unsafe fn write_slice(src: &[f64], buf: *mut f64, cap: usize, len: *mut usize) -> Result<(), (FracStatus, String)> {
    if !len.is_null() {
        *len = src.len();
    }
    if cap < src.len() {
        return Err((FracStatus::BufferTooSmall, format!("buffer holds {cap} values, {} needed", src.len())));
    }
    if buf.is_null() {
        return Err(null());
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

unsafe fn out_handle<T>(out: *mut *mut T, v: T) -> Result<(), (FracStatus, String)> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Last error message on this thread, or NULL. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn frac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn frac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Samples `dim` independent fBm components on `2^levels + 1` points of
/// `[0, horizon]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn frac_fbm_sample(
    hurst: f64,
    dim: usize,
    levels: u32,
    horizon: f64,
    seed: u64,
    out: *mut *mut FracPath,
) -> FracStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let p = lib(sample_fbm(&FbmConfig { hurst, dimension: dim, horizon, levels, seed }))?;
        out_handle(out, FracPath(p))
    })
}

/// # Safety
/// `path` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn frac_path_free(path: *mut FracPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Number of grid points and components.
///
/// # Safety
/// `path` must be a live handle; `points` and `dim` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn frac_path_shape(path: *const FracPath, points: *mut usize, dim: *mut usize) -> FracStatus {
    guard(|| {
        let p = &deref(path)?.0;
        if !points.is_null() {
            *points = p.len();
        }
        if !dim.is_null() {
            *dim = p.dim;
        }
        Ok(())
    })
}

/// Copies the time-major values (`points × dim`).
///
/// # Safety
/// `path` must be a live handle, `buf` must hold `cap` doubles, `len` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn frac_path_values(path: *const FracPath, buf: *mut f64, cap: usize, len: *mut usize) -> FracStatus {
    guard(|| write_slice(deref(path)?.0.values(), buf, cap, len))
}

/// Level-2 lift of the path, read as piecewise linear between grid points.
///
/// # Safety
/// `path` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn frac_lift_new(path: *const FracPath, out: *mut *mut FracLift) -> FracStatus {
    guard(|| {
        let p = &deref(path)?.0;
        out_handle(out, FracLift(lift_piecewise_linear(p)))
    })
}

/// # Safety
/// `lift` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn frac_lift_free(lift: *mut FracLift) {
    if !lift.is_null() {
        drop(Box::from_raw(lift));
    }
}

/// Second level over grid points `s ≤ t`, row-major `dim × dim`.
///
/// # Safety
/// `lift` must be a live handle, `buf` must hold `cap` doubles, `len` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn frac_lift_second(
    lift: *const FracLift,
    s: usize,
    t: usize,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> FracStatus {
    guard(|| {
        let l = &deref(lift)?.0;
        if s > t || t >= l.len() {
            return Err(invalid(format!("indices {s}, {t} outside 0..{}", l.len())));
        }
        write_slice(&row_major(&l.second(s, t)), buf, cap, len)
    })
}

/// Largest entry of the Chen defect at grid times `s ≤ u ≤ t`.
///
/// # Safety
/// `lift` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn frac_lift_chen_defect(lift: *const FracLift, s: f64, u: f64, t: f64, out: *mut f64) -> FracStatus {
    guard(|| {
        let l = &deref(lift)?.0;
        let d = lib(chen_defect(l, s, u, t))?;
        if out.is_null() {
            return Err(null());
        }
        *out = d.amax();
        Ok(())
    })
}

unsafe fn system_from(src: fracctl::error::Result<SystemSpec>, out: *mut *mut FracSystem) -> Result<(), (FracStatus, String)> {
    let s = lib(src)?;
    out_handle(out, FracSystem(s))
}

/// Parses a system description (TOML text).
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn frac_system_from_toml(toml: *const c_char, out: *mut *mut FracSystem) -> FracStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null());
        }
        let src = CStr::from_ptr(toml).to_str().map_err(|e| invalid(format!("system text is not UTF-8: {e}")))?;
        system_from(SystemSpec::from_toml(src), out)
    })
}

/// Loads a bundled preset by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn frac_system_preset(name: *const c_char, out: *mut *mut FracSystem) -> FracStatus {
    guard(|| {
        if name.is_null() {
            return Err(null());
        }
        let n = CStr::from_ptr(name).to_str().map_err(|e| invalid(format!("name is not UTF-8: {e}")))?;
        system_from(SystemSpec::preset(n), out)
    })
}

/// # Safety
/// `sys` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn frac_system_free(sys: *mut FracSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// State, control, Brownian and observation dimensions.
///
/// # Safety
/// `sys` must be a live handle; the outputs must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn frac_system_dims(
    sys: *const FracSystem,
    n: *mut usize,
    d: *mut usize,
    k1: *mut usize,
    k2: *mut usize,
) -> FracStatus {
    guard(|| {
        let s = &deref(sys)?.0;
        for (p, v) in [(n, s.n), (d, s.d), (k1, s.k1), (k2, s.k2)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// `Γ_t = exp(K_t)` for the system's fBm coefficient family along `driver`
/// (one component per generator), row-major `n × n`.
///
/// # Safety
/// `sys` and `driver` must be live handles, `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn frac_gamma_cbhd(
    sys: *const FracSystem,
    driver: *const FracPath,
    t: f64,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> FracStatus {
    guard(|| {
        let s = &deref(sys)?.0;
        let p = &deref(driver)?.0;
        if s.a.count() == 0 {
            return Err(invalid("system has no fBm part"));
        }
        let k = lib(cbhd_log(&s.a, p, t))?.matrix();
        write_slice(&row_major(&matrix_exp(&k, Some(s.a.size()))), buf, cap, len)
    })
}

/// Monte-Carlo expected cost under a constant control (`d` values),
/// simulated under the physical measure with trapezoidal quadrature.
///
/// # Safety
/// `sys` must be a live handle, `control` must hold `d` doubles, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn frac_expected_cost(
    sys: *const FracSystem,
    control: *const f64,
    samples: usize,
    level: u32,
    seed: u64,
    mean: *mut f64,
    se: *mut f64,
) -> FracStatus {
    guard(|| {
        let s = &deref(sys)?.0;
        if control.is_null() || mean.is_null() || se.is_null() {
            return Err(null());
        }
        let u = std::slice::from_raw_parts(control, s.d).to_vec();
        let mut cfg = BatchConfig::new(samples, level, seed);
        cfg.measure = Measure::Physical;
        let batch = lib(run_batch(s, &cfg, &ScheduleControl::new(s.horizon, vec![u])))?;
        let e = batch.cost(s, Quadrature::Trapezoid);
        *mean = e.mean;
        *se = e.se;
        Ok(())
    })
}

/// Maximum-principle check of the LQ-optimal open-loop control plus
/// `shift` on a linear-quadratic system. `fix_omega2 < 0` leaves the fBm
/// random per sample (allowed only without an fBm part).
///
/// # Safety
/// `sys` must be a live handle; `verdict`, `worst_estimate`, `worst_tol` must be writable.
#[no_mangle]
pub unsafe extern "C" fn frac_mp_check_lq(
    sys: *const FracSystem,
    shift: f64,
    samples: usize,
    level: u32,
    seed: u64,
    fix_omega2: i64,
    verdict: *mut FracVerdict,
    worst_estimate: *mut f64,
    worst_tol: *mut f64,
) -> FracStatus {
    guard(|| {
        let s = &deref(sys)?.0;
        if verdict.is_null() || worst_estimate.is_null() || worst_tol.is_null() {
            return Err(null());
        }
        let mut cfg = BatchConfig::new(samples, level, seed);
        cfg.fix_omega2 = (fix_omega2 >= 0).then_some(fix_omega2 as u64);
        let grid = Grid::new(s.horizon, level);
        let gamma = lib(oracle_gamma(s, &cfg))?;
        let sol = lib(lq_optimal(s, &grid, &gamma))?;
        let opt = ScheduleControl::new(s.horizon, sol.controls);
        let ctl = ShiftedControl { base: &opt, shift: vec![shift; s.d] };
        let batch = lib(run_batch(s, &cfg, &ctl))?;
        let rep = lib(mp_condition_check(s, &batch, &MpConfig::default()))?;
        *verdict = rep.verdict.into();
        let w = rep.worst.as_ref();
        *worst_estimate = w.map_or(0.0, |c| c.estimate);
        *worst_tol = w.map_or(0.0, |c| c.tol);
        Ok(())
    })
}

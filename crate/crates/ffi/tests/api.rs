use std::ffi::{CStr, CString};
use std::ptr;

use fracctl_ffi::*;

fn last_error() -> String {
    let p = frac_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn sample(hurst: f64, dim: usize, levels: u32, seed: u64) -> *mut FracPath {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { frac_fbm_sample(hurst, dim, levels, 1.0, seed, &mut p) }, FracStatus::Ok);
    assert!(!p.is_null());
    p
}

fn values(p: *const FracPath) -> Vec<f64> {
    let mut len = 0;
    assert_eq!(unsafe { frac_path_values(p, ptr::null_mut(), 0, &mut len) }, FracStatus::BufferTooSmall);
    let mut v = vec![0.0; len];
    assert_eq!(unsafe { frac_path_values(p, v.as_mut_ptr(), v.len(), &mut len) }, FracStatus::Ok);
    v
}

fn preset(name: &str) -> *mut FracSystem {
    let n = CString::new(name).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { frac_system_preset(n.as_ptr(), &mut s) }, FracStatus::Ok);
    s
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(frac_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn path_round_trip_matches_core() {
    let p = sample(0.35, 2, 7, 11);
    let (mut points, mut dim) = (0, 0);
    assert_eq!(unsafe { frac_path_shape(p, &mut points, &mut dim) }, FracStatus::Ok);
    assert_eq!((points, dim), (129, 2));
    let got = values(p);
    let cfg = fracctl::fbm::FbmConfig { hurst: 0.35, dimension: 2, horizon: 1.0, levels: 7, seed: 11 };
    let want = fracctl::fbm::sample_fbm(&cfg).unwrap();
    assert_eq!(got, want.values());
    assert_eq!(&got[..2], &[0.0, 0.0]);
    unsafe { frac_path_free(p) };
}

#[test]
fn lift_symmetric_part_is_half_the_outer_increment() {
    let p = sample(0.6, 2, 6, 5);
    let v = values(p);
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { frac_lift_new(p, &mut l) }, FracStatus::Ok);
    let mut m = [0.0; 4];
    let mut len = 0;
    assert_eq!(unsafe { frac_lift_second(l, 3, 50, m.as_mut_ptr(), 4, &mut len) }, FracStatus::Ok);
    assert_eq!(len, 4);
    let dx = [v[100] - v[6], v[101] - v[7]];
    for i in 0..2 {
        for j in 0..2 {
            let sym = 0.5 * (m[2 * i + j] + m[2 * j + i]);
            assert!((sym - 0.5 * dx[i] * dx[j]).abs() < 1e-12, "({i},{j})");
        }
    }
    let mut defect = f64::NAN;
    assert_eq!(unsafe { frac_lift_chen_defect(l, 0.125, 0.5, 0.875, &mut defect) }, FracStatus::Ok);
    assert!(defect < 1e-12, "{defect}");
    assert_eq!(unsafe { frac_lift_second(l, 50, 3, m.as_mut_ptr(), 4, &mut len) }, FracStatus::InvalidArgument);
    assert!(last_error().contains("outside"));
    assert_eq!(unsafe { frac_lift_second(l, 0, 1, m.as_mut_ptr(), 3, &mut len) }, FracStatus::BufferTooSmall);
    assert_eq!(len, 4);
    unsafe {
        frac_lift_free(l);
        frac_path_free(p);
    }
}

#[test]
fn null_pointers_are_rejected() {
    unsafe {
        assert_eq!(frac_fbm_sample(0.5, 1, 4, 1.0, 0, ptr::null_mut()), FracStatus::NullPointer);
        assert_eq!(frac_path_shape(ptr::null(), ptr::null_mut(), ptr::null_mut()), FracStatus::NullPointer);
        assert_eq!(frac_lift_new(ptr::null(), ptr::null_mut()), FracStatus::NullPointer);
        assert_eq!(frac_system_preset(ptr::null(), ptr::null_mut()), FracStatus::NullPointer);
        assert_eq!(frac_system_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), FracStatus::NullPointer);
        frac_path_free(ptr::null_mut());
        frac_lift_free(ptr::null_mut());
        frac_system_free(ptr::null_mut());
    }
    assert!(last_error().contains("null"));
}

#[test]
fn invalid_arguments_map_to_config_errors() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { frac_fbm_sample(1.5, 1, 4, 1.0, 0, &mut p) }, FracStatus::Config);
    assert!(p.is_null());
    assert!(last_error().contains("hurst"), "{}", last_error());

    let bad = CString::new("name = \"x\"\nhorizon = \"one\"\n").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { frac_system_from_toml(bad.as_ptr(), &mut s) }, FracStatus::Config);
    assert!(s.is_null());
    let unknown = CString::new("no_such_preset").unwrap();
    assert_eq!(unsafe { frac_system_preset(unknown.as_ptr(), &mut s) }, FracStatus::Config);
}

#[test]
fn errors_are_thread_local() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { frac_fbm_sample(-1.0, 1, 4, 1.0, 0, &mut p) }, FracStatus::Config);
    std::thread::spawn(|| assert!(frac_last_error().is_null())).join().unwrap();
    assert!(!frac_last_error().is_null());
}

#[test]
fn system_from_toml_matches_preset() {
    let src = CString::new(fracctl::system::preset_source("partially_observed_lq").unwrap()).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { frac_system_from_toml(src.as_ptr(), &mut s) }, FracStatus::Ok);
    let (mut n, mut d, mut k1, mut k2) = (0, 0, 0, 0);
    assert_eq!(unsafe { frac_system_dims(s, &mut n, &mut d, &mut k1, &mut k2) }, FracStatus::Ok);
    let core = fracctl::system::SystemSpec::preset("partially_observed_lq").unwrap();
    assert_eq!((n, d, k1, k2), (core.n, core.d, core.k1, core.k2));
    unsafe { frac_system_free(s) };
}

#[test]
fn gamma_for_a_nilpotent_generator_is_affine_in_the_driver() {
    // A = 0.5 E12 squares to zero, so exp(-A B_t) = I - A B_t exactly.
    let s = preset("rough_lq");
    let b = sample(0.4, 1, 8, 21);
    let v = values(b);
    let mut g = [0.0; 4];
    let mut len = 0;
    assert_eq!(unsafe { frac_gamma_cbhd(s, b, 1.0, g.as_mut_ptr(), 4, &mut len) }, FracStatus::Ok);
    let bt = *v.last().unwrap();
    let want = [1.0, -0.5 * bt, 0.0, 1.0];
    for (a, w) in g.iter().zip(want) {
        assert!((a - w).abs() < 1e-12, "{g:?} vs {want:?}");
    }
    let lq = preset("lq_toy");
    assert_eq!(unsafe { frac_gamma_cbhd(lq, b, 1.0, g.as_mut_ptr(), 4, &mut len) }, FracStatus::InvalidArgument);
    unsafe {
        frac_system_free(s);
        frac_system_free(lq);
        frac_path_free(b);
    }
}

#[test]
fn expected_cost_is_deterministic_and_penalises_large_controls() {
    let s = preset("lq_toy");
    let run = |u: f64| {
        let (mut m, mut se) = (0.0, 0.0);
        assert_eq!(unsafe { frac_expected_cost(s, &u, 300, 5, 9, &mut m, &mut se) }, FracStatus::Ok);
        (m, se)
    };
    let a = run(0.0);
    assert_eq!(a, run(0.0));
    assert!(a.0.is_finite() && a.1 > 0.0);
    let far = run(3.0);
    assert!(far.0 > a.0 + 3.0 * (far.1 + a.1), "{far:?} vs {a:?}");
    unsafe { frac_system_free(s) };
}

#[test]
fn mp_check_passes_at_the_optimum_and_flags_a_shift() {
    let s = preset("fully_observed_lq");
    let check = |shift: f64| {
        let mut v = FracVerdict::Inconclusive;
        let (mut est, mut tol) = (0.0, 0.0);
        let st = unsafe { frac_mp_check_lq(s, shift, 2000, 6, 3, -1, &mut v, &mut est, &mut tol) };
        assert_eq!(st, FracStatus::Ok, "{}", last_error());
        (v, est, tol)
    };
    assert_eq!(check(0.0).0, FracVerdict::Pass);
    let (v, est, tol) = check(0.5);
    assert_eq!(v, FracVerdict::Fail);
    assert!(-est > tol);

    let r = preset("rough_lq");
    let mut v = FracVerdict::Pass;
    let (mut est, mut tol) = (0.0, 0.0);
    let st = unsafe { frac_mp_check_lq(r, 0.0, 50, 4, 3, -1, &mut v, &mut est, &mut tol) };
    assert_eq!(st, FracStatus::Config);
    assert!(last_error().contains("fix"), "{}", last_error());
    unsafe {
        frac_system_free(s);
        frac_system_free(r);
    }
}

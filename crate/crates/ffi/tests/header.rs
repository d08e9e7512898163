use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn header() -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fracctl.h")).expect("header generated by build.rs")
}

#[test]
fn header_declares_every_entry_point() {
    let h = header();
    assert!(h.starts_with("#ifndef FRACCTL_H"));
    for sym in [
        "frac_last_error",
        "frac_version",
        "frac_fbm_sample",
        "frac_path_shape",
        "frac_path_values",
        "frac_path_free",
        "frac_lift_new",
        "frac_lift_second",
        "frac_lift_chen_defect",
        "frac_lift_free",
        "frac_system_from_toml",
        "frac_system_preset",
        "frac_system_dims",
        "frac_system_free",
        "frac_gamma_cbhd",
        "frac_expected_cost",
        "frac_mp_check_lq",
        "typedef struct FracPath FracPath",
        "FRAC_STATUS_BUFFER_TOO_SMALL = 5",
        "FRAC_VERDICT_INCONCLUSIVE = 2",
    ] {
        assert!(h.contains(sym), "missing {sym}");
    }
}

fn staticlib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let lib = dir.join("libfracctl_ffi.a");
    lib.exists().then_some(lib)
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fracctl.h"

int main(void) {
    FracPath *p = NULL;
    if (frac_fbm_sample(0.4, 1, 6, 1.0, 7, &p) != FRAC_STATUS_OK) return 10;
    size_t n = 0, d = 0, len = 0;
    frac_path_shape(p, &n, &d);
    if (n != 65 || d != 1) return 11;
    double small[4];
    if (frac_path_values(p, small, 4, &len) != FRAC_STATUS_BUFFER_TOO_SMALL || len != 65) return 12;
    double v[65];
    if (frac_path_values(p, v, 65, &len) != FRAC_STATUS_OK || v[0] != 0.0) return 13;
    FracLift *l = NULL;
    if (frac_lift_new(p, &l) != FRAC_STATUS_OK) return 14;
    double m = 0.0;
    frac_lift_second(l, 0, 64, &m, 1, &len);
    double dx = v[64] - v[0];
    if (m - 0.5 * dx * dx > 1e-12 || 0.5 * dx * dx - m > 1e-12) return 15;
    FracSystem *s = NULL;
    if (frac_system_preset("no_such", &s) != FRAC_STATUS_CONFIG) return 16;
    if (frac_last_error() == NULL || strlen(frac_last_error()) == 0) return 17;
    frac_lift_free(l);
    frac_path_free(p);
    printf("%s\n", frac_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let Some(lib) = staticlib() else {
        eprintln!("static library not built; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let exe = tmp.path().join("main");
    fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

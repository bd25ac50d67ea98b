use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use wcmdp_ffi::*;

const CONFIG: &str = r#"{"scenario": "cjs", "K": 2, "T": 4, "p": 0.5, "alpha": 0.5, "beta": 0.5,
    "gamma": 100, "b_low": 0.4, "b_high": 0.8}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(wcmdp_last_error()) }.to_string_lossy().into_owned()
}

fn model(json: &str) -> (WcmdpStatus, *mut WcmdpModel) {
    let text = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { wcmdp_model_new(text.as_ptr(), &mut out) };
    (status, out)
}

#[test]
fn round_trip_through_handles() {
    let (status, m) = model(CONFIG);
    assert_eq!(status, WcmdpStatus::Ok);
    unsafe {
        let (mut horizon, mut states) = (0usize, 0usize);
        assert_eq!(wcmdp_model_dims(m, &mut horizon, &mut states), WcmdpStatus::Ok);
        assert_eq!((horizon, states), (4, 3));

        let mut k = ptr::null_mut();
        assert_eq!(wcmdp_kernel_compute(m, 1e-12, &mut k), WcmdpStatus::Ok);
        let mut sum = 0.0;
        for sp in 0..states {
            let mut v = 0.0;
            assert_eq!(wcmdp_kernel_prob(k, 1, sp, 1, 0, &mut v), WcmdpStatus::Ok);
            sum += v;
        }
        assert!((sum - 1.0).abs() < 1e-9);

        let mut sol = ptr::null_mut();
        assert_eq!(wcmdp_solve_lp(m, k, 0.0, &mut sol), WcmdpStatus::Ok);
        let (mut obj, mut pa, mut kkt) = (0.0, 0.0, 0.0);
        assert_eq!(wcmdp_solution_summary(sol, &mut obj, &mut pa, ptr::null_mut(), &mut kkt), WcmdpStatus::Ok);
        assert!(obj.is_finite() && (0.0..=1.0 + 1e-9).contains(&pa) && kkt <= 1e-6);

        let mut y = vec![0.0; horizon * states * 4];
        assert_eq!(wcmdp_solution_copy_y(sol, y.as_mut_ptr(), y.len()), WcmdpStatus::Ok);
        for t in 0..horizon {
            let mass: f64 = y[t * states * 4..(t + 1) * states * 4].iter().sum();
            assert!((mass - 1.0).abs() < 1e-6);
        }
        assert_eq!(wcmdp_solution_copy_y(sol, y.as_mut_ptr(), 3), WcmdpStatus::BufferTooSmall);
        assert!(last_error().contains("need 48"));

        wcmdp_solution_free(sol);
        wcmdp_kernel_free(k);
        wcmdp_model_free(m);
    }
}

#[test]
fn failures_set_codes_and_messages() {
    let (status, m) = model("{not json");
    assert_eq!(status, WcmdpStatus::InvalidConfig);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let (status, _) = model(&CONFIG.replace("\"p\": 0.5", "\"p\": 1.5"));
    assert_eq!(status, WcmdpStatus::InvalidParams);
    assert!(last_error().contains('p'));

    unsafe {
        assert_eq!(wcmdp_model_new(ptr::null(), &mut ptr::null_mut()), WcmdpStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(wcmdp_model_new(bad.as_ptr().cast(), &mut ptr::null_mut()), WcmdpStatus::InvalidUtf8);

        let (_, m) = model(CONFIG);
        let mut k = ptr::null_mut();
        assert_eq!(wcmdp_kernel_compute(m, 0.5, &mut k), WcmdpStatus::InvalidParams);
        assert_eq!(wcmdp_kernel_compute(m, 1e-12, &mut k), WcmdpStatus::Ok);
        let mut v = 0.0;
        assert_eq!(wcmdp_kernel_prob(k, 3, 0, 0, 0, &mut v), WcmdpStatus::OutOfRange);
        assert_eq!(wcmdp_kernel_prob(k, 0, 0, 0, 0, ptr::null_mut()), WcmdpStatus::NullPointer);

        let (_, other) = model(&CONFIG.replace("\"K\": 2", "\"K\": 3"));
        let mut sol = ptr::null_mut();
        assert_eq!(wcmdp_solve_lp(other, k, 0.0, &mut sol), WcmdpStatus::ShapeMismatch);
        assert!(sol.is_null());

        wcmdp_kernel_free(k);
        wcmdp_model_free(m);
        wcmdp_model_free(other);
        wcmdp_model_free(ptr::null_mut());
    }
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/<name>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib = target_dir().join("libwcmdp_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::TempDir::new().unwrap();
    let src = tmp.path().join("smoke.c");
    let exe = tmp.path().join("smoke");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "wcmdp.h"

int main(void) {
    const char *cfg = "{\"scenario\": \"sjs\", \"K\": 1, \"T\": 3, \"p\": 0.5, \"alpha\": 0.5,"
                      " \"beta\": 0.5, \"gamma\": 100, \"b_low\": 0.5, \"b_high\": 0.5}";
    WcmdpModel *m = NULL;
    WcmdpKernel *k = NULL;
    WcmdpSolution *s = NULL;
    double p = 0.0, kkt = 1.0;
    if (wcmdp_model_new(cfg, &m) != WCMDP_STATUS_OK) return 1;
    if (wcmdp_kernel_compute(m, 1e-12, &k) != WCMDP_STATUS_OK) return 2;
    if (wcmdp_kernel_prob(k, 1, 0, 0, 0, &p) != WCMDP_STATUS_OK) return 3;
    if (wcmdp_solve_lp(m, k, 0.0, &s) != WCMDP_STATUS_OK) return 4;
    if (wcmdp_solution_summary(s, NULL, NULL, NULL, &kkt) != WCMDP_STATUS_OK) return 5;
    if (wcmdp_model_new("[]", &m) == WCMDP_STATUS_OK) return 6;
    printf("%.9f %d %s\n", p, kkt <= 1e-6, wcmdp_last_error()[0] ? "err" : "none");
    wcmdp_solution_free(s);
    wcmdp_kernel_free(k);
    wcmdp_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler runs");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    // SJS with p = q = 1/2 from one job empties the queue w.p. 2/3.
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "0.666666667 1 err");
}

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rpo_lab::metrics::{distance_multi, MetricKind, RewardVector};
use rpo_lab_ffi::*;

fn last_error() -> String {
    let p = rpo_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn pair_distances_and_dpo_limit() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(rpo_distance_pair(RpoMetric::Sq, 2.0, 0.5, &mut out), RpoStatus::Ok);
        assert_eq!(out, 0.5 * 1.5 * 1.5);
        assert_eq!(
            rpo_distance_pair(RpoMetric::BwdBernoulli, 0.3, f64::INFINITY, &mut out),
            RpoStatus::Ok
        );
        assert!((out - (1.0 + (-0.3f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(
            rpo_distance_pair_grad(RpoMetric::Sq, 0.3, f64::INFINITY, &mut out),
            RpoStatus::InvalidArgument
        );
        assert_eq!(
            rpo_distance_pair(RpoMetric::Sqloo, 0.3, 0.1, &mut out),
            RpoStatus::MetricKind
        );
    }
    assert!(last_error().contains("sqloo"));
}

#[test]
fn multi_distance_matches_library() {
    let a = [0.2, -1.0, 0.7, 0.0];
    let b = [1.0, 0.5, -0.25, 2.0];
    let mut out = 0.0;
    let mut grad = [0.0; 4];
    for (m, kind) in [
        (RpoMetric::SqNaive, MetricKind::SqNaive),
        (RpoMetric::Sqloo, MetricKind::Sqloo),
        (RpoMetric::BwdCategorical, MetricKind::BwdCategorical),
        (RpoMetric::FwdCategorical, MetricKind::FwdCategorical),
    ] {
        unsafe {
            assert_eq!(rpo_distance_multi(m, a.as_ptr(), b.as_ptr(), 4, &mut out), RpoStatus::Ok);
            assert_eq!(
                rpo_distance_multi_grad(m, a.as_ptr(), b.as_ptr(), 4, grad.as_mut_ptr()),
                RpoStatus::Ok
            );
        }
        let want = distance_multi(
            kind,
            &RewardVector::new(a.to_vec()).unwrap(),
            &RewardVector::new(b.to_vec()).unwrap(),
        )
        .unwrap();
        assert_eq!(out, want);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(
            rpo_distance_multi(RpoMetric::Sqloo, ptr::null(), ptr::null(), 3, &mut out),
            RpoStatus::NullPointer
        );
        assert_eq!(
            rpo_distance_pair(RpoMetric::Sq, 0.0, 0.0, ptr::null_mut()),
            RpoStatus::NullPointer
        );
        assert_eq!(rpo_policy_kl(ptr::null(), ptr::null(), 0, &mut out), RpoStatus::NullPointer);
        rpo_policy_free(ptr::null_mut());
        rpo_string_free(ptr::null_mut());
    }
    assert!(last_error().contains("null"));
}

#[test]
fn softmax_normalizes_and_rejects_nan() {
    let x = [1000.0, 1001.0, 999.0];
    let mut p = [0.0; 3];
    unsafe {
        assert_eq!(rpo_softmax(x.as_ptr(), 3, p.as_mut_ptr()), RpoStatus::Ok);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let bad = [0.0, f64::NAN];
        assert_eq!(rpo_softmax(bad.as_ptr(), 2, p.as_mut_ptr()), RpoStatus::NonFinite);
    }
}

#[test]
fn score_scales_sum_to_zero_and_need_shift_invariance() {
    let a = [0.1, 0.4, -0.3];
    let b = [2.0, -1.0, 0.5];
    let mut s = [0.0; 3];
    unsafe {
        assert_eq!(
            rpo_score_scales(RpoMetric::BwdCategorical, a.as_ptr(), b.as_ptr(), 3, 2.0, s.as_mut_ptr()),
            RpoStatus::Ok
        );
        assert!(s.iter().sum::<f64>().abs() < 1e-14);
        assert_eq!(
            rpo_score_scales(RpoMetric::SqNaive, a.as_ptr(), b.as_ptr(), 3, 1.0, s.as_mut_ptr()),
            RpoStatus::MetricKind
        );
    }
}

#[test]
fn policy_handle_lifecycle() {
    let (c, v, l) = (2usize, 3usize, 2usize);
    let logits: Vec<f64> = (0..c * v * l).map(|i| i as f64 * 0.1).collect();
    let mut p: *mut RpoPolicy = ptr::null_mut();
    let mut q: *mut RpoPolicy = ptr::null_mut();
    unsafe {
        assert_eq!(rpo_policy_new(c, v, l, logits.as_ptr(), 5, &mut p), RpoStatus::ShapeMismatch);
        assert!(p.is_null());
        assert_eq!(rpo_policy_new(c, v, l, logits.as_ptr(), logits.len(), &mut p), RpoStatus::Ok);

        let mut n = 0;
        assert_eq!(rpo_policy_num_logits(p, &mut n), RpoStatus::Ok);
        assert_eq!(n, 12);
        let mut back = vec![0.0; n];
        assert_eq!(rpo_policy_logits(p, back.as_mut_ptr(), n), RpoStatus::Ok);
        assert_eq!(back, logits);

        let y = [2u32, 0];
        let mut lp = 0.0;
        assert_eq!(rpo_policy_log_prob(p, 0, y.as_ptr(), 2, &mut lp), RpoStatus::Ok);
        let mut g = vec![0.0; l * v];
        assert_eq!(rpo_policy_log_prob_grad(p, 0, y.as_ptr(), 2, g.as_mut_ptr(), g.len()), RpoStatus::Ok);
        for row in g.chunks(v) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        let bad = [3u32, 0];
        assert_eq!(
            rpo_policy_log_prob(p, 0, bad.as_ptr(), 2, &mut lp),
            RpoStatus::InvalidArgument
        );

        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(rpo_policy_to_json(p, &mut json), RpoStatus::Ok);
        assert_eq!(rpo_policy_from_json(json, &mut q), RpoStatus::Ok);
        rpo_string_free(json);
        let mut kl = 1.0;
        assert_eq!(rpo_policy_kl(p, q, 1, &mut kl), RpoStatus::Ok);
        assert_eq!(kl, 0.0);

        let garbage = CString::new("{\"contexts\": 1}").unwrap();
        let mut r: *mut RpoPolicy = ptr::null_mut();
        assert_eq!(rpo_policy_from_json(garbage.as_ptr(), &mut r), RpoStatus::InvalidArgument);
        rpo_policy_free(p);
        rpo_policy_free(q);
    }
}

#[test]
fn identity_suite_runs() {
    let mut failures = usize::MAX;
    unsafe {
        assert_eq!(rpo_identity_check(3, 11, &mut failures), RpoStatus::Ok);
        assert_eq!(rpo_identity_check(0, 11, &mut failures), RpoStatus::InvalidArgument);
    }
    assert_eq!(failures, 0);
}

#[test]
fn checked_in_header_declares_every_export() {
    let header = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/rpo_lab.h"),
    )
    .unwrap();
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("librpo_lab_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let out = std::env::temp_dir().join(format!("rpo_lab_smoke_{}", std::process::id()));
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}

use std::ffi::{CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use quoteflow_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = qf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let records = dir.join("records.jsonl");
    let outlets = dir.join("outlets.jsonl");
    fs::write(
        &outlets,
        "{\"outlet_id\":\"a\",\"name\":\"A\",\"country\":\"C0\",\"orientation\":\"state_controlled\"}\n\
         {\"outlet_id\":\"b\",\"name\":\"B\",\"country\":\"C1\",\"orientation\":\"independent\"}\n",
    )
    .unwrap();
    let mut lines = String::new();
    for (k, outlet) in ["a", "b", "a"].iter().enumerate() {
        lines.push_str(&format!(
            "{{\"quote_id\":\"q{k}\",\"outlet_id\":\"{outlet}\",\"article_id\":\"x{k}\",\"text\":\"words here {k}\",\
             \"published_at\":\"2022-01-0{}T00:00:00Z\",\"speaker\":\"s\",\"topic\":\"t\",\"sentiment\":\"pro_a\",\
             \"country\":\"C0\",\"language\":\"xx\"}}\n",
            k + 1
        ));
    }
    fs::write(&records, lines).unwrap();
    (records, outlets)
}

#[test]
fn corpus_handle_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (records, outlets) = write_corpus(dir.path());
    let mut handle: *mut QfCorpus = ptr::null_mut();
    let status = unsafe { qf_corpus_load(cstr(&records).as_ptr(), cstr(&outlets).as_ptr(), &mut handle) };
    assert_eq!(status, QfStatus::Ok, "{}", if status == QfStatus::Ok { String::new() } else { last_error() });
    assert!(qf_last_error().is_null());
    unsafe {
        assert_eq!(qf_corpus_len(handle), 3);
        assert_eq!(qf_corpus_outlet_count(handle), 2);
        qf_corpus_free(handle);
        qf_corpus_free(ptr::null_mut());
        assert_eq!(qf_corpus_len(ptr::null()), 0);
    }
}

#[test]
fn missing_file_reports_io() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cstr(&dir.path().join("absent.jsonl"));
    let mut handle: *mut QfCorpus = ptr::null_mut();
    let status = unsafe { qf_corpus_load(missing.as_ptr(), missing.as_ptr(), &mut handle) };
    assert_eq!(status, QfStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("absent.jsonl"));
}

#[test]
fn null_arguments_are_rejected() {
    let status = unsafe { qf_corpus_load(ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(status, QfStatus::NullPointer);
    let status = unsafe { qf_exposures(ptr::null(), 2, ptr::null(), 1, ptr::null_mut()) };
    assert_eq!(status, QfStatus::NullPointer);
    assert!(last_error().contains("adjacency"));
}

#[test]
fn salience_counts_match_hand_values() {
    let mut v = f64::NAN;
    // 3/4 of 4 uses after exposure, 4 adopters: sqrt(4) * 0.75 / sqrt(4).
    let s = unsafe {
        qf_salience_from_counts(4, 4, 3, QfVariant::MainText, QfDiscount::Sqrt, QfDiscount::Sqrt, &mut v)
    };
    assert_eq!(s, QfStatus::Ok);
    assert_eq!(v, 0.75);
    let s = unsafe {
        qf_salience_from_counts(4, 4, 3, QfVariant::Figure2, QfDiscount::Identity, QfDiscount::Identity, &mut v)
    };
    assert_eq!(s, QfStatus::Ok);
    assert_eq!(v, 0.75);
    let s = unsafe {
        qf_salience_from_counts(4, 2, 3, QfVariant::MainText, QfDiscount::Sqrt, QfDiscount::Sqrt, &mut v)
    };
    assert_eq!(s, QfStatus::InvalidArgument);
}

#[test]
fn exposures_of_a_chain() {
    // 0 -> 1 -> 2 with weights 1 and 3, source 0.
    let a = [0.0, 1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0];
    let z = [1.0, 0.0, 0.0];
    let mut out = [f64::NAN; 6];
    let s = unsafe { qf_exposures(a.as_ptr(), 3, z.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(s, QfStatus::Ok);
    let ln = |x: f64| (x + 1.0).ln();
    let expect = [0.0, ln(1.0), 0.0, 0.0, 0.0, ln(3.0)];
    for (o, e) in out.iter().zip(expect) {
        assert!((o - e).abs() < 1e-12, "{out:?}");
    }
}

#[test]
fn hdbscan_separates_two_blobs() {
    let mut pts = Vec::new();
    for k in 0..6 {
        pts.extend([k as f64 * 0.01, 0.0]);
    }
    for k in 0..6 {
        pts.extend([10.0 + k as f64 * 0.01, 0.0]);
    }
    let mut labels = [0i64; 12];
    let mut probs = [0.0; 12];
    let mut n_clusters = 0usize;
    let s = unsafe {
        qf_hdbscan(
            pts.as_ptr(),
            12,
            2,
            3,
            2,
            QfSelection::ExcessOfMass,
            labels.as_mut_ptr(),
            probs.as_mut_ptr(),
            &mut n_clusters,
        )
    };
    assert_eq!(s, QfStatus::Ok);
    assert_eq!(n_clusters, 2);
    assert!(labels[..6].iter().all(|&l| l == labels[0] && l >= 0));
    assert!(labels[6..].iter().all(|&l| l == labels[6] && l >= 0));
    assert_ne!(labels[0], labels[6]);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn hdbscan_rejects_bad_params() {
    let pts = [0.0, 1.0];
    let mut labels = [0i64; 2];
    let mut n = 0usize;
    let s = unsafe {
        qf_hdbscan(pts.as_ptr(), 2, 1, 1, 1, QfSelection::Leaf, labels.as_mut_ptr(), ptr::null_mut(), &mut n)
    };
    assert_eq!(s, QfStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn pipeline_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipeline.json");
    let stage = CString::new("all").unwrap();
    let s = unsafe { qf_pipeline_run(cstr(&cfg).as_ptr(), stage.as_ptr(), 0, ptr::null_mut()) };
    assert_eq!(s, QfStatus::Io);

    fs::write(&cfg, "{\"paths\": {}}").unwrap();
    let s = unsafe { qf_pipeline_run(cstr(&cfg).as_ptr(), stage.as_ptr(), 0, ptr::null_mut()) };
    assert_eq!(s, QfStatus::Config);

    let bogus = CString::new("everything").unwrap();
    let s = unsafe { qf_pipeline_run(cstr(&cfg).as_ptr(), bogus.as_ptr(), 0, ptr::null_mut()) };
    assert_eq!(s, QfStatus::InvalidArgument);
    assert!(last_error().contains("everything"));
}

#[test]
fn pipeline_runs_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/pipeline.json");
    let cfg = dir.path().join("pipeline.json");
    fs::copy(fixture, &cfg).unwrap();
    let stage = CString::new("all").unwrap();
    let mut executed = 0usize;
    let s = unsafe { qf_pipeline_run(cstr(&cfg).as_ptr(), stage.as_ptr(), 0, &mut executed) };
    assert_eq!(s, QfStatus::Ok);
    assert_eq!(executed, 10);
    let s = unsafe { qf_pipeline_run(cstr(&cfg).as_ptr(), stage.as_ptr(), 0, &mut executed) };
    assert_eq!(s, QfStatus::Ok);
    assert_eq!(executed, 0);
    assert!(dir.path().join("out/report/outlet_summary.csv").exists());
}

#[test]
fn c_program_links_against_header() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libquoteflow_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "quoteflow.h"
int main(void) {
    double a[4] = {0.0, 2.0, 0.0, 0.0};
    double z[2] = {1.0, 0.0};
    double out[2];
    if (qf_exposures(a, 2, z, 1, out) != QF_STATUS_OK) return 1;
    if (qf_exposures(NULL, 2, z, 1, out) != QF_STATUS_NULL_POINTER) return 2;
    if (qf_last_error() == NULL) return 3;
    printf("%s %.6f\n", qf_version(), out[1]);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let build = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("{} {:.6}", env!("CARGO_PKG_VERSION"), 3f64.ln()));
}

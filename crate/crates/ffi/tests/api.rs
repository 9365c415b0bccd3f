use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cppso::model::fixtures::{counting_fixture, fig1_fixture};
use cppso::model::ModelDoc;
use cppso_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn load(doc: &ModelDoc) -> *mut CppsoModel {
    let json = c(&serde_json::to_string(doc).unwrap());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cppso_model_from_json(json.as_ptr(), &mut m) }, CppsoStatus::Ok);
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cppso_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn model_handles_sample_and_evaluate() {
    let (m, w) = fig1_fixture();
    let h = load(&ModelDoc::from_model(&m).with_weights(&w));
    unsafe {
        assert_eq!(cppso_model_len(h), m.len());
        let mut out = -2;
        let status = cppso_model_sample(h, c("*3").as_ptr(), c("1").as_ptr(), 64, 0, &mut out);
        assert_eq!(status, CppsoStatus::Ok);
        assert_eq!(out, m.by_name("3").unwrap().index() as i64);
        cppso_model_sample(h, c("⊥").as_ptr(), c("1").as_ptr(), 64, 0, &mut out);
        assert_eq!(out, -1);

        let mut json = ptr::null_mut();
        assert_eq!(cppso_model_semantics(h, &mut json), CppsoStatus::Ok);
        let table: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(table["converged"], true);
        cppso_string_free(json);

        let status = cppso_model_sample(h, c("nope").as_ptr(), c("1").as_ptr(), 64, 0, &mut out);
        assert_eq!(status, CppsoStatus::InvalidArgument);
        assert!(last_error().contains("nope"));
        cppso_model_free(h);
    }
}

#[test]
fn oracle_and_generation() {
    let (m, w) = counting_fixture();
    let h = load(&ModelDoc::from_model(&m).with_weights(&w));
    unsafe {
        let (mut matched, mut truncated) = (0.0, 1.0);
        let s = cppso_model_oracle(h, c("4321").as_ptr(), 200, &mut matched, &mut truncated);
        assert_eq!(s, CppsoStatus::Ok);
        assert!((matched - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(truncated, 0.0);
        let mut text = ptr::null_mut();
        let mut done = false;
        assert_eq!(cppso_model_generate(h, 200, 5, &mut text, &mut done), CppsoStatus::Ok);
        assert!(done);
        let printed = CStr::from_ptr(text).to_str().unwrap().to_string();
        assert!(["21", "321", "4321"].contains(&printed.as_str()));
        cppso_string_free(text);
        cppso_model_free(h);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(cppso_model_from_json(ptr::null(), &mut m), CppsoStatus::NullPointer);
        assert_eq!(cppso_model_from_json(c("{").as_ptr(), &mut m), CppsoStatus::Json);
        assert!(m.is_null());
        let bad = [0xffu8, 0];
        assert_eq!(
            cppso_model_from_json(bad.as_ptr().cast(), &mut m),
            CppsoStatus::InvalidUtf8
        );
        let mut chain = ptr::null_mut();
        assert_eq!(
            cppso_chain_load(c("/nonexistent").as_ptr(), &mut chain),
            CppsoStatus::Io
        );
        assert_eq!(cppso_model_len(ptr::null()), 0);
        cppso_model_free(ptr::null_mut());
        cppso_string_free(ptr::null_mut());
    }
}

#[test]
fn experiments_and_chains() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(cppso_experiment_preset(c("A1").as_ptr(), &mut cfg), CppsoStatus::Ok);
        let mut v: serde_json::Value = serde_json::from_str(CStr::from_ptr(cfg).to_str().unwrap()).unwrap();
        cppso_string_free(cfg);
        v["n_chains"] = 1.into();
        v["epochs"] = 2.into();
        v["pg"]["n_particles"] = 30.into();
        v["modeling_check"] = false.into();
        let cfg = c(&v.to_string());
        let out = c(dir.path().to_str().unwrap());
        let mut report = ptr::null_mut();
        assert_eq!(
            cppso_run_experiment(cfg.as_ptr(), out.as_ptr(), &mut report),
            CppsoStatus::Ok
        );
        let r: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        cppso_string_free(report);
        assert_eq!(r["chains"][0]["raw_nll"].as_array().unwrap().len(), 2);

        let snap = c(dir.path().join("chain_0.snapshot.json").to_str().unwrap());
        let mut chain = ptr::null_mut();
        assert_eq!(cppso_chain_load(snap.as_ptr(), &mut chain), CppsoStatus::Ok);
        assert_eq!(cppso_chain_epoch(chain), 2);
        let mut nll = 0.0;
        assert_eq!(
            cppso_chain_nll(chain, c("121").as_ptr(), 200, 0, &mut nll),
            CppsoStatus::Ok
        );
        assert!(nll > 0.0);
        let mut json = ptr::null_mut();
        assert_eq!(cppso_chain_inspect(chain, &mut json), CppsoStatus::Ok);
        cppso_string_free(json);
        assert_eq!(
            cppso_chain_nll(chain, c("x").as_ptr(), 200, 0, &mut nll),
            CppsoStatus::InvalidArgument
        );
        cppso_chain_free(chain);
    }
}

/// The library's build directory, found from this test executable's path.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = artifact_dir().join("libcppso_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "cppso.h"
int main(void) {
    CppsoModel *m = NULL;
    if (cppso_model_from_json("{", &m) != CPPSO_STATUS_JSON) return 1;
    if (cppso_last_error() == NULL) return 2;
    char *cfg = NULL;
    if (cppso_experiment_preset("A1", &cfg) != CPPSO_STATUS_OK) return 3;
    int ok = strstr(cfg, "\"name\":\"A1\"") != NULL;
    cppso_string_free(cfg);
    printf("%s\n", cppso_version());
    return ok ? 0 : 4;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C program failed to build");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

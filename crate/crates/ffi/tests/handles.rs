use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use ordfix_ffi::*;

fn scenario_path(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(format!("{name}.toml"));
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn scenario_load_run_free() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            ordfix_scenario_load(scenario_path("halving").as_ptr(), &mut handle),
            OrdfixStatus::Ok
        );
        assert_eq!(
            ordfix_scenario_run(handle, out_dir.as_ptr()),
            OrdfixStatus::Ok
        );
        assert_eq!(ordfix_scenario_run(handle, ptr::null()), OrdfixStatus::Ok);
        ordfix_scenario_free(handle);
    }
    assert!(dir.path().join("iterate.result.json").exists());
}

#[test]
fn missing_and_malformed_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.toml").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(
            ordfix_scenario_load(missing.as_ptr(), &mut handle),
            OrdfixStatus::Io
        );
        assert!(handle.is_null());
    }
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(
            ordfix_scenario_load(bad.as_ptr(), &mut handle),
            OrdfixStatus::Parse
        );
        let message = CStr::from_ptr(ordfix_last_error()).to_str().unwrap();
        assert!(message.contains("line 1"), "{message}");
    }
}

#[test]
fn unmet_expectation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/halving.toml"),
    )
    .unwrap()
    .replace(
        "directive = \"iterate\"",
        "directive = \"iterate\"\nexpect = \"diverge\"",
    );
    let path = dir.path().join("wrong.toml");
    std::fs::write(&path, text).unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            ordfix_scenario_load(path.as_ptr(), &mut handle),
            OrdfixStatus::Ok
        );
        assert_eq!(
            ordfix_scenario_run(handle, ptr::null()),
            OrdfixStatus::Unmet
        );
        let message = CStr::from_ptr(ordfix_last_error()).to_str().unwrap();
        assert_eq!(message, "unmet runs: iterate");
        ordfix_scenario_free(handle);
    }
}

use std::path::Path;
use std::process::Command;

const EXPORTS: &[&str] = &[
    "ordfix_last_error",
    "ordfix_string_free",
    "ordfix_ordinal_parse",
    "ordfix_ordinal_compare",
    "ordfix_ordinal_add",
    "ordfix_ordinal_to_string",
    "ordfix_ordinal_free",
    "ordfix_scenario_load",
    "ordfix_scenario_run",
    "ordfix_scenario_free",
    "ordfix_affine_fixpoint",
];

fn include_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(include_dir().join("ordfix.h")).unwrap();
    for name in EXPORTS {
        assert!(header.contains(&format!("{name}(")), "{name} missing");
    }
    assert!(header.contains("typedef struct OrdfixOrdinal OrdfixOrdinal;"));
    assert!(header.contains("ORDFIX_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("use.c");
    std::fs::write(
        &source,
        r#"#include "ordfix.h"
int main(void) {
    OrdfixOrdinal *a = 0;
    OrdfixStatus s = ordfix_ordinal_parse("w + 1", &a);
    char *text = 0;
    if (s == ORDFIX_STATUS_OK) s = ordfix_ordinal_to_string(a, &text);
    ordfix_string_free(text);
    ordfix_ordinal_free(a);
    return s == ORDFIX_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include_dir())
        .arg(&source)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}

//! Compiles and runs a small C program against the generated header and
//! the static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "ets_impact.h"

int main(void) {
    EtsPanel *p = NULL;
    if (ets_panel_simulate("null", 7, 200, &p) != ETS_STATUS_OK) return 10;
    EtsPanelCounts c;
    if (ets_panel_counts(p, &c) != ETS_STATUS_OK || c.n_firms != 200) return 11;
    EtsPanel *q = NULL;
    if (ets_panel_simulate("no-such-preset", 7, 0, &q) != ETS_STATUS_CONFIG) return 12;
    if (ets_last_error_message() == NULL) return 13;
    ets_panel_free(p);
    printf("%s\n", ets_version());
    return 0;
}
"#;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// The static library next to this test binary's dependency directory.
fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libets_impact_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = crate_dir().join("include/ets_impact.h");
    assert!(header.exists());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status =
            Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not found; skipped"),
        }
    }
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let build = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output();
    let Ok(build) = build else {
        eprintln!("cc not found; skipped");
        return;
    };
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), ets_impact::VERSION);
}

//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const SOURCE: &str = r#"
#include <math.h>
#include <stdio.h>
#include "tollflow.h"

int main(void) {
    TollflowNetwork *net = NULL;
    if (tollflow_network_quadratic(6, &net) != TOLLFLOW_STATUS_OK) return 1;
    double x[6], p[6], y[6];
    if (tollflow_solve_equilibrium(net, 100.0, 2.0, x, p, y, 6) != TOLLFLOW_STATUS_OK) return 2;
    for (int i = 0; i < 6; i++) {
        if (fabs(x[i] - y[i]) > 1e-6) return 3;
    }
    TollflowSimulation *sim = NULL;
    if (tollflow_simulation_new(net, 100.0, 0.1, 0.05, 0.0015, 0, &sim) != TOLLFLOW_STATUS_OK) return 4;
    tollflow_network_free(net);
    if (tollflow_simulation_step(sim, 100) != TOLLFLOW_STATUS_OK) return 5;
    uint64_t n = 0;
    if (tollflow_simulation_state(sim, x, p, 6, &n) != TOLLFLOW_STATUS_OK || n != 100) return 6;
    if (tollflow_simulation_state(sim, x, p, 2, &n) != TOLLFLOW_STATUS_SHAPE_MISMATCH) return 7;
    if (tollflow_last_error() == NULL) return 8;
    tollflow_simulation_free(sim);
    printf("%.6f\n", p[0]);
    return 0;
}
"#;

/// Directory holding this profile's build artifacts (`target/<profile>`).
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libtollflow_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, SOURCE).unwrap();

    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());

    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let toll: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!(toll >= 0.0);
}

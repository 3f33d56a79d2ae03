//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on PATH.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "smclab.h"

int main(void) {
    size_t sizes[2] = {2, 2};
    double table[4] = {0.25, 0.25, 0.25, 0.25};
    SmclabDistribution *dist = NULL;
    if (smclab_distribution_new(sizes, 2, table, 4, &dist) != SMCLAB_STATUS_OK) return 1;
    size_t both[2] = {0, 1};
    double h = 0.0;
    if (smclab_entropy(dist, both, 2, &h) != SMCLAB_STATUS_OK || fabs(h - 2.0) > 1e-12) return 2;
    smclab_distribution_free(dist);

    SmclabReport *report = NULL;
    if (smclab_oneshot_analyze("modm-sum", 3, 5, 0, &report) != SMCLAB_STATUS_OK) return 3;
    double cost = 0.0;
    smclab_report_randomness_cost(report, &cost);
    smclab_report_free(report);

    uint8_t bits[4] = {1, 0, 1, 1}, out[4];
    if (smclab_polar_transform(bits, 3, out) != SMCLAB_STATUS_NOT_POWER_OF_TWO) return 4;
    if (smclab_last_error()[0] == '\0') return 5;
    printf("ok %s %.6f\n", smclab_version(), cost);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().expect("test executable path");
    exe.parent()
        .and_then(Path::parent)
        .expect("profile dir")
        .to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let lib = target_dir().join("libsmclab_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let output = Command::new(&exe).output().unwrap();
    assert!(
        output.status.success(),
        "smoke program exited with {:?}",
        output.status
    );
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.starts_with("ok "), "{stdout}");
    let cost: f64 = stdout.split_whitespace().last().unwrap().parse().unwrap();
    assert!((cost - 5f64.log2()).abs() < 1e-6, "modm-sum cost {cost}");
}

//! Prints one PASS/FAIL/NOT RUN line per acceptance criterion and fails if
//! any criterion fails. Optional arguments select criteria (`A1 A5`).
//! `AMBS_A6_DIR` points at the distraction-robustness results
//! (default: `results/a6` in the workspace root).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ambs_cli::acceptance::*;

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let wanted = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let work = tempfile::tempdir().expect("temporary directory");
    let a6_root = std::env::var_os("AMBS_A6_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root").join("results/a6"));

    let checks: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("A1", Box::new(a1_oracle_equivalence)),
        ("A2", Box::new(a2_theorem_sweeps)),
        ("A3", Box::new(a3_gaussian_w2)),
        ("A4", Box::new(a4_gradient_integrity)),
        ("A5", Box::new(|| a5_fit_oracle(work.path()))),
        ("A6", Box::new(|| a6_distraction_robustness(&a6_root))),
        ("A7", Box::new(|| a7_adaptive_weight(work.path(), &a6_root))),
        ("A8", Box::new(|| a8_determinism(work.path()))),
    ];
    let mut failed = false;
    for (id, check) in &checks {
        if wanted(id) {
            let v = check();
            failed |= v.status == Status::Fail;
            println!("{v}");
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criterion numbers given as arguments
//! restrict the run to those criteria.

mod contracts;
mod experiments;
mod golden;
mod props;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

pub type Outcome = Result<Verdict, String>;

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut lab = experiments::Lab::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut experiments::Lab) -> Outcome>)> = vec![
        ("golden values", Box::new(|_| golden::run())),
        ("gradient correctness", Box::new(|_| contracts::gradients())),
        ("detachment and fusion contracts", Box::new(|_| contracts::fusion())),
        ("mask properties", Box::new(|_| props::run())),
        ("schedule endpoints", Box::new(|_| props::schedule())),
        ("noise-mitigation ordering", Box::new(|lab| lab.fusion_ordering())),
        ("transfer ordering", Box::new(|lab| lab.transfer_ordering())),
        ("noise detection", Box::new(|lab| lab.noise_detection())),
        ("smoothing ablation", Box::new(|lab| lab.smoothing_ablation())),
        ("determinism", Box::new(|lab| lab.determinism())),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&mut lab)));
        let v = match res {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::new(false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panic: {msg}"))
            }
        };
        if !v.passed {
            failed += 1;
        }
        let tag = if v.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} criterion {:>2} ({name}): {} [{:.1}s]", i + 1, v.detail, t.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        writeln!(out, "{failed} criteria failed").unwrap();
        ExitCode::FAILURE
    }
}

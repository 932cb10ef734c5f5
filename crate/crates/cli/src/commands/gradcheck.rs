use gmtl_core::diagnostics::gradient_suite;
use gmtl_core::{Error, Result};

use crate::GradcheckArgs;

pub fn run(args: GradcheckArgs) -> Result<()> {
    let reports = gradient_suite(args.seeds, args.step, args.tol)?;
    let mut failures = 0usize;
    println!("{:<22}{:>14}{:>8}{:>8}", "target", "max_rel_err", "seeds", "status");
    for r in &reports {
        println!(
            "{:<22}{:>14.3e}{:>8}{:>8}",
            r.target,
            r.max_rel_err,
            r.seeds,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!(
            "{failures} gradient check(s) exceeded tolerance {}",
            args.tol
        )));
    }
    println!("all {} targets within {:.1e}", reports.len(), args.tol);
    Ok(())
}

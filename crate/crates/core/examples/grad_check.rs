//! Finite-difference check of every differentiable operation and of the
//! three composed models at toy size.
//!
//!     cargo run --release --example grad_check

use ged::compute::GradCheckOptions;
use ged::diagnostics::{run_checks, CheckTarget};

fn main() -> anyhow::Result<()> {
    let opts = GradCheckOptions::default();
    let outcomes = run_checks(&CheckTarget::ALL, 3, &opts)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.report.passed()).count();
    println!("{failed} of {} checks over {:e}", outcomes.len(), opts.tolerance);
    anyhow::ensure!(failed == 0, "gradient check failed");
    Ok(())
}

//! Finite-difference verification of the analytic gradients.

use entropy_splat::gradcheck::run_all;

fn main() -> entropy_splat::Result<()> {
    let report = run_all(0)?;
    for s in &report.suites {
        println!("{:<24} {:>5} checks, max relative error {:.2e} (tol {:.0e})", s.name, s.checked, s.max_rel_error, s.tolerance);
    }
    println!("all passed: {}", report.all_passed());
    Ok(())
}

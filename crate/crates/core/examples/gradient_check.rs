//! Finite-difference check of every differentiable op.

use winlin::gradcheck::op_suite;

fn main() -> winlin::Result<()> {
    let mut failed = 0;
    for c in op_suite(0)? {
        let status = if c.passes() { "ok" } else { "FAIL" };
        failed += !c.passes() as usize;
        println!("{:<22} {:>10.2e}  (tol {:.0e}, {} elements)  {status}", c.name, c.report.max_rel_error, c.tolerance, c.report.checked);
    }
    println!("{failed} failures");
    Ok(())
}

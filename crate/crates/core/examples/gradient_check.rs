//! Runs the finite-difference gradient suite over every layer and loss and
//! shows that an injected gradient bug is caught.

use useg::gradcheck::{run_suite, SuiteOptions};

fn main() -> useg::Result<()> {
    for inject_fault in [false, true] {
        let opts = SuiteOptions {
            instances: 5,
            inject_fault,
            ..Default::default()
        };
        let checks = run_suite(&opts)?;
        println!("inject_fault = {inject_fault}");
        for c in &checks {
            println!("  {:<28} max rel err {:.2e}", c.op, c.max_rel_error);
        }
        let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        println!("  overall {}\n", if worst < 1e-5 { "PASS" } else { "FAIL" });
    }
    Ok(())
}

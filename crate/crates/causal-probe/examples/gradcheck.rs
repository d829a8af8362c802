//! Finite-difference validation of every differentiable primitive.
//!
//! Builds 100 randomized scalar-loss scenarios cycling through all op
//! kinds (convolution, pooling, dense, activations, softmax losses,
//! reductions, ...) and compares each analytic gradient element against
//! a central difference.
//!
//! Usage: cargo run --release --example gradcheck [seed]

use causal_probe::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOL};

fn main() -> causal_probe::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let reports = run_suite(100, seed, DEFAULT_EPS)?;
    let mut failures = 0usize;
    let mut worst_name = String::new();
    let mut worst = 0.0f64;
    for r in &reports {
        let ok = r.max_rel_err < DEFAULT_TOL;
        if !ok {
            failures += 1;
        }
        println!(
            "{} {:<44} elements {:>5}  max rel err {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.elements,
            r.max_rel_err
        );
        if r.max_rel_err > worst {
            worst = r.max_rel_err;
            worst_name = r.name.clone();
        }
    }
    println!();
    println!("cases: {}  tolerance: {DEFAULT_TOL:.0e}", reports.len());
    println!("worst: {worst_name} ({worst:.3e})");
    if failures > 0 {
        println!("{failures} case(s) failed");
        std::process::exit(3);
    }
    println!("all gradients check out");
    Ok(())
}

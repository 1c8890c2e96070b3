//! Finite-difference audit of every differentiable op family and of the
//! selector, head and critic paths.
//!
//! cargo run --release --example grad_check -- [draws]

use ds2net::gradsuite::run_suite;

fn main() -> ds2net::Result<()> {
    let draws = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    for r in run_suite(draws, 1e-5)? {
        println!("{:<32} {:>3} draws  max rel err {:.2e}  {}", r.name, r.draws, r.max_rel_err, if r.passed(1e-4) { "ok" } else { "FAIL" });
    }
    Ok(())
}

//! Finite-difference verification of every backward rule in 64-bit mode.

use std::time::Instant;

use awracle::gradcheck::run_suite;

fn main() -> anyhow::Result<()> {
    let start = Instant::now();
    let results = run_suite(10, 3, false)?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>10.3e}  (tol {:.0e}, {} entries)  {verdict}", r.name, r.max_rel, r.tolerance, r.entries);
    }
    println!("{:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

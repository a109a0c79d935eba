//! Finite-difference check of every trainable objective on random tabular
//! instances, with the stop-gradient weights frozen at the unperturbed point.
//!
//! ```text
//! cargo run --release --example gradient_check -- [instances] [seed]
//! ```

use gftlab::objectives::{gradcheck_suite, GRADCHECK_TOLERANCE};

fn main() -> gftlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = std::time::Instant::now();
    let rows = gradcheck_suite(instances, seed)?;
    println!("{:<14} {:>9} {:>14}", "objective", "instances", "max_rel_error");
    for r in &rows {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<14} {:>9} {:>14.3e} {verdict}", r.objective, r.instances, r.max_rel_error);
    }
    println!(
        "tolerance {GRADCHECK_TOLERANCE:e}, {:.2}s",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

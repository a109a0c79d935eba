//! GFT accuracy and rectification rate across the rectifier threshold on
//! the desk modadd setup.
//!
//! ```text
//! cargo run --release --example tau_sweep -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{tau_sweep, ExperimentSpec, MethodSpec, DEFAULT_TAUS};
use gftlab::objectives::ObjectiveKind;

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut spec = ExperimentSpec::desk("tau-sweep", vec![MethodSpec::single(ObjectiveKind::Gft)]);
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);
    let outcome = tau_sweep(&spec, &DEFAULT_TAUS, false)?;
    println!("{}", outcome.table.to_markdown());
    Ok(())
}

//! GFT accuracy across the demonstration : self-sample split of a K=8 group
//! on the desk modadd setup.
//!
//! ```text
//! cargo run --release --example ratio_sweep -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{ratio_composition, ratio_sweep, ExperimentSpec, MethodSpec, DEFAULT_RATIOS};
use gftlab::objectives::ObjectiveKind;

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut spec = ExperimentSpec::desk("ratio-sweep", vec![MethodSpec::single(ObjectiveKind::Gft)]);
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);
    for (d, s) in DEFAULT_RATIOS {
        let c = ratio_composition(d, s);
        println!("{d}:{s} -> expert {} teacher {} self {}", c.n_expert, c.n_teacher, c.n_self);
    }
    let outcome = ratio_sweep(&spec, &DEFAULT_RATIOS, false)?;
    println!("{}", outcome.table.to_markdown());
    Ok(())
}

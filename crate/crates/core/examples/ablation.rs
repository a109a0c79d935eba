//! Removes group advantage learning, coefficient rectification, or both from
//! GFT under the matched budget on the desk modadd setup.
//!
//! ```text
//! cargo run --release --example ablation -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{ablation_study, ExperimentSpec, MethodSpec};
use gftlab::objectives::ObjectiveKind;

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let methods = [
        ObjectiveKind::Sft,
        ObjectiveKind::GftNoGal,
        ObjectiveKind::GftNoDcr,
        ObjectiveKind::Gft,
    ]
    .into_iter()
    .map(MethodSpec::single)
    .collect();
    let mut spec = ExperimentSpec::desk("ablation", methods);
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);
    let outcome = ablation_study(&spec, false)?;
    println!("{}", outcome.table.to_markdown());
    Ok(())
}

//! Drift from a base pre-fit on a side task: KL-to-base trajectories and
//! side-task retention of SFT, GFT and GRPO.
//!
//! ```text
//! cargo run --release --example forgetting -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{forgetting_study, ExperimentSpec, MethodSpec};
use gftlab::objectives::ObjectiveKind;

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let methods = [ObjectiveKind::Sft, ObjectiveKind::Gft, ObjectiveKind::Grpo]
        .into_iter()
        .map(MethodSpec::single)
        .collect();
    let mut spec = ExperimentSpec::desk("forgetting", methods);
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);
    let outcome = forgetting_study(&spec, false)?;
    println!("{}", outcome.table.to_markdown());
    println!("{}", outcome.trajectories.to_markdown());
    Ok(())
}

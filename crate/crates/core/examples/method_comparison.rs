//! Matched-budget comparison of SFT, GFT, GRPO and the two single ablations
//! on modadd (M=97), followed by the diversity, ablation and forgetting views
//! of the same runs.
//!
//! ```text
//! cargo run --release --example method_comparison -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{run_experiment, ExperimentSpec};

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut spec = ExperimentSpec::desk("method-comparison", ExperimentSpec::standard_methods());
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);

    let result = run_experiment(&spec, false)?;
    if let Some(a) = result.teacher_accuracy {
        println!("teacher accuracy {a:.3}");
    }
    for t in [result.method_table()?, result.diversity_table()?, result.forgetting_table()?] {
        println!("{}", t.to_markdown());
    }
    for (seed, gft, sft) in result.paired("gft", "sft", |s| Some(s.report.accuracy)) {
        println!("seed {seed}: gft {gft:.3} sft {sft:.3}");
    }
    Ok(())
}

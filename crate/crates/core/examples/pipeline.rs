//! Multi-stage pipelines under one matched budget: SFT followed by GFT or
//! GRPO, against single-stage SFT and GFT.
//!
//! ```text
//! cargo run --release --example pipeline -- [n_seeds] [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{run_experiment, ExperimentSpec, MethodSpec};
use gftlab::objectives::ObjectiveKind;

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let methods = vec![
        MethodSpec::single(ObjectiveKind::Sft),
        MethodSpec::single(ObjectiveKind::Gft),
        MethodSpec::pipeline("sft_then_gft", &[ObjectiveKind::Sft, ObjectiveKind::Gft]),
        MethodSpec::pipeline("sft_then_grpo", &[ObjectiveKind::Sft, ObjectiveKind::Grpo]),
    ];
    let mut spec = ExperimentSpec::desk("pipeline", methods);
    spec.seeds = (0..n_seeds).collect();
    spec.output_dir = args.next().map(PathBuf::from);
    for m in &spec.methods {
        let stages = spec.stage_configs(m)?;
        let plan: Vec<String> = stages.iter().map(|s| format!("{} x{}", s.name, s.steps)).collect();
        println!("{}: {}", m.label, plan.join(" -> "));
    }
    let result = run_experiment(&spec, false)?;
    println!("{}", result.method_table()?.to_markdown());
    Ok(())
}
